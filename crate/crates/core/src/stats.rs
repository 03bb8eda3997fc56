//! Small fitting and summary helpers shared by the scans and the harness.

/// Least-squares line `y ≈ slope·x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual.
    pub rms: f64,
    pub points: usize,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (xs[..n]
        .iter()
        .zip(&ys[..n])
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    Some(LineFit {
        slope,
        intercept,
        rms,
        points: n,
    })
}

/// Fit `log₂ y` against `x`, skipping non-positive `y`.
pub fn fit_log2(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let (fx, fy): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .zip(ys)
        .filter(|(_, y)| **y > 0.0 && y.is_finite())
        .map(|(x, y)| (*x, y.log2()))
        .unzip();
    fit_line(&fx, &fy)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard error of the mean.
pub fn std_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}
