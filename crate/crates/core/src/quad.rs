//! Gauss–Legendre rules, composite panels with refined bands, and sampled
//! fields on tensor-product quadrature grids.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{invalid, Result};

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "gauss_legendre: n must be at least 1");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = ((i as f64 + 0.75) / (n as f64 + 0.5) * std::f64::consts::PI).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_p_dp(n, z);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_p_dp(n, z);
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_p_dp(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// A fixed Gauss–Legendre rule kept around for repeated panel integration.
#[derive(Clone, Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(order: usize) -> Self {
        let (nodes, weights) = gauss_legendre(order);
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Integrate `f` over [a, b] with a single panel.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }
}

/// One-dimensional composite quadrature rule.
#[derive(Clone, Debug, Default)]
pub struct Rule1D {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1D {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Largest gap between neighbouring nodes (or to the ends, which are unknown
    /// here, so only interior gaps count).
    pub fn max_spacing(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// Builder for composite rules whose panels are aligned to breakpoints, with
/// extra subdivision inside "bands" (thin transition layers of mollified data).
#[derive(Clone, Debug)]
pub struct RuleBuilder {
    breaks: Vec<f64>,
    bands: Vec<(f64, f64)>,
    order: usize,
    max_width: f64,
    band_panels: usize,
}

impl RuleBuilder {
    pub fn new(a: f64, b: f64) -> Self {
        Self {
            breaks: vec![a, b],
            bands: Vec::new(),
            order: 8,
            max_width: f64::INFINITY,
            band_panels: 4,
        }
    }

    pub fn order(mut self, order: usize) -> Self {
        self.order = order;
        self
    }

    pub fn max_width(mut self, w: f64) -> Self {
        self.max_width = w;
        self
    }

    pub fn band_panels(mut self, n: usize) -> Self {
        self.band_panels = n.max(1);
        self
    }

    pub fn breakpoint(&mut self, x: f64) -> &mut Self {
        self.breaks.push(x);
        self
    }

    pub fn band(&mut self, lo: f64, hi: f64) -> &mut Self {
        if hi > lo {
            self.bands.push((lo, hi));
            self.breaks.push(lo);
            self.breaks.push(hi);
        }
        self
    }

    pub fn build(&self) -> Rule1D {
        let lo = self.breaks[0];
        let hi = self.breaks[1];
        let mut pts: Vec<f64> = self
            .breaks
            .iter()
            .copied()
            .filter(|x| *x >= lo && *x <= hi)
            .collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * (1.0 + b.abs()));
        let mut bands = self.bands.clone();
        bands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let rule = GaussRule::new(self.order);
        let mut out = Rule1D::default();
        for seg in pts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let len = b - a;
            if len <= 0.0 {
                continue;
            }
            let mid = 0.5 * (a + b);
            let in_band = bands.iter().any(|&(l, h)| l <= mid && mid <= h);
            let mut panels = (len / self.max_width).ceil().max(1.0) as usize;
            if in_band {
                panels = panels.max(self.band_panels);
            }
            let step = len / panels as f64;
            for p in 0..panels {
                let pa = a + p as f64 * step;
                let half = 0.5 * step;
                let c = pa + half;
                for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                    out.nodes.push(c + half * x);
                    out.weights.push(w * half);
                }
            }
        }
        out
    }
}

/// Tensor product of two 1D rules: node (i, j) sits at (x[i], y[j]).
#[derive(Clone, Debug)]
pub struct TensorGrid {
    pub x: Rule1D,
    pub y: Rule1D,
}

impl TensorGrid {
    pub fn new(x: Rule1D, y: Rule1D) -> Arc<Self> {
        Arc::new(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len() * self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.x.len() + ix
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        let nx = self.x.len();
        [self.x.nodes[i % nx], self.y.nodes[i / nx]]
    }

    pub fn weight(&self, i: usize) -> f64 {
        let nx = self.x.len();
        self.x.weights[i % nx] * self.y.weights[i / nx]
    }
}

/// Complex function values on the nodes of a [`TensorGrid`].
#[derive(Clone, Debug)]
pub struct SampledField2D {
    pub grid: Arc<TensorGrid>,
    pub values: Vec<Complex64>,
}

impl SampledField2D {
    pub fn zeros(grid: Arc<TensorGrid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_fn(grid: Arc<TensorGrid>, f: impl Fn(f64, f64) -> Complex64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for &y in &grid.y.nodes {
            for &x in &grid.x.nodes {
                values.push(f(x, y));
            }
        }
        Self { grid, values }
    }

    pub fn from_real_fn(grid: Arc<TensorGrid>, f: impl Fn(f64, f64) -> f64) -> Self {
        Self::from_fn(grid, |x, y| Complex64::new(f(x, y), 0.0))
    }

    fn check_grid(&self, other: &Self) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid)
            || (self.grid.x.nodes == other.grid.x.nodes && self.grid.y.nodes == other.grid.y.nodes)
        {
            Ok(())
        } else {
            Err(invalid("grid", "fields live on different quadrature grids"))
        }
    }

    pub fn integrate(&self) -> Complex64 {
        let nx = self.grid.x.len();
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, wy) in self.grid.y.weights.iter().enumerate() {
            let row = &self.values[j * nx..(j + 1) * nx];
            let mut r = Complex64::new(0.0, 0.0);
            for (v, wx) in row.iter().zip(&self.grid.x.weights) {
                r += v * wx;
            }
            acc += r * wy;
        }
        acc
    }

    /// `∫ self · conj(other)`.
    pub fn inner(&self, other: &Self) -> Result<Complex64> {
        self.check_grid(other)?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            acc += a * b.conj() * self.grid.weight(i);
        }
        Ok(acc)
    }

    pub fn lp_norm(&self, p: f64) -> f64 {
        let s: f64 = self
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v.norm().powf(p) * self.grid.weight(i))
            .sum();
        s.powf(1.0 / p)
    }

    pub fn l2_norm(&self) -> f64 {
        self.lp_norm(2.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_grid(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            grid: self.grid.clone(),
            values,
        })
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Moment `∫ f(x) x^β dx` by the grid quadrature.
    pub fn moment(&self, beta: [u32; 2]) -> Complex64 {
        let g = &self.grid;
        let nx = g.x.len();
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, (&y, &wy)) in g.y.nodes.iter().zip(&g.y.weights).enumerate() {
            let yb = y.powi(beta[1] as i32);
            for (i, (&x, &wx)) in g.x.nodes.iter().zip(&g.x.weights).enumerate() {
                acc += self.values[j * nx + i] * (wx * wy * x.powi(beta[0] as i32) * yb);
            }
        }
        acc
    }
}

/// Pairwise (cascade) summation, used where reductions must be order-fixed.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in [1usize, 2, 5, 8, 16] {
            let (x, w) = gauss_legendre(n);
            for k in 0..(2 * n) {
                let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                let exact = if k % 2 == 1 {
                    0.0
                } else {
                    2.0 / (k as f64 + 1.0)
                };
                assert!((approx - exact).abs() < 1e-13, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn composite_rule_respects_breaks_and_bands() {
        let mut b = RuleBuilder::new(0.0, 1.0)
            .order(4)
            .max_width(0.3)
            .band_panels(3);
        b.breakpoint(0.5).band(0.49, 0.51);
        let r = b.build();
        let total: f64 = r.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
        // A step at 0.5 integrates exactly because 0.5 is a panel edge.
        let step = r.integrate(|x| if x < 0.5 { 1.0 } else { 3.0 });
        assert!((step - 2.0).abs() < 1e-14);
        let inside = r
            .nodes
            .iter()
            .filter(|&&x| (0.49..0.51).contains(&x))
            .count();
        assert_eq!(inside, 2 * 3 * 4);
    }

    #[test]
    fn sampled_field_moment_of_linear_function() {
        let r = RuleBuilder::new(0.0, 1.0).order(4).build();
        let g = TensorGrid::new(r.clone(), r);
        let f = SampledField2D::from_real_fn(g, |x, _| x);
        assert!((f.moment([1, 0]).re - 1.0 / 3.0).abs() < 1e-14);
        assert!((f.integrate().re - 0.5).abs() < 1e-14);
    }
}
