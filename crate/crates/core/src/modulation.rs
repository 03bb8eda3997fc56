//! Father wavelets, modulations and Kakeya-type Alpert polynomials.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::alpert::{profiles, AtomFamily, Axis, SquareGeom, Variant, MOLLIFIER_HALF_WIDTH};
use crate::dyadic::{DyadicSquare, Placement, Rect};
use crate::error::{invalid, Error, Result};
use crate::frame::{CoefficientMap, DecayScan, FrameContext};
use crate::quad::{GaussRule, RuleBuilder, SampledField2D, TensorGrid};
use crate::stats::{fit_log2, LineFit};

/// Width of each smooth ramp of the plateau profile, in units of `ℓ(I)`.
pub const RAMP: f64 = 0.4;
/// Minimum quadrature points per oscillation wavelength.
pub const MIN_POINTS_PER_WAVELENGTH: f64 = 10.0;

fn smooth_step(u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / u).exp();
    let b = (-1.0 / (1.0 - u)).exp();
    a / (a + b)
}

/// 1D plateau profile: 1 on `[0,1]`, smooth ramps on `[−RAMP,0]` and `[1,1+RAMP]`.
pub fn plateau1(t: f64) -> f64 {
    if t < 0.0 {
        smooth_step((t + RAMP) / RAMP)
    } else if t > 1.0 {
        smooth_step((1.0 + RAMP - t) / RAMP)
    } else {
        1.0
    }
}

/// `∫ plateau1²`.
pub fn plateau_norm_sq() -> f64 {
    static N: OnceLock<f64> = OnceLock::new();
    *N.get_or_init(|| {
        let g = GaussRule::new(24);
        let ramp = |a: f64, b: f64| {
            let k = 64;
            let h = (b - a) / k as f64;
            (0..k)
                .map(|i| {
                    g.integrate(a + i as f64 * h, a + (i + 1) as f64 * h, |t| {
                        plateau1(t).powi(2)
                    })
                })
                .sum::<f64>()
        };
        1.0 + ramp(-RAMP, 0.0) + ramp(1.0, 1.0 + RAMP)
    })
}

/// `c_♭ = ⟨φ, φ⟩` for the normalized father wavelet.
pub fn c_flat() -> f64 {
    1.0
}

/// L²-normalized father wavelet on a square: `φ_I(x) = a·p((x₁−x₀)/ℓ)·p((x₂−y₀)/ℓ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Father {
    pub geom: SquareGeom,
    pub amp: f64,
}

impl Father {
    pub fn new(geom: SquareGeom) -> Self {
        Self {
            geom,
            amp: 1.0 / (geom.side * plateau_norm_sq()),
        }
    }

    pub fn on(q: &DyadicSquare, place: &Placement) -> Self {
        Self::new(SquareGeom::from_dyadic(q, place))
    }

    pub fn axis_x(&self, x: f64) -> f64 {
        plateau1((x - self.geom.x0) / self.geom.side)
    }

    pub fn axis_y(&self, y: f64) -> f64 {
        plateau1((y - self.geom.y0) / self.geom.side)
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        self.amp * self.axis_x(p[0]) * self.axis_y(p[1])
    }

    /// Plateau value `max φ_I`.
    pub fn plateau_value(&self) -> f64 {
        self.amp
    }

    /// `(1+2·RAMP)I ⊂ 2I`.
    pub fn support(&self) -> Rect {
        self.geom.rect().dilate(1.0 + 2.0 * RAMP)
    }

    pub fn plateau(&self) -> Rect {
        self.geom.rect()
    }

    /// Breakpoints of one axis profile: `[lo−r, lo, hi, hi+r]`.
    fn breaks(&self, lo: f64) -> [f64; 4] {
        let l = self.geom.side;
        [lo - RAMP * l, lo, lo + l, lo + l + RAMP * l]
    }

    /// Tensor Gauss grid over the support, `order` nodes on each of `panels` panels per piece.
    pub fn grid(&self, order: usize, panels: usize) -> Arc<TensorGrid> {
        let build = |lo: f64| {
            let b = self.breaks(lo);
            let mut rb = RuleBuilder::new(b[0], b[3])
                .order(order)
                .band_panels(panels);
            rb.band(b[0], b[1]).band(b[2], b[3]);
            rb.build()
        };
        TensorGrid::new(build(self.geom.x0), build(self.geom.y0))
    }

    pub fn field(&self, grid: Arc<TensorGrid>) -> SampledField2D {
        SampledField2D::from_real_fn(grid, |x, y| self.eval([x, y]))
    }
}

/// `△^φ_I f = ⟨f, φ_I⟩ φ_I` sampled on the grid of `f`.
pub fn father_projection(f: &SampledField2D, phi: &Father) -> SampledField2D {
    let pf = phi.field(f.grid.clone());
    let c = f.inner(&pf).expect("same grid");
    pf.scale(c)
}

/// Modulation vectors `u_I = (u′_I, 0)` on one level, with `|u′_I| ∈ [2^{2s}, 2^{2s+10}]`
/// for the physical scale exponent `s` (`ℓ(I) = 2^{−s}`).
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationSequence {
    pub level: i32,
    pub scale: i32,
    pub u: BTreeMap<DyadicSquare, [f64; 3]>,
}

impl ModulationSequence {
    pub fn magnitude_window(scale: i32) -> (f64, f64) {
        (
            ((2 * scale) as f64).exp2(),
            ((2 * scale + 10) as f64).exp2(),
        )
    }

    /// Checked constructor; the tolerance on the window edges is relative `1e-12`.
    pub fn new(level: i32, scale: i32, u: BTreeMap<DyadicSquare, [f64; 2]>) -> Result<Self> {
        let (lo, hi) = Self::magnitude_window(scale);
        let mut out = BTreeMap::new();
        for (q, v) in u {
            if q.level != level {
                return Err(Error::LevelMismatch(format!("{q} is not at level {level}")));
            }
            let m = v[0].hypot(v[1]);
            if !(m >= lo * (1.0 - 1e-12) && m <= hi * (1.0 + 1e-12)) {
                return Err(invalid(
                    "u",
                    format!("|u| = {m} outside [{lo}, {hi}] at {q}"),
                ));
            }
            out.insert(q, [v[0], v[1], 0.0]);
        }
        Ok(Self {
            level,
            scale,
            u: out,
        })
    }

    /// Zero modulation; exempt from the magnitude window.
    pub fn zero(level: i32, squares: &[DyadicSquare]) -> Self {
        Self {
            level,
            scale: level,
            u: squares.iter().map(|q| (*q, [0.0; 3])).collect(),
        }
    }

    /// Directions from a golden-angle sequence with a random offset, magnitudes
    /// `2^{2s+m}` with `m` uniform in `[0, span]`.
    pub fn sample(
        level: i32,
        scale: i32,
        squares: &[DyadicSquare],
        span: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..=10.0).contains(&span) {
            return Err(invalid("span", "must lie in [0, 10]"));
        }
        let golden = 0.5 * (5f64.sqrt() - 1.0);
        let off: f64 = rng.gen();
        let mut u = BTreeMap::new();
        for (k, q) in squares.iter().enumerate() {
            let th = 2.0 * PI * (off + golden * k as f64).fract();
            let m: f64 = if span > 0.0 {
                rng.gen_range(0.0..=span)
            } else {
                0.0
            };
            let r = ((2 * scale) as f64 + m).exp2();
            u.insert(*q, [r * th.cos(), r * th.sin()]);
        }
        Self::new(level, scale, u)
    }

    pub fn get(&self, q: &DyadicSquare) -> Option<[f64; 2]> {
        self.u.get(q).map(|v| [v[0], v[1]])
    }
}

/// `Σ_L e^{i u_L·y} f_L(y)` over pieces indexed by one slice.
pub fn modulate(
    pieces: &BTreeMap<DyadicSquare, SampledField2D>,
    u: &ModulationSequence,
) -> Result<SampledField2D> {
    let mut it = pieces.iter();
    let Some((_, first)) = it.next() else {
        return Err(Error::Empty("pieces"));
    };
    let mut out = SampledField2D::zeros(first.grid.clone());
    for (q, f) in pieces {
        if q.level != u.level {
            return Err(Error::LevelMismatch(format!(
                "piece {q} vs sequence level {}",
                u.level
            )));
        }
        let v = u
            .get(q)
            .ok_or_else(|| invalid("u", format!("no modulation for {q}")))?;
        let g = &f.grid;
        let mut m = f.clone();
        for (i, val) in m.values.iter_mut().enumerate() {
            let p = g.point(i);
            *val *= Complex64::from_polar(1.0, v[0] * p[0] + v[1] * p[1]);
        }
        out.add_assign(&m)?;
    }
    Ok(out)
}

/// Resolution settings for oscillatory quadrature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OscSettings {
    pub points_per_wavelength: f64,
    pub order: usize,
    pub band_panels: usize,
}

impl Default for OscSettings {
    fn default() -> Self {
        Self {
            points_per_wavelength: 20.0,
            order: 16,
            band_panels: 8,
        }
    }
}

impl OscSettings {
    fn check(&self) -> Result<()> {
        if self.points_per_wavelength < MIN_POINTS_PER_WAVELENGTH || self.order < 2 {
            return Err(Error::UnderResolved {
                what: "oscillatory quadrature".into(),
                required: format!("at least {MIN_POINTS_PER_WAVELENGTH} points per wavelength"),
            });
        }
        Ok(())
    }

    /// Largest panel width giving the requested density at frequency `w`.
    pub fn max_width(&self, w: f64) -> f64 {
        if w == 0.0 {
            return f64::INFINITY;
        }
        let lambda = 2.0 * PI / w.abs();
        self.order as f64 * lambda / self.points_per_wavelength
    }
}

/// `∫ e^{i w y} p((y−lo)/ℓ_I) F_{J,k}(y) dy` for every profile `k` of `axis`.
#[allow(clippy::too_many_arguments)]
pub fn oscillatory_axis(
    fam: &AtomFamily,
    father_lo: f64,
    father_side: f64,
    axis: &Axis,
    variant: Variant,
    w: f64,
    osc: &OscSettings,
) -> Result<Vec<Complex64>> {
    osc.check()?;
    let n = fam.n();
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    let rho = match variant {
        Variant::Raw => 0.0,
        Variant::Smooth => MOLLIFIER_HALF_WIDTH * fam.eta() * axis.side,
    };
    let fb = [
        father_lo - RAMP * father_side,
        father_lo,
        father_lo + father_side,
        father_lo + (1.0 + RAMP) * father_side,
    ];
    let lo = fb[0].max(axis.lo - rho);
    let hi = fb[3].min(axis.hi() + rho);
    if hi <= lo {
        return Ok(out);
    }
    let mut rb = RuleBuilder::new(lo, hi)
        .order(osc.order)
        .max_width(osc.max_width(w).min(0.125 * father_side))
        .band_panels(osc.band_panels);
    rb.band(fb[0], fb[1]).band(fb[2], fb[3]);
    for p in axis.breaks() {
        if rho > 0.0 {
            rb.band(p - rho, p + rho);
        } else {
            rb.breakpoint(p);
        }
    }
    let rule = rb.build();
    let mut f = vec![0.0; n];
    for (&y, &wt) in rule.nodes.iter().zip(&rule.weights) {
        profiles(axis, variant, fam.kappa(), &fam.moll, y, &mut f);
        let g = wt * plateau1((y - father_lo) / father_side);
        if g == 0.0 {
            continue;
        }
        let e = Complex64::from_polar(g, w * y);
        for (o, v) in out.iter_mut().zip(&f) {
            *o += e * *v;
        }
    }
    Ok(out)
}

/// `Σ_{ij} A[i,j] X_i Y_j / ℓ_J` for every atom.
fn contract(
    fam: &AtomFamily,
    x: &[Complex64],
    y: &[Complex64],
    side: f64,
    scale: f64,
) -> Vec<Complex64> {
    let n = fam.n();
    fam.basis
        .matrices
        .iter()
        .map(|m| {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                if x[i] == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let mut r = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    r += m[i * n + j] * y[j];
                }
                acc += x[i] * r;
            }
            acc * (scale / side)
        })
        .collect()
}

/// `∫ e^{σ i u·y} φ_I(y) h_{J,a}(y) dy` for every atom `a` of `J`, with `σ = ±1`.
pub fn modulated_coefficients(
    fam: &AtomFamily,
    phi: &Father,
    j: &SquareGeom,
    variant: Variant,
    u: [f64; 2],
    sign: f64,
    osc: &OscSettings,
) -> Result<Vec<Complex64>> {
    osc.check()?;
    let supp = match variant {
        Variant::Raw => j.rect(),
        Variant::Smooth => j.smooth_support(fam.eta()),
    };
    let ov = phi.support().intersection(&supp);
    if ov.is_empty() || ov.area() == 0.0 {
        return Ok(vec![Complex64::new(0.0, 0.0); fam.dim()]);
    }
    let g = &phi.geom;
    let x = oscillatory_axis(fam, g.x0, g.side, &j.axis_x(), variant, sign * u[0], osc)?;
    let y = oscillatory_axis(fam, g.y0, g.side, &j.axis_y(), variant, sign * u[1], osc)?;
    Ok(contract(fam, &x, &y, j.side, phi.amp))
}

/// `⟨M_u φ_I, h^η_{J,a}⟩` for every atom of `J`.
pub fn modulated_coefficient(
    fam: &AtomFamily,
    place: &Placement,
    i: &DyadicSquare,
    j: &DyadicSquare,
    u: [f64; 2],
    osc: &OscSettings,
) -> Result<Vec<Complex64>> {
    let phi = Father::on(i, place);
    modulated_coefficients(
        fam,
        &phi,
        &SquareGeom::from_dyadic(j, place),
        Variant::Smooth,
        u,
        1.0,
        osc,
    )
}

/// Tree distance from `j` to the descendants of `i` at level `t ≥ level(i)`.
pub fn dtree_to_descendants(j: &DyadicSquare, i: &DyadicSquare, t: i32) -> Result<u32> {
    let a = if i.contains(j) {
        j.level.min(t)
    } else {
        let d0 = crate::dyadic::dtree(j, i)? as i32;
        (j.level + i.level - d0) / 2
    };
    Ok((j.level + t - 2 * a) as u32)
}

/// Squares of one level (base tree, or the super-root chain for negative
/// levels) whose atom support meets `supp` with nonempty interior.
fn level_axes(
    level: i32,
    place: &Placement,
    supp: &Rect,
    variant: Variant,
    eta: f64,
) -> (Vec<i64>, Vec<i64>) {
    if level < 0 {
        let q = DyadicSquare::ROOT
            .ancestor(level)
            .expect("super-root level");
        return (vec![q.ix], vec![q.iy]);
    }
    let n = 1i64 << level;
    let side = place.side * (-level as f64).exp2();
    let reach = match variant {
        Variant::Raw => 0.0,
        Variant::Smooth => MOLLIFIER_HALF_WIDTH * eta * side,
    };
    let pick = |origin: f64, lo: f64, hi: f64| -> Vec<i64> {
        (0..n)
            .filter(|k| {
                let a = origin + *k as f64 * side - reach;
                let b = a + side + 2.0 * reach;
                b > lo && a < hi
            })
            .collect()
    };
    (
        pick(place.origin[0], supp.x0, supp.x1),
        pick(place.origin[1], supp.y0, supp.y1),
    )
}

/// One square's coefficients in a scales scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleEntry {
    pub square: DyadicSquare,
    pub dtree: u32,
    pub max_abs: f64,
    pub mass: f64,
}

/// Coefficients of `M_u φ_I` against the smooth frame over a window of levels.
#[derive(Clone, Debug)]
pub struct ScalesScan {
    pub reference: DyadicSquare,
    pub t: i32,
    pub u: [f64; 2],
    pub entries: Vec<ScaleEntry>,
    pub by_distance: DecayScan,
    /// `(level, mass fraction)`.
    pub level_mass: Vec<(i32, f64)>,
    /// Fit of `log₂ max|coef|` against `r − t` for `J ⊂ 2I`, `r > t`.
    pub fine_fit: Option<LineFit>,
}

impl ScalesScan {
    /// Mass fraction in levels `[t−n, t+n]`.
    pub fn concentration(&self, n: i32) -> f64 {
        self.level_mass
            .iter()
            .filter(|(l, _)| (l - self.t).abs() <= n)
            .map(|(_, m)| m)
            .sum()
    }

    /// Decay rate in the fine regime (`−slope`).
    pub fn fine_rate(&self) -> Option<f64> {
        self.fine_fit.map(|f| -f.slope)
    }

    pub fn to_csv(&self) -> String {
        let s = self.reference.level;
        let mut out = String::from("s,level,ix,iy,dtree,max_abs\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6e}\n",
                s, e.square.level, e.square.ix, e.square.iy, e.dtree, e.max_abs
            ));
        }
        out
    }

    pub fn profile_csv(&self) -> String {
        let mut out = String::from("level,mass_fraction\n");
        for (l, m) in &self.level_mass {
            out.push_str(&format!("{l},{m:.6e}\n"));
        }
        out
    }
}

/// Scan `⟨M_u φ_I, h^η_{J,a}⟩` over every square `J` at levels `lo..=hi`
/// whose smooth support meets `supp φ_I`; `t = 2·level(I)`.
pub fn scales_decay_scan(
    fam: &AtomFamily,
    place: &Placement,
    i: &DyadicSquare,
    u: [f64; 2],
    levels: (i32, i32),
    osc: &OscSettings,
) -> Result<ScalesScan> {
    let side = place.side_of(i);
    let (wlo, whi) = (side.powi(-2), 1024.0 * side.powi(-2));
    let m = u[0].hypot(u[1]);
    if !(m >= wlo * (1.0 - 1e-12) && m <= whi * (1.0 + 1e-12)) {
        return Err(invalid("u", format!("|u| = {m} outside [{wlo}, {whi}]")));
    }
    if levels.0 < -crate::dyadic::SUPER_LEVELS || levels.1 < levels.0 || levels.1 > 14 {
        return Err(invalid("levels", format!("{levels:?}")));
    }
    let t = 2 * i.level;
    let phi = Father::on(i, place);
    let supp = phi.support();
    let two_i = place.square(i).dilate(2.0);
    let mut entries = Vec::new();
    let mut fine: BTreeMap<i32, f64> = BTreeMap::new();
    for r in levels.0..=levels.1 {
        let (xs, ys) = level_axes(r, place, &supp, Variant::Smooth, fam.eta());
        let lside = place.side * (-r as f64).exp2();
        let axis = |o: f64, k: i64| Axis {
            lo: o + k as f64 * lside,
            side: lside,
        };
        let g = &phi.geom;
        let xv: Vec<Vec<Complex64>> = xs
            .par_iter()
            .map(|k| {
                oscillatory_axis(
                    fam,
                    g.x0,
                    g.side,
                    &axis(place.origin[0], *k),
                    Variant::Smooth,
                    u[0],
                    osc,
                )
            })
            .collect::<Result<_>>()?;
        let yv: Vec<Vec<Complex64>> = ys
            .par_iter()
            .map(|k| {
                oscillatory_axis(
                    fam,
                    g.y0,
                    g.side,
                    &axis(place.origin[1], *k),
                    Variant::Smooth,
                    u[1],
                    osc,
                )
            })
            .collect::<Result<_>>()?;
        let pairs: Vec<(usize, usize)> = (0..ys.len())
            .flat_map(|b| (0..xs.len()).map(move |a| (a, b)))
            .collect();
        let level_entries: Vec<ScaleEntry> = pairs
            .par_iter()
            .map(|&(a, b)| {
                let q = DyadicSquare {
                    level: r,
                    ix: xs[a],
                    iy: ys[b],
                };
                let c = contract(fam, &xv[a], &yv[b], lside, phi.amp);
                let mass: f64 = c.iter().map(|z| z.norm_sqr()).sum();
                let max_abs = c.iter().map(|z| z.norm()).fold(0.0, f64::max);
                Ok(ScaleEntry {
                    square: q,
                    dtree: dtree_to_descendants(&q, i, t)?,
                    max_abs,
                    mass,
                })
            })
            .collect::<Result<_>>()?;
        if r > t {
            for e in &level_entries {
                let rect = place.square(&e.square);
                if rect.x0 >= two_i.x0
                    && rect.x1 <= two_i.x1
                    && rect.y0 >= two_i.y0
                    && rect.y1 <= two_i.y1
                {
                    let v = fine.entry(r).or_insert(0.0);
                    *v = v.max(e.max_abs);
                }
            }
        }
        entries.extend(level_entries);
    }
    let total: f64 = entries.iter().map(|e| e.mass).sum();
    let mut by_level: BTreeMap<i32, f64> = (levels.0..=levels.1).map(|l| (l, 0.0)).collect();
    for e in &entries {
        *by_level.get_mut(&e.square.level).expect("level in window") += e.mass;
    }
    let level_mass = by_level
        .into_iter()
        .map(|(l, m)| (l, if total > 0.0 { m / total } else { 0.0 }))
        .collect();
    let by_distance = DecayScan::from_samples(entries.iter().map(|e| (e.dtree, e.max_abs)), (2, 6));
    let (fx, fy): (Vec<f64>, Vec<f64>) = fine.iter().map(|(r, v)| ((r - t) as f64, *v)).unzip();
    Ok(ScalesScan {
        reference: *i,
        t,
        u,
        entries,
        by_distance,
        level_mass,
        fine_fit: fit_log2(&fx, &fy),
    })
}

/// Outer level, inner level and profile of a Kakeya-type polynomial.
#[derive(Clone, Debug)]
pub struct KakeyaPolynomial {
    pub fam: AtomFamily,
    pub place: Placement,
    /// Base-tree level of the outer squares.
    pub s: i32,
    /// Base-tree level of the inner squares (physical scale twice the outer one).
    pub t: i32,
    /// Outer coefficients after the subunit rescale.
    pub b: BTreeMap<DyadicSquare, Complex64>,
    pub u: ModulationSequence,
    /// Atom weights `w_a` shared by every inner square.
    pub weights: Vec<f64>,
    /// Factor applied to the input `b` so that the sampled sup-norm is `target_sup`.
    pub scale_factor: f64,
    pub signs: Option<BTreeMap<DyadicSquare, i8>>,
    matrix: Vec<f64>,
}

/// Sup-norm target after rescaling; the margin covers sampling between nodes.
pub const TARGET_SUP: f64 = 0.99;

/// Inner base-tree level `t` with physical side `ℓ(I)²`.
pub fn inner_level(s: i32, place: &Placement) -> Result<i32> {
    let lg = place.side.log2();
    if (lg - lg.round()).abs() > 1e-12 {
        return Err(invalid("placement", "side must be a power of two"));
    }
    let t = 2 * s - lg.round() as i32;
    if t < s || t > crate::dyadic::MAX_LEVEL {
        return Err(invalid("s", format!("inner level {t} out of range")));
    }
    Ok(t)
}

impl KakeyaPolynomial {
    /// Realize `Σ_I b_I Σ_{J ∈ 𝒢_t[I]} e^{i c_J·u_I} Σ_a w_a h^η_{J,a}` and
    /// rescale `b` so the sup-norm over `sup_grid` samples is `TARGET_SUP`.
    pub fn build(
        fam: AtomFamily,
        place: Placement,
        b: BTreeMap<DyadicSquare, Complex64>,
        u: ModulationSequence,
        weights: Vec<f64>,
        sup_samples: usize,
    ) -> Result<Self> {
        let s = u.level;
        let t = inner_level(s, &place)?;
        if weights.len() != fam.dim() {
            return Err(invalid(
                "weights",
                format!("expected {} entries", fam.dim()),
            ));
        }
        if b.values().all(|v| *v == Complex64::new(0.0, 0.0)) {
            return Err(Error::Empty("outer coefficients"));
        }
        for q in b.keys() {
            if q.level != s || !q.in_base() {
                return Err(Error::LevelMismatch(format!("{q} vs outer level {s}")));
            }
            if u.get(q).is_none() {
                return Err(invalid("u", format!("no modulation for {q}")));
            }
        }
        let matrix = fam.combine(&weights);
        let mut k = Self {
            fam,
            place,
            s,
            t,
            b,
            u,
            weights,
            scale_factor: 1.0,
            signs: None,
            matrix,
        };
        let sup = k.sampled_sup(sup_samples);
        if sup == 0.0 {
            return Err(Error::Empty("synthesized polynomial"));
        }
        let f = TARGET_SUP / sup;
        k.b.values_mut().for_each(|v| *v *= f);
        k.scale_factor = f;
        Ok(k)
    }

    /// `b_I e^{i c_J·u_I}` for the outer square containing `j` (`0` if none).
    pub fn inner_coefficient(&self, j: &DyadicSquare) -> Complex64 {
        let Some(i) = j.ancestor(self.s) else {
            return Complex64::new(0.0, 0.0);
        };
        match (self.b.get(&i), self.u.get(&i)) {
            (Some(bi), Some(u)) => {
                let c = self.place.center_of(j);
                bi * Complex64::from_polar(1.0, c[0] * u[0] + c[1] * u[1])
            }
            _ => Complex64::new(0.0, 0.0),
        }
    }

    /// Separable matrix of the shared atom combination `Σ_a w_a A_a`.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Coefficient of the atom `h^η_{J,a}`.
    pub fn coefficient(&self, j: &DyadicSquare, a: usize) -> Complex64 {
        self.inner_coefficient(j) * self.weights[a]
    }

    /// Every inner square with its coefficient `b_I e^{i c_J·u_I}`.
    pub fn inner_squares(&self) -> Vec<(DyadicSquare, Complex64)> {
        self.b
            .keys()
            .flat_map(|i| i.descendants(self.t))
            .map(|j| (j, self.inner_coefficient(&j)))
            .collect()
    }

    pub fn eval(&self, p: [f64; 2]) -> Complex64 {
        let q = self.place.to_normalized(p);
        let n = 1i64 << self.t;
        let h = (-self.t as f64).exp2();
        let (cx, cy) = ((q[0] / h).floor() as i64, (q[1] / h).floor() as i64);
        let mut acc = Complex64::new(0.0, 0.0);
        for iy in (cy - 1)..=(cy + 1) {
            for ix in (cx - 1)..=(cx + 1) {
                if !(0..n).contains(&ix) || !(0..n).contains(&iy) {
                    continue;
                }
                let j = DyadicSquare {
                    level: self.t,
                    ix,
                    iy,
                };
                let c = self.inner_coefficient(&j);
                if c == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let g = SquareGeom::from_dyadic(&j, &self.place);
                acc += c * self.fam.eval_matrix(&g, Variant::Smooth, &self.matrix, p);
            }
        }
        acc
    }

    /// Sampled on a tensor grid.
    pub fn field(&self, grid: Arc<TensorGrid>) -> SampledField2D {
        let pts: Vec<Complex64> = (0..grid.len())
            .into_par_iter()
            .map(|i| self.eval(grid.point(i)))
            .collect();
        SampledField2D { grid, values: pts }
    }

    /// Max of `|f|` over a uniform `m×m` lattice per inner square, covering the base.
    pub fn sampled_sup(&self, m: usize) -> f64 {
        let m = m.max(2);
        let n = (1usize << self.t) * m;
        let r = self.place.rect(&DyadicSquare::ROOT.rect());
        let h = r.width() / n as f64;
        (0..=n)
            .into_par_iter()
            .map(|iy| {
                let y = r.y0 + iy as f64 * h;
                (0..=n)
                    .map(|ix| self.eval([r.x0 + ix as f64 * h, y]).norm())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }

    /// The same outer coefficients without the inner phases.
    pub fn unmodulated(&self) -> Self {
        let keys: Vec<DyadicSquare> = self.u.u.keys().copied().collect();
        Self {
            u: ModulationSequence::zero(self.s, &keys),
            ..self.clone()
        }
    }

    /// `M_± f`: flip `b_I` by the given signs.
    pub fn martingale_transform(&self, signs: &BTreeMap<DyadicSquare, i8>) -> Result<Self> {
        if signs.len() != self.b.len() || self.b.keys().any(|q| !signs.contains_key(q)) {
            return Err(invalid("signs", "must be indexed by the outer squares"));
        }
        if signs.values().any(|s| *s != 1 && *s != -1) {
            return Err(invalid("signs", "entries must be ±1"));
        }
        let mut out = self.clone();
        for (q, v) in out.b.iter_mut() {
            *v *= signs[q] as f64;
        }
        let prev = self
            .signs
            .clone()
            .unwrap_or_else(|| signs.keys().map(|q| (*q, 1)).collect());
        out.signs = Some(signs.iter().map(|(q, s)| (*q, s * prev[q])).collect());
        Ok(out)
    }
}

/// `γ_K` over the frame window with the discarded-tail bound.
#[derive(Clone, Debug)]
pub struct GammaResult {
    pub gamma: CoefficientMap,
    /// Largest `Σ_{J discarded} |m_J|·|(G⁻¹)_{KJ}|` over the computed `K`.
    pub tail: f64,
    pub computed: usize,
}

/// `γ_K = ⟨f, φ_I⟩ Σ_J ⟨M_u φ_I, h^η_J⟩ ⟨T⁻²h^η_J, h^η_K⟩` for all window squares
/// `K` with `dtree(K, 𝒢_t[I]) < 2N`, the `J` sum truncated to
/// `dtree(J, K ∪ 𝒢_t[I]) < N`. Uses `⟨T⁻²h^η_J, h^η_K⟩ = (G⁻¹)_{KJ}`, with the rows of
/// `G⁻¹` obtained by conjugate gradients.
pub fn gamma_coefficients(
    ctx: &FrameContext,
    i: &DyadicSquare,
    u: [f64; 2],
    f_coef: Complex64,
    n_trunc: u32,
    osc: &OscSettings,
) -> Result<GammaResult> {
    if n_trunc < 1 {
        return Err(invalid("N", "truncation radius must be at least 1"));
    }
    let d = ctx.d();
    let t = inner_level(i.level, &ctx.place)?;
    let phi = Father::on(i, &ctx.place);
    let m: Vec<Vec<Complex64>> = ctx
        .geoms
        .par_iter()
        .map(|g| modulated_coefficients(&ctx.fam, &phi, g, Variant::Smooth, u, 1.0, osc))
        .collect::<Result<_>>()?;
    let dist: Vec<u32> = ctx
        .squares
        .iter()
        .map(|q| dtree_to_descendants(q, i, t))
        .collect::<Result<_>>()?;
    let ks: Vec<usize> = (0..ctx.squares.len())
        .filter(|k| dist[*k] < 2 * n_trunc)
        .collect();
    let rows: Vec<(usize, Vec<Complex64>, f64)> = ks
        .par_iter()
        .map(|&k| {
            let kq = ctx.squares[k];
            // rows of G⁻¹ for the atoms of K (G is symmetric)
            let rows: Vec<Vec<Complex64>> = (0..d)
                .map(|a| Ok(ctx.solve_gram(&ctx.unit(k, a), 1e-11, 20 * ctx.len())?.0))
                .collect::<Result<_>>()?;
            let mut g = vec![Complex64::new(0.0, 0.0); d];
            let mut tail = 0.0;
            for (j, jq) in ctx.squares.iter().enumerate() {
                let keep = dist[j] < n_trunc || crate::dyadic::dtree(jq, &kq)? < n_trunc;
                for b in 0..d {
                    let mj = m[j][b];
                    if mj == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    for (a, ga) in g.iter_mut().enumerate() {
                        let w = rows[a][j * d + b].re;
                        if keep {
                            *ga += mj * w;
                        } else {
                            tail += mj.norm() * w.abs();
                        }
                    }
                }
            }
            Ok((
                k,
                g.into_iter().map(|v| v * f_coef).collect(),
                tail * f_coef.norm(),
            ))
        })
        .collect::<Result<_>>()?;
    let mut gamma = CoefficientMap::new(ctx.window);
    let mut tail: f64 = 0.0;
    for (k, g, tl) in rows {
        for (a, v) in g.into_iter().enumerate() {
            gamma.insert(ctx.squares[k], a, v)?;
        }
        tail = tail.max(tl);
    }
    Ok(GammaResult {
        gamma,
        tail,
        computed: ks.len(),
    })
}

/// Regression of `arg γ` along translates `K + k·z`, `k = 0..count`:
/// returns the fitted phase step per translate (unwrapped).
pub fn phase_step(values: &[Complex64]) -> Option<LineFit> {
    if values.len() < 2 {
        return None;
    }
    let mut ph = Vec::with_capacity(values.len());
    let mut prev = values[0].arg();
    ph.push(prev);
    for v in &values[1..] {
        let mut a = v.arg();
        while a - prev > PI {
            a -= 2.0 * PI;
        }
        while a - prev < -PI {
            a += 2.0 * PI;
        }
        ph.push(a);
        prev = a;
    }
    let xs: Vec<f64> = (0..ph.len()).map(|k| k as f64).collect();
    crate::stats::fit_line(&xs, &ph)
}

/// Max of `|S τ_z F − τ_z S F|` over an interior `m×m` lattice, where
/// `F = Σ c_{J,a} h_{J,a}` (raw atoms, levels `≥ v`) and `S` replaces each raw
/// atom of the base tree by its smooth counterpart. `z` is in normalized units.
pub fn translation_commutation_check(
    fam: &AtomFamily,
    place: &Placement,
    v: i32,
    z: [f64; 2],
    f: &BTreeMap<(DyadicSquare, usize), f64>,
    m: usize,
) -> Result<f64> {
    let scale = (v as f64).exp2();
    let steps = [z[0] * scale, z[1] * scale];
    if steps.iter().any(|k| (k - k.round()).abs() > 1e-9) {
        return Err(invalid("z", format!("{z:?} is not in 2^-{v}·Z²")));
    }
    let steps = [steps[0].round() as i64, steps[1].round() as i64];
    for (q, a) in f.keys() {
        if q.level < v || *a >= fam.dim() {
            return Err(invalid(
                "F",
                format!("atom ({q}, {a}) below level {v} or out of range"),
            ));
        }
    }
    let zp = [z[0] * place.side, z[1] * place.side];
    let shifted: Vec<(DyadicSquare, usize, f64)> = f
        .iter()
        .filter_map(|((q, a), c)| {
            let k = 1i64 << (q.level - v);
            let s = DyadicSquare {
                level: q.level,
                ix: q.ix + steps[0] * k,
                iy: q.iy + steps[1] * k,
            };
            s.in_base().then_some((s, *a, *c))
        })
        .collect();
    let sf = |p: [f64; 2], atoms: &mut dyn Iterator<Item = (DyadicSquare, usize, f64)>| -> f64 {
        atoms
            .map(|(q, a, c)| {
                c * fam.eval(&SquareGeom::from_dyadic(&q, place), a, Variant::Smooth, p)
            })
            .sum()
    };
    let r = place.rect(&DyadicSquare::ROOT.rect());
    let m = m.max(2);
    let dev = (0..m)
        .into_par_iter()
        .map(|iy| {
            let mut worst: f64 = 0.0;
            for ix in 0..m {
                let p = [
                    r.x0 + r.width() * (0.05 + 0.9 * ix as f64 / (m - 1) as f64),
                    r.y0 + r.height() * (0.05 + 0.9 * iy as f64 / (m - 1) as f64),
                ];
                let lhs = sf(p, &mut shifted.iter().copied());
                let pz = [p[0] - zp[0], p[1] - zp[1]];
                let rhs = sf(
                    pz,
                    &mut f
                        .iter()
                        .filter(|((q, _), _)| q.in_base())
                        .map(|((q, a), c)| (*q, *a, *c)),
                );
                worst = worst.max((lhs - rhs).abs());
            }
            worst
        })
        .reduce(|| 0.0, f64::max);
    Ok(dev)
}

/// Both sides of `\hat{φ_I h^η_J}(u) = e^{−iu·c_J} \hat{φ_{I_s} h^η_{J_0}}(u)`,
/// where `I_s` and `J_0` are `I` and `J` recentred at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Factorization {
    pub lhs: Complex64,
    pub rhs: Complex64,
    pub gap: f64,
}

pub fn mod_factorization_check(
    fam: &AtomFamily,
    place: &Placement,
    i: &DyadicSquare,
    j: &DyadicSquare,
    u: [f64; 2],
    a: usize,
    osc: &OscSettings,
) -> Result<Factorization> {
    if a >= fam.dim() {
        return Err(invalid("a", format!("{a} >= {}", fam.dim())));
    }
    let cj = place.center_of(j);
    if !place.square(i).contains_closed(cj) {
        return Err(invalid("J", format!("center of {j} is outside {i}")));
    }
    let phi = Father::on(i, place);
    let jg = SquareGeom::from_dyadic(j, place);
    let lhs = modulated_coefficients(fam, &phi, &jg, Variant::Smooth, u, -1.0, osc)?[a];
    let phi_s = Father::new(SquareGeom::centered([0.0, 0.0], phi.geom.side));
    let j0 = SquareGeom::centered([0.0, 0.0], jg.side);
    let r = modulated_coefficients(fam, &phi_s, &j0, Variant::Smooth, u, -1.0, osc)?[a];
    let rhs = Complex64::from_polar(1.0, -(u[0] * cj[0] + u[1] * cj[1])) * r;
    Ok(Factorization {
        lhs,
        rhs,
        gap: (lhs - rhs).norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fam(k: usize) -> AtomFamily {
        AtomFamily::new(k, 0.02).unwrap()
    }

    fn sq(l: i32, x: i64, y: i64) -> DyadicSquare {
        DyadicSquare::new(l, x, y).unwrap()
    }

    #[test]
    fn father_is_normalized_plateau_in_2i() {
        let place = Placement::new([-0.25, -0.25], 0.5).unwrap();
        let phi = Father::on(&sq(2, 1, 2), &place);
        let f = phi.field(phi.grid(16, 16));
        assert!((f.l2_norm() - 1.0).abs() < 1e-8);
        assert_eq!(phi.eval(phi.geom.center()), phi.plateau_value());
        let s = phi.support();
        let two = phi.geom.rect().dilate(2.0);
        assert!(s.x0 >= two.x0 && s.x1 <= two.x1 && s.y0 >= two.y0 && s.y1 <= two.y1);
        assert_eq!(phi.eval([s.x0 - 1e-9, phi.geom.center()[1]]), 0.0);
        assert_eq!(c_flat(), 1.0);
    }

    #[test]
    fn father_projection_is_pseudoprojection() {
        let place = Placement::default();
        let slice = crate::dyadic::separated_slice(2, (0, 0)).unwrap();
        let (i, l) = (slice.squares[0], slice.squares[3]);
        let (pi, pl) = (Father::on(&i, &place), Father::on(&l, &place));
        let grid = TensorGrid::new(
            RuleBuilder::new(-0.5, 1.5)
                .order(16)
                .max_width(0.02)
                .build(),
            RuleBuilder::new(-0.5, 1.5)
                .order(16)
                .max_width(0.02)
                .build(),
        );
        let f = SampledField2D::from_real_fn(grid, |x, y| (3.0 * x).sin() + x * y * y + 0.5);
        let p = father_projection(&f, &pi);
        let pp = father_projection(&p, &pi);
        let diff = pp.sub(&p.scale(Complex64::new(c_flat(), 0.0))).unwrap();
        assert!(diff.l2_norm() < 1e-8 * p.l2_norm());
        assert!(father_projection(&p, &pl).max_abs() == 0.0);
        let zero = father_projection(&f.scale(Complex64::new(0.0, 0.0)), &pi);
        assert_eq!(zero.max_abs(), 0.0);
        // oracle: refined separable quadrature on the support
        let fine = pi.grid(24, 32);
        let g = SampledField2D::from_real_fn(fine, |x, y| {
            ((3.0 * x).sin() + x * y * y + 0.5) * pi.eval([x, y])
        });
        let c = f.inner(&pi.field(f.grid.clone())).unwrap();
        assert!((c - g.integrate()).norm() < 1e-8);
    }

    #[test]
    fn modulate_is_unimodular_and_disjoint_pieces_add() {
        let place = Placement::default();
        let slice = crate::dyadic::separated_slice(2, (0, 0)).unwrap();
        let (q, other) = (slice.squares[0], slice.squares[3]);
        let grid = TensorGrid::new(
            RuleBuilder::new(-0.5, 1.5)
                .order(16)
                .max_width(0.01)
                .build(),
            RuleBuilder::new(-0.5, 1.5)
                .order(16)
                .max_width(0.01)
                .build(),
        );
        let f = SampledField2D::from_real_fn(grid.clone(), |x, y| 1.0 + x - y);
        let pieces: BTreeMap<_, _> = [q, other]
            .iter()
            .map(|s| (*s, father_projection(&f, &Father::on(s, &place))))
            .collect();
        let zero = ModulationSequence::zero(2, &[q, other]);
        let same = modulate(&pieces, &zero).unwrap();
        let mut sum = pieces[&q].clone();
        sum.add_assign(&pieces[&other]).unwrap();
        assert!(same.sub(&sum).unwrap().max_abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = ModulationSequence::sample(2, 2, &[q, other], 4.0, &mut rng).unwrap();
        let single: BTreeMap<_, _> = [(q, pieces[&q].clone())].into_iter().collect();
        let m = modulate(&single, &u).unwrap();
        for (a, b) in m.values.iter().zip(&pieces[&q].values) {
            assert!((a.norm() - b.norm()).abs() < 1e-14);
        }
        let both = modulate(&pieces, &u).unwrap();
        let want = pieces[&q].l2_norm().hypot(pieces[&other].l2_norm());
        assert!((both.l2_norm() - want).abs() < 1e-8 * want);
        let wrong = ModulationSequence::zero(1, &[sq(1, 0, 0)]);
        assert!(matches!(
            modulate(&pieces, &wrong),
            Err(Error::LevelMismatch(_))
        ));
    }

    #[test]
    fn modulation_sequence_window() {
        let q = sq(2, 0, 0);
        let bad: BTreeMap<_, _> = [(q, [3.0, 0.0])].into_iter().collect();
        assert!(ModulationSequence::new(2, 2, bad).is_err());
        let ok: BTreeMap<_, _> = [(q, [0.0, 16.0])].into_iter().collect();
        let u = ModulationSequence::new(2, 2, ok).unwrap();
        assert_eq!(u.u[&q][2], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let qs = sq(0, 0, 0).descendants(2);
        let s = ModulationSequence::sample(2, 2, &qs, 10.0, &mut rng).unwrap();
        for v in s.u.values() {
            let m = v[0].hypot(v[1]);
            assert!((16.0 * (1.0 - 1e-12)..=16384.0 * (1.0 + 1e-12)).contains(&m));
            assert_eq!(v[2], 0.0);
        }
    }

    fn oracle(fam: &AtomFamily, phi: &Father, j: &SquareGeom, a: usize, u: [f64; 2]) -> Complex64 {
        let ov = phi.support().intersection(&j.smooth_support(fam.eta()));
        if ov.is_empty() {
            return Complex64::new(0.0, 0.0);
        }
        let rho = 0.25 * fam.eta() * j.side;
        let r = |lo: f64, hi: f64, ax: Axis, f0: f64| {
            let mut b = RuleBuilder::new(lo, hi)
                .order(20)
                .max_width(j.side * 0.02)
                .band_panels(12);
            for p in ax.breaks() {
                b.band(p - rho, p + rho);
            }
            for p in [
                f0 - RAMP * phi.geom.side,
                f0,
                f0 + phi.geom.side,
                f0 + (1.0 + RAMP) * phi.geom.side,
            ] {
                b.breakpoint(p);
            }
            b.build()
        };
        let grid = TensorGrid::new(
            r(ov.x0, ov.x1, j.axis_x(), phi.geom.x0),
            r(ov.y0, ov.y1, j.axis_y(), phi.geom.y0),
        );
        SampledField2D::from_fn(grid, |x, y| {
            Complex64::from_polar(
                phi.eval([x, y]) * fam.eval(j, a, Variant::Smooth, [x, y]),
                u[0] * x + u[1] * y,
            )
        })
        .integrate()
    }

    #[test]
    fn modulated_coefficient_matches_direct_quadrature() {
        let f = fam(2);
        let place = Placement::default();
        let i = sq(2, 1, 1);
        let phi = Father::on(&i, &place);
        let osc = OscSettings::default();
        for (j, u) in [
            (sq(3, 3, 2), [20.0, -9.0]),
            (sq(2, 1, 1), [0.0, 0.0]),
            (sq(3, 1, 2), [-60.0, 35.0]),
        ] {
            let jg = SquareGeom::from_dyadic(&j, &place);
            let c = modulated_coefficient(&f, &place, &i, &j, u, &osc).unwrap();
            for a in [0, 4, 8] {
                let o = oracle(&f, &phi, &jg, a, u);
                assert!((c[a] - o).norm() < 1e-9, "{j} {a}: {} vs {}", c[a], o);
                // |⟨M_u φ, h⟩| ≤ ‖φ‖_∞ ‖h‖_1 ≤ ‖φ‖_∞ |supp h|^{1/2}
                let bound = phi.plateau_value() * jg.smooth_support(f.eta()).area().sqrt();
                assert!(c[a].norm() <= bound);
            }
        }
        let far = modulated_coefficient(&f, &place, &sq(3, 0, 0), &sq(3, 7, 7), [30.0, 0.0], &osc)
            .unwrap();
        assert!(far.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
        let coarse = OscSettings {
            points_per_wavelength: 6.0,
            ..osc
        };
        assert!(matches!(
            modulated_coefficient(&f, &place, &i, &sq(3, 3, 2), [50.0, 0.0], &coarse),
            Err(Error::UnderResolved { .. })
        ));
    }

    #[test]
    fn zero_frequency_coefficient_is_small_inside_plateau() {
        // φ_I is constant on the support of h^η_J for J deep inside I
        let f = fam(3);
        let place = Placement::default();
        let c = modulated_coefficient(
            &f,
            &place,
            &sq(1, 0, 0),
            &sq(3, 1, 1),
            [0.0, 0.0],
            &OscSettings::default(),
        )
        .unwrap();
        assert!(c.iter().all(|z| z.norm() < 1e-12), "{c:?}");
    }

    #[test]
    fn scales_scan_fine_regime_decays_like_kappa_plus_one() {
        let f = fam(3);
        let place = Placement::default();
        let i = sq(2, 1, 2);
        let th: f64 = 0.3;
        let scan = scales_decay_scan(
            &f,
            &place,
            &i,
            [16.0 * th.cos(), 16.0 * th.sin()],
            (-3, 8),
            &OscSettings::default(),
        )
        .unwrap();
        let total: f64 = scan.level_mass.iter().map(|(_, m)| m).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(scan.fine_rate().unwrap() >= 3.5, "{:?}", scan.fine_rate());
        assert!(scan.entries.iter().any(|e| e.square.level == -3));
        // with |u| = 2π·2^{2s} the mass sits within two levels of 2s
        let k = 2.0 * PI * 16.0;
        let hi = scales_decay_scan(
            &f,
            &place,
            &i,
            [k * th.cos(), k * th.sin()],
            (-3, 8),
            &OscSettings::default(),
        )
        .unwrap();
        assert!(hi.concentration(2) > 0.95, "{}", hi.profile_csv());
        assert!(
            scales_decay_scan(&f, &place, &i, [1.0, 0.0], (0, 4), &OscSettings::default()).is_err()
        );
    }

    #[test]
    fn dtree_to_inner_grid() {
        let i = sq(2, 1, 2);
        assert_eq!(dtree_to_descendants(&sq(4, 5, 9), &i, 4).unwrap(), 0);
        assert_eq!(dtree_to_descendants(&sq(6, 20, 36), &i, 4).unwrap(), 2);
        assert_eq!(dtree_to_descendants(&i, &i, 4).unwrap(), 2);
        assert_eq!(dtree_to_descendants(&sq(0, 0, 0), &i, 4).unwrap(), 4);
        assert_eq!(dtree_to_descendants(&sq(2, 0, 2), &i, 4).unwrap(), 4);
        let slice = crate::dyadic::GridSlice::within(&i, 4);
        for j in sq(0, 0, 0).descendants(5).iter().step_by(37) {
            assert_eq!(
                dtree_to_descendants(j, &i, 4).unwrap(),
                crate::dyadic::dtree_to_slice(j, &slice).unwrap()
            );
        }
    }

    fn unit_weights(d: usize) -> Vec<f64> {
        let mut w = vec![0.0; d];
        w[0] = 1.0;
        w
    }

    fn kakeya(seed: u64) -> KakeyaPolynomial {
        let f = fam(2);
        let place = Placement::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outer: Vec<DyadicSquare> = sq(0, 0, 0).descendants(1);
        let u = ModulationSequence::sample(1, 1, &outer, 2.0, &mut rng).unwrap();
        let b = outer
            .iter()
            .map(|q| {
                (
                    *q,
                    Complex64::new(rng.gen_range(0.5..1.5), rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        KakeyaPolynomial::build(f.clone(), place, b, u, unit_weights(f.dim()), 8).unwrap()
    }

    #[test]
    fn kakeya_coefficients_follow_canonical_modulation() {
        let k = kakeya(5);
        assert_eq!(k.t, 2);
        assert!(k.scale_factor > 0.0);
        let sup = k.sampled_sup(8);
        assert!(sup > 0.5 && sup <= 1.0, "{sup}");
        let mut n = 0;
        for (j, c) in k.inner_squares() {
            let i = j.ancestor(1).unwrap();
            let u = k.u.get(&i).unwrap();
            let cj = j.center();
            let want = k.b[&i]
                * Complex64::new(
                    (cj[0] * u[0] + cj[1] * u[1]).cos(),
                    (cj[0] * u[0] + cj[1] * u[1]).sin(),
                );
            assert!((c - want).norm() <= 1e-15 * want.norm());
            assert!((c.norm() - k.b[&i].norm()).abs() < 1e-14);
            n += 1;
        }
        assert_eq!(n, 16);
        // pointwise synthesis against a direct atom sum
        let p = [0.37, 0.61];
        let direct: Complex64 = k
            .inner_squares()
            .iter()
            .map(|(j, c)| {
                c * k
                    .fam
                    .eval(&SquareGeom::from_dyadic(j, &k.place), 0, Variant::Smooth, p)
            })
            .sum();
        assert!((k.eval(p) - direct).norm() < 1e-13);
    }

    #[test]
    fn kakeya_unit_modulation_and_errors() {
        let f = fam(1);
        let i = sq(1, 1, 0);
        let b: BTreeMap<_, _> = [(i, Complex64::new(1.0, 0.0))].into_iter().collect();
        let u = ModulationSequence::zero(1, &[i]);
        let k = KakeyaPolynomial::build(
            f.clone(),
            Placement::default(),
            b,
            u.clone(),
            unit_weights(f.dim()),
            8,
        )
        .unwrap();
        let cs: Vec<Complex64> = k.inner_squares().into_iter().map(|(_, c)| c).collect();
        assert!(cs.iter().all(|c| *c == cs[0]));
        let zero: BTreeMap<_, _> = [(i, Complex64::new(0.0, 0.0))].into_iter().collect();
        assert!(KakeyaPolynomial::build(
            f.clone(),
            Placement::default(),
            zero,
            u,
            unit_weights(f.dim()),
            8
        )
        .is_err());
    }

    #[test]
    fn martingale_transform_is_an_involution() {
        let k = kakeya(11);
        let plus: BTreeMap<_, _> = k.b.keys().map(|q| (*q, 1i8)).collect();
        let same = k.martingale_transform(&plus).unwrap();
        assert_eq!(same.b, k.b);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let signs: BTreeMap<_, _> =
            k.b.keys()
                .map(|q| (*q, if rng.gen::<bool>() { 1 } else { -1 }))
                .collect();
        let m = k.martingale_transform(&signs).unwrap();
        let back = m.martingale_transform(&signs).unwrap();
        assert_eq!(back.b, k.b);
        assert!(back.signs.unwrap().values().all(|s| *s == 1));
        for (j, c) in m.inner_squares() {
            let i = j.ancestor(1).unwrap();
            assert_eq!(c, k.inner_coefficient(&j) * signs[&i] as f64);
        }
        let mut short = signs.clone();
        short.pop_first();
        assert!(k.martingale_transform(&short).is_err());
        // sup of M_± f is bounded by the sum of the per-square sups
        let per: f64 =
            k.b.keys()
                .map(|q| {
                    let mut single = k.clone();
                    single.b.retain(|r, _| r == q);
                    single.sampled_sup(8)
                })
                .sum();
        assert!(m.sampled_sup(8) <= per + 1e-12);
    }

    #[test]
    fn martingale_values_are_symmetric_in_distribution() {
        // E[M_± f(x)] = 0 and E|M_± f(x)|² = Σ_I |f_I(x)|²
        let k = kakeya(17);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = [[0.3, 0.3], [0.55, 0.45], [0.8, 0.2]];
        let trials = 400;
        for p in pts {
            let parts: Vec<Complex64> =
                k.b.keys()
                    .map(|q| {
                        let mut single = k.clone();
                        single.b.retain(|r, _| r == q);
                        single.eval(p)
                    })
                    .collect();
            let energy: f64 = parts.iter().map(|z| z.norm_sqr()).sum();
            let mut mean = Complex64::new(0.0, 0.0);
            let mut second = 0.0;
            for _ in 0..trials {
                let signs: BTreeMap<_, _> =
                    k.b.keys()
                        .map(|q| (*q, if rng.gen::<bool>() { 1 } else { -1 }))
                        .collect();
                let v = k.martingale_transform(&signs).unwrap().eval(p);
                mean += v;
                second += v.norm_sqr();
            }
            mean /= trials as f64;
            second /= trials as f64;
            assert!(mean.norm() < 4.0 * (energy / trials as f64).sqrt() + 1e-12);
            assert!((second - energy).abs() < 0.25 * energy + 1e-12);
        }
    }

    #[test]
    fn gamma_is_phase_covariant_under_lattice_translation() {
        let ctx = FrameContext::new(
            fam(2),
            Placement::default(),
            crate::frame::Window::new(0, 4).unwrap(),
        )
        .unwrap();
        let i = sq(2, 1, 1);
        let u = [16.0 * 0.3f64.cos(), 16.0 * 0.3f64.sin()];
        let osc = OscSettings::default();
        let zero = gamma_coefficients(&ctx, &i, u, Complex64::new(0.0, 0.0), 2, &osc).unwrap();
        assert_eq!(zero.gamma.max_abs(), 0.0);
        let r = gamma_coefficients(&ctx, &i, u, Complex64::new(1.0, 0.0), 2, &osc).unwrap();
        assert!(r.tail.is_finite() && r.computed > 0);
        // K, K+z, K+2z, K+3z inside the plateau of φ_I, z = 2^{-4}·e₁
        let z = 1.0 / 16.0;
        for iy in 4..8 {
            let vals: Vec<Complex64> = (4..8).map(|ix| r.gamma.get(&sq(4, ix, iy), 0)).collect();
            let step = phase_step(&vals).unwrap().slope;
            assert!((step - u[0] * z).abs() < 0.05 * (u[0] * z).abs(), "{step}");
            let m0 = vals[0].norm();
            assert!(vals.iter().all(|v| (v.norm() - m0).abs() < 0.05 * m0));
        }
    }

    #[test]
    fn smoothing_commutes_with_lattice_translation() {
        let f = fam(2);
        let place = Placement::default();
        let atom: BTreeMap<_, _> = [((sq(3, 2, 3), 4), 1.0)].into_iter().collect();
        assert_eq!(
            translation_commutation_check(&f, &place, 3, [0.0, 0.0], &atom, 40).unwrap(),
            0.0
        );
        let d = translation_commutation_check(&f, &place, 3, [0.125, 0.0], &atom, 40).unwrap();
        assert!(d < 1e-8, "{d}");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let many: BTreeMap<_, _> = sq(2, 1, 1)
            .descendants(4)
            .into_iter()
            .flat_map(|q| (0..f.dim()).map(move |a| (q, a)))
            .map(|k| (k, rng.gen_range(-1.0..1.0)))
            .collect();
        let d = translation_commutation_check(&f, &place, 2, [0.25, -0.25], &many, 40).unwrap();
        assert!(d < 1e-8, "{d}");
        assert!(translation_commutation_check(&f, &place, 3, [0.1, 0.0], &atom, 40).is_err());
        // shifting out of the tree drops atoms: reported, not asserted
        let edge: BTreeMap<_, _> = [((sq(3, 7, 3), 0), 1.0)].into_iter().collect();
        let d = translation_commutation_check(&f, &place, 3, [0.125, 0.0], &edge, 40).unwrap();
        assert!(d.is_finite());
    }

    #[test]
    fn factorization_is_exact_inside_the_plateau() {
        let f = fam(3);
        let place = Placement::new([-0.25, -0.25], 0.5).unwrap();
        let osc = OscSettings::default();
        let i = sq(1, 0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for j in i.descendants(3).iter().filter(|j| {
            let r = place.square(j).dilate(1.02);
            r.inside_open(&place.square(&i))
        }) {
            let th: f64 = rng.gen_range(0.0..2.0 * PI);
            let m = rng.gen_range(16.0..64.0);
            let u = [m * th.cos(), m * th.sin()];
            let a = rng.gen_range(0..f.dim());
            let r = mod_factorization_check(&f, &place, &i, j, u, a, &osc).unwrap();
            assert!(r.gap < 1e-8 * r.lhs.norm().max(1e-3), "{j}: {r:?}");
            let z = mod_factorization_check(&f, &place, &i, j, [0.0, 0.0], a, &osc).unwrap();
            assert!(z.gap < 1e-10);
        }
        assert!(
            mod_factorization_check(&f, &place, &i, &sq(3, 0, 0), [1.0, 0.0], 0, &osc).is_err()
        );
        // J straddling the plateau edge: reported only
        let edge =
            mod_factorization_check(&f, &place, &i, &sq(2, 0, 2), [20.0, 5.0], 0, &osc).unwrap();
        assert!(edge.gap.is_finite());
    }
}
