//! Fourier extension from the paraboloid, `L^q` norms on balls, and the
//! square functions of modulated pieces and Kakeya-type polynomials.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::alpert::{profiles, Axis, SquareGeom, Variant, MOLLIFIER_HALF_WIDTH};
use crate::dyadic::DyadicSquare;
use crate::error::{invalid, Error, Result};
use crate::modulation::{KakeyaPolynomial, ModulationSequence};
use crate::quad::{pairwise_sum, Rule1D, RuleBuilder, SampledField2D};

/// Minimum source points per phase wavelength.
pub const MIN_SOURCE_POINTS_PER_WAVELENGTH: f64 = 8.0;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Lattice `h·ℤ³ ∩ B(0, R)` with Riemann weights `h³`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    pub radius: f64,
    pub spacing: f64,
    /// Lattice half-width: axis values are `h·k`, `|k| ≤ m`.
    pub m: i64,
    /// Lattice indices `(k₁, k₂, k₃)` of the points, ordered by `k₃`, then `k₂`, then `k₁`.
    pub index: Vec<[i64; 3]>,
}

impl FrequencyGrid {
    pub fn new(radius: f64, spacing: f64) -> Result<Arc<Self>> {
        if !(spacing > 0.0 && spacing <= 1.0) {
            return Err(invalid("spacing", "must lie in (0, 1]"));
        }
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(invalid("radius", "must be finite and non-negative"));
        }
        let m = (radius / spacing).floor() as i64;
        let r2 = (radius / spacing).powi(2) * (1.0 + 1e-12);
        let mut index = Vec::new();
        for k3 in -m..=m {
            for k2 in -m..=m {
                for k1 in -m..=m {
                    if ((k1 * k1 + k2 * k2 + k3 * k3) as f64) <= r2 {
                        index.push([k1, k2, k3]);
                    }
                }
            }
        }
        Ok(Arc::new(Self {
            radius,
            spacing,
            m,
            index,
        }))
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let k = self.index[i];
        [
            k[0] as f64 * self.spacing,
            k[1] as f64 * self.spacing,
            k[2] as f64 * self.spacing,
        ]
    }

    pub fn weight(&self) -> f64 {
        self.spacing.powi(3)
    }

    /// Axis values `h·k`, `k = −m..=m`.
    pub fn axis(&self) -> Vec<f64> {
        (-self.m..=self.m)
            .map(|k| k as f64 * self.spacing)
            .collect()
    }

    fn slot(&self, k: i64) -> usize {
        (k + self.m) as usize
    }
}

/// Values of an extension on a frequency grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtensionField {
    pub grid: Arc<FrequencyGrid>,
    pub values: Vec<Complex64>,
}

impl ExtensionField {
    pub fn zeros(grid: Arc<FrequencyGrid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![ZERO; n],
        }
    }

    fn check(&self, o: &Self) -> Result<()> {
        if !Arc::ptr_eq(&self.grid, &o.grid) && *self.grid != *o.grid {
            return Err(invalid("grid", "extension fields live on different grids"));
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, c: Complex64, o: &Self) -> Result<()> {
        self.check(o)?;
        for (a, b) in self.values.iter_mut().zip(&o.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn abs(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("xi1,xi2,xi3,re,im\n");
        for (i, v) in self.values.iter().enumerate() {
            let p = self.grid.point(i);
            s.push_str(&format!(
                "{},{},{},{:.9e},{:.9e}\n",
                p[0], p[1], p[2], v.re, v.im
            ));
        }
        s
    }
}

/// `(Σ_{|ξ| ≤ r} h³ |F(ξ)|^q)^{1/q}` for a non-negative sampled function; `q < 1` gives the quasi-norm.
pub fn lq_norm_values(grid: &FrequencyGrid, values: &[f64], q: f64, r: f64) -> Result<f64> {
    if !(q > 0.0 && q.is_finite()) {
        return Err(invalid("q", "must be positive"));
    }
    if r > grid.radius * (1.0 + 1e-12) {
        return Err(invalid(
            "R",
            format!("{r} exceeds grid radius {}", grid.radius),
        ));
    }
    if values.len() != grid.len() {
        return Err(invalid("values", "length does not match the grid"));
    }
    let r2 = r * r * (1.0 + 1e-12);
    let terms: Vec<f64> = (0..grid.len())
        .map(|i| {
            let p = grid.point(i);
            if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= r2 {
                values[i].powf(q)
            } else {
                0.0
            }
        })
        .collect();
    Ok((grid.weight() * pairwise_sum(&terms)).powf(1.0 / q))
}

/// `‖F‖_{L^q(B(0,r))}` on the grid.
pub fn lq_norm_ball(f: &ExtensionField, q: f64, r: f64) -> Result<f64> {
    lq_norm_values(&f.grid, &f.abs(), q, r)
}

/// `‖F₁F₂F₃‖_{L^{q/3}(B(0,r))}`.
pub fn trilinear_norm(f: [&ExtensionField; 3], q: f64, r: f64) -> Result<f64> {
    f[0].check(f[1])?;
    f[0].check(f[2])?;
    let p: Vec<f64> = (0..f[0].values.len())
        .map(|i| f[0].values[i].norm() * f[1].values[i].norm() * f[2].values[i].norm())
        .collect();
    lq_norm_values(&f[0].grid, &p, q / 3.0, r)
}

/// Non-negative function on a frequency grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RealField {
    pub grid: Arc<FrequencyGrid>,
    pub values: Vec<f64>,
}

impl RealField {
    pub fn lq_norm(&self, q: f64, r: f64) -> Result<f64> {
        lq_norm_values(&self.grid, &self.values, q, r)
    }
}

/// Largest `|∂ₓ(Φ(x)·ξ − u·x)|` over `|ξ| ≤ R` and `|x| ≤ xmax` along one axis.
fn max_phase_rate(radius: f64, xmax: f64, u: f64) -> f64 {
    radius * (1.0 + 4.0 * xmax * xmax).sqrt() + u.abs()
}

fn check_source(rule: &Rule1D, radius: f64, u: f64) -> Result<()> {
    let xmax = rule.nodes.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let rate = max_phase_rate(radius, xmax, u);
    if rate == 0.0 {
        return Ok(());
    }
    let need = 2.0 * PI / rate / MIN_SOURCE_POINTS_PER_WAVELENGTH;
    let have = rule.max_spacing();
    if have > need {
        let span = rule.nodes.last().unwrap_or(&0.0) - rule.nodes.first().unwrap_or(&0.0);
        return Err(Error::UnderResolved {
            what: "extension source grid".into(),
            required: format!(
                "node spacing <= {need:.3e} (at least {} nodes per axis)",
                (span / need).ceil()
            ),
        });
    }
    Ok(())
}

/// Per-node factors `w(x)·e^{−i(x ξ_a + x² ξ₃ − u x)}` for one axis and one `ξ₃`.
fn axis_factors(
    rule: &Rule1D,
    axis: &[f64],
    xi3: f64,
    u: f64,
    k: std::ops::RangeInclusive<usize>,
) -> Vec<Vec<Complex64>> {
    axis[k]
        .iter()
        .map(|&xa| {
            rule.nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&x, &w)| Complex64::from_polar(w, -(x * xa + x * x * xi3 - u * x)))
                .collect()
        })
        .collect()
}

/// `∫ e^{−iΦ(x)·ξ} e^{iu·x} f(x) dx` at every grid point, by the tensor rule of `f`.
pub fn fourier_extension_modulated(
    f: &SampledField2D,
    u: [f64; 2],
    grid: &Arc<FrequencyGrid>,
) -> Result<ExtensionField> {
    let g = &f.grid;
    for (i, v) in f.values.iter().enumerate() {
        let p = g.point(i);
        if *v != ZERO && p[0].hypot(p[1]) > 0.5 + 1e-12 {
            return Err(invalid("f", "support must lie in B(0, 1/2)"));
        }
    }
    check_source(&g.x, grid.radius, u[0])?;
    check_source(&g.y, grid.radius, u[1])?;
    let (nx, ny) = (g.x.nodes.len(), g.y.nodes.len());
    let axis = grid.axis();
    let m = grid.m;
    let r2 = (grid.radius / grid.spacing).powi(2) * (1.0 + 1e-12);
    let planes: Vec<Vec<Complex64>> = (-m..=m)
        .into_par_iter()
        .map(|k3| {
            let rest = r2 - (k3 * k3) as f64;
            if rest < 0.0 {
                return Vec::new();
            }
            let mk = (rest.sqrt().floor() as i64).min(m);
            let xi3 = k3 as f64 * grid.spacing;
            let range = grid.slot(-mk)..=grid.slot(mk);
            let a = axis_factors(&g.x, &axis, xi3, u[0], range.clone());
            let b = axis_factors(&g.y, &axis, xi3, u[1], range);
            // t[k1][iy] = Σ_ix a[k1][ix] f[iy][ix]
            let t: Vec<Vec<Complex64>> = a
                .iter()
                .map(|ak| {
                    (0..ny)
                        .map(|iy| {
                            let row = &f.values[iy * nx..(iy + 1) * nx];
                            ak.iter().zip(row).map(|(x, y)| x * y).sum()
                        })
                        .collect()
                })
                .collect();
            let mut out = Vec::new();
            for k2 in -mk..=mk {
                for k1 in -mk..=mk {
                    if ((k1 * k1 + k2 * k2 + k3 * k3) as f64) <= r2 {
                        let tk = &t[(k1 + mk) as usize];
                        let bk = &b[(k2 + mk) as usize];
                        out.push(tk.iter().zip(bk).map(|(x, y)| x * y).sum());
                    }
                }
            }
            out
        })
        .collect();
    let values: Vec<Complex64> = planes.into_iter().flatten().collect();
    debug_assert_eq!(values.len(), grid.len());
    Ok(ExtensionField {
        grid: grid.clone(),
        values,
    })
}

/// `𝓔f(ξ) = ∫_U e^{−iΦ(x)·ξ} f(x) dx` on the grid.
pub fn fourier_extension(f: &SampledField2D, grid: &Arc<FrequencyGrid>) -> Result<ExtensionField> {
    fourier_extension_modulated(f, [0.0, 0.0], grid)
}

/// `∫ e^{−iΦ(x)·ξ} e^{iu·x} f(x) dx` at a single frequency.
pub fn extension_at(f: &SampledField2D, xi: [f64; 3], u: [f64; 2]) -> Complex64 {
    let g = &f.grid;
    let vals: Vec<Complex64> = (0..g.len())
        .map(|i| {
            let p = g.point(i);
            let ph =
                p[0] * (xi[0] - u[0]) + p[1] * (xi[1] - u[1]) + (p[0] * p[0] + p[1] * p[1]) * xi[2];
            f.values[i] * Complex64::from_polar(g.weight(i), -ph)
        })
        .collect();
    let re: Vec<f64> = vals.iter().map(|v| v.re).collect();
    let im: Vec<f64> = vals.iter().map(|v| v.im).collect();
    Complex64::new(pairwise_sum(&re), pairwise_sum(&im))
}

/// Resolution of the 1D profile integrals in the atomic path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AtomicSettings {
    pub points_per_wavelength: f64,
    pub order: usize,
    pub band_panels: usize,
}

impl Default for AtomicSettings {
    fn default() -> Self {
        Self {
            points_per_wavelength: 16.0,
            order: 16,
            band_panels: 4,
        }
    }
}

/// `∫ e^{−i(x ξ_a + x² ξ₃)} F_k(x) dx` for every profile `k` and every
/// `(ξ_a, ξ₃)` on the lattice axis; indexed `[(slot_a·(2m+1) + slot_3)·n + k]`.
fn profile_transforms(
    fam: &crate::alpert::AtomFamily,
    axis: &Axis,
    variant: Variant,
    grid: &FrequencyGrid,
    set: &AtomicSettings,
) -> Result<Vec<Complex64>> {
    if set.points_per_wavelength < MIN_SOURCE_POINTS_PER_WAVELENGTH {
        return Err(Error::UnderResolved {
            what: "atomic extension".into(),
            required: format!("at least {MIN_SOURCE_POINTS_PER_WAVELENGTH} points per wavelength"),
        });
    }
    let n = fam.n();
    let rho = match variant {
        Variant::Raw => 0.0,
        Variant::Smooth => MOLLIFIER_HALF_WIDTH * fam.eta() * axis.side,
    };
    let (lo, hi) = (axis.lo - rho, axis.hi() + rho);
    let rate = max_phase_rate(grid.radius, lo.abs().max(hi.abs()), 0.0);
    let width = if rate > 0.0 {
        set.order as f64 * 2.0 * PI / rate / set.points_per_wavelength
    } else {
        f64::INFINITY
    };
    let mut rb = RuleBuilder::new(lo, hi)
        .order(set.order)
        .max_width(width)
        .band_panels(set.band_panels);
    for p in axis.breaks() {
        if rho > 0.0 {
            rb.band(p - rho, p + rho);
        } else {
            rb.breakpoint(p);
        }
    }
    let rule = rb.build();
    let mut prof = vec![0.0; rule.nodes.len() * n];
    for (i, &x) in rule.nodes.iter().enumerate() {
        profiles(
            axis,
            variant,
            fam.kappa(),
            &fam.moll,
            x,
            &mut prof[i * n..(i + 1) * n],
        );
        for v in &mut prof[i * n..(i + 1) * n] {
            *v *= rule.weights[i];
        }
    }
    let ax = grid.axis();
    let w = ax.len();
    let out: Vec<Vec<Complex64>> = (0..w * w)
        .into_par_iter()
        .map(|s| {
            let (xa, x3) = (ax[s / w], ax[s % w]);
            let mut acc = vec![ZERO; n];
            for (i, &x) in rule.nodes.iter().enumerate() {
                let e = Complex64::from_polar(1.0, -(x * xa + x * x * x3));
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += e * prof[i * n + k];
                }
            }
            acc
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

/// Extension of `Σ_J c_J ℓ_J⁻¹ F^J(x₁)ᵀ M F^J(x₂)` (one separable matrix `M`
/// shared by all squares), from 1D profile transforms.
pub fn extension_of_atoms(
    fam: &crate::alpert::AtomFamily,
    terms: &[(SquareGeom, Complex64)],
    matrix: &[f64],
    variant: Variant,
    grid: &Arc<FrequencyGrid>,
    set: &AtomicSettings,
) -> Result<ExtensionField> {
    let n = fam.n();
    if matrix.len() != n * n {
        return Err(invalid("matrix", format!("expected {n}×{n}")));
    }
    for (g, _) in terms {
        let r = g.smooth_support(fam.eta());
        let far = [r.x0.abs().max(r.x1.abs()), r.y0.abs().max(r.y1.abs())];
        if far[0].hypot(far[1]) > 0.5 + 1e-12 {
            return Err(invalid("terms", "support must lie in B(0, 1/2)"));
        }
    }
    let key = |a: &Axis| (a.lo.to_bits(), a.side.to_bits());
    let mut xs: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let mut ys: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let mut xa = Vec::new();
    let mut ya = Vec::new();
    let mut refs = Vec::with_capacity(terms.len());
    for (g, c) in terms {
        if *c == ZERO {
            continue;
        }
        let (ax, ay) = (g.axis_x(), g.axis_y());
        let ix = *xs.entry(key(&ax)).or_insert_with(|| {
            xa.push(ax);
            xa.len() - 1
        });
        let iy = *ys.entry(key(&ay)).or_insert_with(|| {
            ya.push(ay);
            ya.len() - 1
        });
        refs.push((ix, iy, c / g.side));
    }
    let xt: Vec<Vec<Complex64>> = xa
        .iter()
        .map(|a| profile_transforms(fam, a, variant, grid, set))
        .collect::<Result<_>>()?;
    let yt: Vec<Vec<Complex64>> = ya
        .iter()
        .map(|a| profile_transforms(fam, a, variant, grid, set))
        .collect::<Result<_>>()?;
    // fold M into the x transforms: (X M)_j = Σ_i X_i M[i,j]
    let xm: Vec<Vec<Complex64>> = xt
        .par_iter()
        .map(|x| {
            x.chunks(n)
                .flat_map(|v| {
                    (0..n).map(move |j| (0..n).map(|i| v[i] * matrix[i * n + j]).sum::<Complex64>())
                })
                .collect()
        })
        .collect();
    let w = (2 * grid.m + 1) as usize;
    let values: Vec<Complex64> = (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let k = grid.index[p];
            let (s1, s2, s3) = (grid.slot(k[0]), grid.slot(k[1]), grid.slot(k[2]));
            let (ox, oy) = ((s1 * w + s3) * n, (s2 * w + s3) * n);
            let mut acc = ZERO;
            for &(ix, iy, c) in &refs {
                let a = &xm[ix][ox..ox + n];
                let b = &yt[iy][oy..oy + n];
                let v: Complex64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                acc += c * v;
            }
            acc
        })
        .collect();
    Ok(ExtensionField {
        grid: grid.clone(),
        values,
    })
}

/// `𝓔(b_I Σ_{J ∈ 𝒢_t[I]} e^{i c_J·u_I} h^η_J)` for every outer square `I`.
pub fn kakeya_blocks(
    f: &KakeyaPolynomial,
    grid: &Arc<FrequencyGrid>,
    set: &AtomicSettings,
) -> Result<Vec<(DyadicSquare, ExtensionField)>> {
    f.b.keys()
        .map(|i| {
            let terms: Vec<(SquareGeom, Complex64)> = i
                .descendants(f.t)
                .iter()
                .map(|j| (SquareGeom::from_dyadic(j, &f.place), f.inner_coefficient(j)))
                .collect();
            Ok((
                *i,
                extension_of_atoms(&f.fam, &terms, f.matrix(), Variant::Smooth, grid, set)?,
            ))
        })
        .collect()
}

/// `𝓔f` of a Kakeya-type polynomial as the sum of its blocks.
pub fn kakeya_extension(
    f: &KakeyaPolynomial,
    grid: &Arc<FrequencyGrid>,
    set: &AtomicSettings,
) -> Result<ExtensionField> {
    let mut out = ExtensionField::zeros(grid.clone());
    for (_, b) in kakeya_blocks(f, grid, set)? {
        out.add_scaled(Complex64::new(1.0, 0.0), &b)?;
    }
    Ok(out)
}

/// `(Σ_k |F_k|²)^{1/2}` pointwise.
pub fn l2_aggregate<'a>(
    grid: &Arc<FrequencyGrid>,
    fields: impl IntoIterator<Item = &'a ExtensionField>,
) -> Result<RealField> {
    let mut acc = vec![0.0; grid.len()];
    for f in fields {
        if f.values.len() != acc.len() {
            return Err(invalid("fields", "length does not match the grid"));
        }
        for (a, v) in acc.iter_mut().zip(&f.values) {
            *a += v.norm_sqr();
        }
    }
    Ok(RealField {
        grid: grid.clone(),
        values: acc.into_iter().map(f64::sqrt).collect(),
    })
}

/// `(Σ_I |(M_u Φ_* △^φ_I f)^∧(ξ)|²)^{1/2}`: each piece is modulated by `u_I` and extended.
pub fn fourier_square_function(
    pieces: &BTreeMap<DyadicSquare, SampledField2D>,
    u: &ModulationSequence,
    grid: &Arc<FrequencyGrid>,
) -> Result<RealField> {
    let fields: Vec<ExtensionField> = pieces
        .iter()
        .map(|(q, f)| {
            if q.level != u.level {
                return Err(Error::LevelMismatch(format!(
                    "piece {q} vs sequence level {}",
                    u.level
                )));
            }
            let v = u
                .get(q)
                .ok_or_else(|| invalid("u", format!("no modulation for {q}")))?;
            fourier_extension_modulated(f, v, grid)
        })
        .collect::<Result<_>>()?;
    l2_aggregate(grid, &fields)
}

/// `(Σ_I |b_I 𝓔(Σ_J e^{i c_J·u_I} h^η_J)|²)^{1/2}` from precomputed blocks.
pub fn kakeya_square_function(
    grid: &Arc<FrequencyGrid>,
    blocks: &[(DyadicSquare, ExtensionField)],
) -> Result<RealField> {
    l2_aggregate(grid, blocks.iter().map(|(_, b)| b))
}

/// Monte-Carlo Khintchine comparison for three Kakeya-type polynomials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KhintchineReport {
    pub mc_mean: f64,
    pub mc_std_error: f64,
    pub square_fn_value: f64,
    pub ratio: f64,
    pub samples: usize,
}

/// `𝔼‖𝓔M_±f₁·𝓔M_±f₂·𝓔M_±f₃‖_{L^{q/3}(B(0,r))}` over independent signs, against
/// `‖𝒮f₁·𝒮f₂·𝒮f₃‖_{L^{q/3}(B(0,r))}`; blocks from [`kakeya_blocks`].
pub fn khintchine_trilinear(
    blocks: [&[(DyadicSquare, ExtensionField)]; 3],
    grid: &Arc<FrequencyGrid>,
    q: f64,
    r: f64,
    n_samples: usize,
    seed: u64,
) -> Result<KhintchineReport> {
    if n_samples < 50 {
        return Err(invalid("n_samples", "need at least 50 samples"));
    }
    if blocks.iter().any(|b| b.is_empty()) {
        return Err(Error::Empty("outer blocks"));
    }
    let sq: Vec<RealField> = blocks
        .iter()
        .map(|b| kakeya_square_function(grid, b))
        .collect::<Result<_>>()?;
    let prod: Vec<f64> = (0..grid.len())
        .map(|i| sq[0].values[i] * sq[1].values[i] * sq[2].values[i])
        .collect();
    let square_fn_value = lq_norm_values(grid, &prod, q / 3.0, r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signs: Vec<[Vec<f64>; 3]> = (0..n_samples)
        .map(|_| {
            blocks.map(|b| {
                b.iter()
                    .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            })
        })
        .collect();
    let vals: Vec<f64> = signs
        .par_iter()
        .map(|sg| {
            let mut p = vec![1.0; grid.len()];
            for k in 0..3 {
                let mut acc = vec![ZERO; grid.len()];
                for ((_, f), s) in blocks[k].iter().zip(&sg[k]) {
                    for (a, v) in acc.iter_mut().zip(&f.values) {
                        *a += v * *s;
                    }
                }
                for (x, a) in p.iter_mut().zip(&acc) {
                    *x *= a.norm();
                }
            }
            lq_norm_values(grid, &p, q / 3.0, r)
        })
        .collect::<Result<_>>()?;
    let mc_mean = crate::stats::mean(&vals);
    let mc_std_error = crate::stats::std_error(&vals);
    Ok(KhintchineReport {
        mc_mean,
        mc_std_error,
        square_fn_value,
        ratio: if square_fn_value > 0.0 {
            mc_mean / square_fn_value
        } else {
            f64::NAN
        },
        samples: n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alpert::AtomFamily;
    use crate::dyadic::Placement;
    use crate::modulation::Father;
    use crate::quad::TensorGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn u_place() -> Placement {
        Placement::new([-0.25, -0.25], 0.5).unwrap()
    }

    fn sq(l: i32, x: i64, y: i64) -> DyadicSquare {
        DyadicSquare::new(l, x, y).unwrap()
    }

    fn source(lo: f64, hi: f64, w: f64) -> Rule1D {
        RuleBuilder::new(lo, hi).order(16).max_width(w).build()
    }

    fn smooth_piece() -> (Father, SampledField2D) {
        let phi = Father::on(&sq(1, 0, 1), &u_place());
        let f = SampledField2D::from_real_fn(phi.grid(16, 8), |x, y| {
            phi.eval([x, y]) * (1.0 + x - 2.0 * y * y)
        });
        (phi, f)
    }

    /// Adaptive Simpson on `[a,b]`.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        fn rec(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            d: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if d == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, d - 1)
                + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, d - 1)
        }
        let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
        rec(
            f,
            a,
            b,
            fa,
            fm,
            fb,
            (b - a) / 6.0 * (fa + 4.0 * fm + fb),
            tol,
            depth,
        )
    }

    #[test]
    fn extension_matches_adaptive_quadrature() {
        let (phi, f) = smooth_piece();
        let grid = FrequencyGrid::new(8.0, 0.5).unwrap();
        let e = fourier_extension(&f, &grid).unwrap();
        let s = phi.support();
        let g = |x: f64, y: f64| phi.eval([x, y]) * (1.0 + x - 2.0 * y * y);
        for i in (0..grid.len()).step_by(grid.len() / 10).take(10) {
            let xi = grid.point(i);
            let part = |re: bool| {
                let inner = |x: f64| {
                    simpson(
                        &|y: f64| {
                            let ph = -(x * xi[0] + y * xi[1] + (x * x + y * y) * xi[2]);
                            g(x, y) * if re { ph.cos() } else { ph.sin() }
                        },
                        s.y0,
                        s.y1,
                        1e-11,
                        30,
                    )
                };
                simpson(&inner, s.x0, s.x1, 1e-10, 30)
            };
            let want = Complex64::new(part(true), part(false));
            assert!(
                (e.values[i] - want).norm() < 1e-6 * want.norm().max(1e-3),
                "{xi:?}: {} vs {want}",
                e.values[i]
            );
            assert!((e.values[i] - extension_at(&f, xi, [0.0, 0.0])).norm() < 1e-12);
        }
    }

    #[test]
    fn extension_basic_contracts() {
        let (_, f) = smooth_piece();
        let grid = FrequencyGrid::new(6.0, 0.5).unwrap();
        let e = fourier_extension(&f, &grid).unwrap();
        let zero = fourier_extension(&f.scale(ZERO), &grid).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let origin = grid.index.iter().position(|k| *k == [0, 0, 0]).unwrap();
        assert!((e.values[origin] - f.integrate()).norm() < 1e-13);
        let l1 = f.lp_norm(1.0);
        assert!(e.max_abs() <= l1 * (1.0 + 1e-12));
        // linearity
        let g = SampledField2D::from_real_fn(f.grid.clone(), |x, y| (x * 7.0).cos() * y);
        let mut comb = f.scale(Complex64::new(2.0, -1.0));
        comb.add_assign(&g.scale(Complex64::new(0.5, 0.0))).unwrap();
        let ec = fourier_extension(&comb, &grid).unwrap();
        let eg = fourier_extension(&g, &grid).unwrap();
        for i in 0..grid.len() {
            let want = e.values[i] * Complex64::new(2.0, -1.0) + eg.values[i] * 0.5;
            assert!((ec.values[i] - want).norm() < 1e-10);
        }
        // coarse source grid is rejected
        let coarse = SampledField2D::from_real_fn(
            TensorGrid::new(source(-0.2, 0.2, 0.4), source(-0.2, 0.2, 0.4)),
            |_, _| 1.0,
        );
        let big = FrequencyGrid::new(200.0, 1.0).unwrap();
        assert!(matches!(
            fourier_extension(&coarse, &big),
            Err(Error::UnderResolved { .. })
        ));
    }

    #[test]
    fn ball_norms() {
        let grid = FrequencyGrid::new(16.0, 0.5).unwrap();
        let ones = RealField {
            grid: grid.clone(),
            values: vec![1.0; grid.len()],
        };
        for q in [1.0, 4.0 / 3.0, 4.0] {
            let want = (4.0 / 3.0 * PI * 16f64.powi(3)).powf(1.0 / q);
            assert!((ones.lq_norm(q, 16.0).unwrap() / want - 1.0).abs() < 0.02);
        }
        let mut last = 0.0;
        for r in [2.0, 5.0, 9.0, 16.0] {
            let v = ones.lq_norm(2.0, r).unwrap();
            assert!(v >= last);
            last = v;
        }
        assert!(ones.lq_norm(2.0, 17.0).is_err());
        let zero = RealField {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
        };
        assert_eq!(zero.lq_norm(4.0 / 3.0, 16.0).unwrap(), 0.0);
        // quasi-triangle for exponent below one
        let a: Vec<f64> = (0..grid.len())
            .map(|i| ((i * 7919) % 101) as f64 / 100.0)
            .collect();
        let b: Vec<f64> = (0..grid.len())
            .map(|i| ((i * 104729) % 97) as f64 / 50.0)
            .collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let p = 2.0 / 3.0;
        let n = |v: &[f64]| lq_norm_values(&grid, v, p, 16.0).unwrap().powf(p);
        assert!(n(&sum) <= n(&a) + n(&b));
    }

    fn kakeya(outer: &[DyadicSquare], seed: u64) -> KakeyaPolynomial {
        use rand::Rng;
        let fam = AtomFamily::new(2, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = ModulationSequence::sample(1, 2, outer, 1.0, &mut rng).unwrap();
        let b = outer
            .iter()
            .map(|q| {
                (
                    *q,
                    Complex64::from_polar(rng.gen_range(0.5..1.0), rng.gen_range(0.0..6.0)),
                )
            })
            .collect();
        let mut w = vec![0.0; fam.dim()];
        w[0] = 1.0;
        KakeyaPolynomial::build(fam, u_place(), b, u, w, 8).unwrap()
    }

    fn band_rule(k: &KakeyaPolynomial, lo: f64, hi: f64, max_w: f64) -> Rule1D {
        let side = k.place.side * (-k.t as f64).exp2();
        let rho = 0.25 * k.fam.eta() * side;
        let mut rb = RuleBuilder::new(lo, hi)
            .order(16)
            .max_width(max_w)
            .band_panels(4);
        let n = 2 * (1usize << k.t);
        for i in 0..=n {
            let p = lo + rho + i as f64 * 0.5 * side;
            rb.band(p - rho, p + rho);
        }
        rb.build()
    }

    #[test]
    fn atomic_path_agrees_with_sampled_path() {
        let k = kakeya(&[sq(1, 0, 0), sq(1, 1, 1)], 3);
        let grid = FrequencyGrid::new(8.0, 1.0).unwrap();
        let set = AtomicSettings::default();
        let fast = kakeya_extension(&k, &grid, &set).unwrap();
        let r = k.place.rect(&DyadicSquare::ROOT.rect());
        let rho = 0.25 * k.fam.eta() * k.place.side * (-k.t as f64).exp2();
        let rx = band_rule(&k, r.x0 - rho, r.x1 + rho, 0.01);
        let sampled = k.field(TensorGrid::new(rx.clone(), rx));
        let slow = fourier_extension(&sampled, &grid).unwrap();
        let scale = slow.max_abs();
        for (a, b) in fast.values.iter().zip(&slow.values) {
            assert!((a - b).norm() < 1e-8 * scale, "{a} vs {b}");
        }
        // vanishing mean
        let origin = grid.index.iter().position(|k| *k == [0, 0, 0]).unwrap();
        assert!(fast.values[origin].norm() < 1e-14);
    }

    #[test]
    fn modulation_translates_the_extension() {
        let (_, f) = smooth_piece();
        let grid = FrequencyGrid::new(6.0, 0.5).unwrap();
        let u = [2.5, -1.0];
        let m = fourier_extension_modulated(&f, u, &grid).unwrap();
        for i in (0..grid.len()).step_by(grid.len() / 10).take(10) {
            let xi = grid.point(i);
            let shifted = extension_at(&f, [xi[0] - u[0], xi[1] - u[1], xi[2]], [0.0, 0.0]);
            assert!((m.values[i] - shifted).norm() < 1e-6 * shifted.norm().max(1e-3));
        }
        let pieces: BTreeMap<_, _> = [(sq(1, 0, 1), f.clone())].into_iter().collect();
        let zero = ModulationSequence::zero(1, &[sq(1, 0, 1)]);
        let sfun = fourier_square_function(&pieces, &zero, &grid).unwrap();
        let e = fourier_extension(&f, &grid).unwrap();
        for (a, b) in sfun.values.iter().zip(e.abs()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn square_functions_and_trilinear_forms() {
        let outer = [sq(1, 0, 0), sq(1, 1, 0), sq(1, 0, 1), sq(1, 1, 1)];
        let k = kakeya(&outer, 5);
        let grid = FrequencyGrid::new(6.0, 0.5).unwrap();
        let set = AtomicSettings::default();
        let blocks = kakeya_blocks(&k, &grid, &set).unwrap();
        let sf = kakeya_square_function(&grid, &blocks).unwrap();
        for (_, b) in &blocks {
            for (s, v) in sf.values.iter().zip(&b.values) {
                assert!(*s >= v.norm() * (1.0 - 1e-14));
            }
        }
        let single = kakeya_square_function(&grid, &blocks[..1]).unwrap();
        for (s, v) in single.values.iter().zip(&blocks[0].1.values) {
            assert!((s - v.norm()).abs() < 1e-15);
        }
        let scaled: Vec<_> = blocks
            .iter()
            .map(|(q, b)| (*q, b.scale(Complex64::new(0.0, -3.0))))
            .collect();
        let s3 = kakeya_square_function(&grid, &scaled).unwrap();
        for (a, b) in s3.values.iter().zip(&sf.values) {
            assert!((a - 3.0 * b).abs() < 1e-12 * (1.0 + b));
        }
        let e = kakeya_extension(&k, &grid, &set).unwrap();
        let others: Vec<ExtensionField> = [6u64, 7]
            .iter()
            .map(|s| kakeya_extension(&kakeya(&outer, *s), &grid, &set).unwrap())
            .collect();
        let q = 4.0;
        let t = trilinear_norm([&e, &others[0], &others[1]], q, 6.0).unwrap();
        let t2 = trilinear_norm([&others[1], &e, &others[0]], q, 6.0).unwrap();
        assert!((t - t2).abs() <= 1e-12 * t);
        let holder: f64 = [&e, &others[0], &others[1]]
            .iter()
            .map(|f| lq_norm_ball(f, q, 6.0).unwrap())
            .product();
        assert!(t <= holder * (1.0 + 1e-12));
        let z = e.scale(ZERO);
        assert_eq!(
            trilinear_norm([&z, &others[0], &others[1]], q, 6.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn khintchine_singletons_and_determinism() {
        let grid = FrequencyGrid::new(6.0, 0.5).unwrap();
        let set = AtomicSettings::default();
        let mk = |outer: &[DyadicSquare], s| kakeya_blocks(&kakeya(outer, s), &grid, &set).unwrap();
        let singles = [
            mk(&[sq(1, 0, 0)], 1),
            mk(&[sq(1, 1, 0)], 2),
            mk(&[sq(1, 0, 1)], 3),
        ];
        let r = khintchine_trilinear(
            [&singles[0], &singles[1], &singles[2]],
            &grid,
            4.0,
            6.0,
            50,
            1,
        )
        .unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-12, "{r:?}");
        let outer = [sq(1, 0, 0), sq(1, 1, 0), sq(1, 0, 1), sq(1, 1, 1)];
        let many = [mk(&outer, 4), mk(&outer, 5), mk(&outer, 6)];
        let a =
            khintchine_trilinear([&many[0], &many[1], &many[2]], &grid, 4.0, 6.0, 200, 9).unwrap();
        let b =
            khintchine_trilinear([&many[0], &many[1], &many[2]], &grid, 4.0, 6.0, 200, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.ratio > 1.0 / 3.0 && a.ratio < 3.0, "{a:?}");
        assert!(
            khintchine_trilinear([&many[0], &many[1], &many[2]], &grid, 4.0, 6.0, 10, 9).is_err()
        );
    }

    #[test]
    fn refinement_changes_norms_little() {
        let k = kakeya(&[sq(1, 0, 0), sq(1, 1, 1)], 8);
        let set = AtomicSettings::default();
        let norm = |h: f64| {
            let grid = FrequencyGrid::new(8.0, h).unwrap();
            lq_norm_ball(&kakeya_extension(&k, &grid, &set).unwrap(), 4.0, 8.0).unwrap()
        };
        let (a, b) = (norm(0.5), norm(0.25));
        assert!((a / b - 1.0).abs() < 0.02, "{a} {b}");
    }
}
