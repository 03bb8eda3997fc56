//! Alpert wavelets on a square: orthonormal piecewise polynomials with κ
//! vanishing moments, a tensor mollifier whose positive moments vanish, and
//! the smooth atoms obtained by convolving the two.
//!
//! Atoms are built once on the unit square. In child-local coordinates
//! `t = (x − c_K)/(ℓ/4) ∈ [−1,1]²` every atom is a polynomial of total degree
//! `< κ` on each child `K`, so an atom is stored as a `2κ × 2κ` matrix `A`
//! indexed by `(side_x·κ + k₁, side_y·κ + k₂)` and
//! `h_Q(x) = ℓ⁻¹ Σ A[i,j] F_i(x₁) F_j(x₂)` with one-dimensional profiles
//! `F_{s,k}(x) = t^k 1_{child s}(x)`. Because the mollifier is a tensor
//! product the smooth atoms keep this separable form with smoothed profiles.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dyadic::{DyadicSquare, Placement, Rect};
use crate::error::{invalid, Error, Result};
use crate::quad::{GaussRule, RuleBuilder, SampledField2D, TensorGrid};

/// Default upper bound on η.
pub const ETA_MAX: f64 = 0.1;
/// Largest accepted condition number of the mollifier moment system.
pub const MOLLIFIER_COND_LIMIT: f64 = 1e12;
/// Support radius (per axis) of the unscaled one-dimensional mollifier.
pub const MOLLIFIER_HALF_WIDTH: f64 = 0.25;

/// Multi-indices `|α| ≤ κ−1` in graded order.
pub fn monomials(kappa: usize) -> Vec<[u32; 2]> {
    let mut out = Vec::new();
    for deg in 0..kappa as u32 {
        for a1 in (0..=deg).rev() {
            out.push([a1, deg - a1]);
        }
    }
    out
}

/// `∫_{-1}^{1} t^k dt`.
fn mono_int(k: u32) -> f64 {
    if k % 2 == 1 {
        0.0
    } else {
        2.0 / (k as f64 + 1.0)
    }
}

fn binom(n: u32, k: u32) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// `∫_{-1}^{1} t^k (σ + t)^b dt` in closed form.
fn shifted_mono_int(k: u32, sigma: f64, b: u32) -> f64 {
    (0..=b)
        .map(|j| binom(b, j) * sigma.powi((b - j) as i32) * mono_int(k + j))
        .sum()
}

/// Signed offset (±1) of child half `s` from the parent's center, in units of ℓ/4.
#[inline]
fn half_sign(s: usize) -> f64 {
    if s == 0 {
        -1.0
    } else {
        1.0
    }
}

/// Piecewise polynomial on the four children of the unit square, one
/// coefficient per child and multi-index (child order LL, LR, UL, UR).
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewisePoly {
    pub kappa: usize,
    pub children: [Vec<f64>; 4],
}

impl PiecewisePoly {
    /// Evaluate at a point of the unit square (zero outside).
    pub fn eval_unit(&self, p: [f64; 2]) -> f64 {
        if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
            return 0.0;
        }
        let sx = usize::from(p[0] >= 0.5);
        let sy = usize::from(p[1] >= 0.5);
        let t1 = 4.0 * p[0] - 1.0 - 2.0 * sx as f64;
        let t2 = 4.0 * p[1] - 1.0 - 2.0 * sy as f64;
        monomials(self.kappa)
            .iter()
            .zip(&self.children[sx + 2 * sy])
            .map(|(a, c)| c * t1.powi(a[0] as i32) * t2.powi(a[1] as i32))
            .sum()
    }

    /// Exact `∫_{[0,1]²} p(x) (x − ½)^β dx`.
    pub fn centered_moment_unit(&self, beta: [u32; 2]) -> f64 {
        let mons = monomials(self.kappa);
        let mut acc = 0.0;
        for (ci, coeffs) in self.children.iter().enumerate() {
            let (s1, s2) = (half_sign(ci % 2), half_sign(ci / 2));
            for (a, c) in mons.iter().zip(coeffs) {
                acc +=
                    c * shifted_mono_int(a[0], s1, beta[0]) * shifted_mono_int(a[1], s2, beta[1]);
            }
        }
        acc * 4f64.powi(-((beta[0] + beta[1]) as i32)) / 16.0
    }

    /// Exact `∫_{[0,1]²} p(x) x^β dx`.
    pub fn moment_unit(&self, beta: [u32; 2]) -> f64 {
        // x = ½ + (x − ½): expand both coordinates.
        let mut acc = 0.0;
        for j1 in 0..=beta[0] {
            for j2 in 0..=beta[1] {
                let w = binom(beta[0], j1)
                    * binom(beta[1], j2)
                    * 0.5f64.powi((beta[0] - j1 + beta[1] - j2) as i32);
                acc += w * self.centered_moment_unit([j1, j2]);
            }
        }
        acc
    }

    /// Exact L² inner product on the unit square.
    pub fn inner_unit(&self, other: &PiecewisePoly) -> f64 {
        let mons = monomials(self.kappa);
        let omons = monomials(other.kappa);
        let mut acc = 0.0;
        for ci in 0..4 {
            for (a, x) in mons.iter().zip(&self.children[ci]) {
                for (b, y) in omons.iter().zip(&other.children[ci]) {
                    acc += x * y * mono_int(a[0] + b[0]) * mono_int(a[1] + b[1]);
                }
            }
        }
        acc / 16.0
    }

    /// Separable coefficient matrix (`2κ × 2κ`, row-major).
    pub fn to_matrix(&self) -> Vec<f64> {
        let k = self.kappa;
        let n = 2 * k;
        let mut m = vec![0.0; n * n];
        for (ci, coeffs) in self.children.iter().enumerate() {
            let (sx, sy) = (ci % 2, ci / 2);
            for (a, c) in monomials(k).iter().zip(coeffs) {
                m[(sx * k + a[0] as usize) * n + sy * k + a[1] as usize] = *c;
            }
        }
        m
    }
}

/// Orthonormal Alpert basis of the unit square.
#[derive(Clone, Debug)]
pub struct AlpertBasis {
    pub kappa: usize,
    pub atoms: Vec<PiecewisePoly>,
    /// Separable coefficient matrices, one per atom.
    pub matrices: Vec<Vec<f64>>,
    /// Singular values of the moment constraint system.
    pub constraint_singular_values: Vec<f64>,
}

impl AlpertBasis {
    pub fn new(kappa: usize) -> Result<Self> {
        if kappa == 0 {
            return Err(invalid("kappa", "must be at least 1"));
        }
        let mons = monomials(kappa);
        let m = mons.len();
        let nv = 4 * m;
        // Constraint rows ∫ f (x−½)^β = 0, rescaled by 4^{|β|}.
        let mut c = DMatrix::<f64>::zeros(nv, nv);
        for (r, beta) in mons.iter().enumerate() {
            for ci in 0..4 {
                let (s1, s2) = (half_sign(ci % 2), half_sign(ci / 2));
                for (j, a) in mons.iter().enumerate() {
                    c[(r, ci * m + j)] = shifted_mono_int(a[0], s1, beta[0])
                        * shifted_mono_int(a[1], s2, beta[1])
                        / 16.0;
                }
            }
        }
        let svd = c.clone().svd(false, true);
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        let sig = svd.singular_values.as_slice().to_vec();
        let smax = sig.iter().cloned().fold(0.0, f64::max);
        let tol = 1e-10 * smax.max(1.0);
        let rank = sig.iter().filter(|s| **s > tol).count();
        if rank != m {
            let smallest = sig
                .iter()
                .cloned()
                .filter(|s| *s > tol)
                .fold(f64::INFINITY, f64::min);
            return Err(Error::RankDeficient {
                expected: m,
                found: rank,
                sigma: smallest,
            });
        }
        let null: Vec<usize> = (0..nv).filter(|&i| sig[i] <= tol).collect();
        let nbasis = DMatrix::from_fn(nv, null.len(), |r, k| v_t[(null[k], r)]);
        let gram = Self::coefficient_gram(kappa);
        let ip = |u: &[f64], v: &[f64]| -> f64 {
            let mut acc = 0.0;
            for i in 0..nv {
                if u[i] == 0.0 {
                    continue;
                }
                for j in 0..nv {
                    acc += u[i] * gram[(i, j)] * v[j];
                }
            }
            acc
        };
        let d = nv - m;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
        for i in 0..nv {
            if basis.len() == d {
                break;
            }
            // Project the i-th child monomial onto the null space.
            let row = nbasis.row(i).transpose();
            let mut v: Vec<f64> = (&nbasis * row).as_slice().to_vec();
            let n0 = ip(&v, &v).sqrt();
            if n0 < 1e-8 {
                continue;
            }
            for _ in 0..2 {
                for b in &basis {
                    let p = ip(&v, b);
                    for (x, y) in v.iter_mut().zip(b) {
                        *x -= p * y;
                    }
                }
            }
            let nrm = ip(&v, &v).sqrt();
            if nrm < 1e-6 * n0 {
                continue;
            }
            for x in v.iter_mut() {
                *x /= nrm;
            }
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-9) {
                if *first < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            for x in v.iter_mut() {
                if x.abs() < 1e-15 {
                    *x = 0.0;
                }
            }
            basis.push(v);
        }
        if basis.len() != d {
            return Err(Error::RankDeficient {
                expected: d,
                found: basis.len(),
                sigma: 0.0,
            });
        }
        let atoms: Vec<PiecewisePoly> = basis
            .iter()
            .map(|v| PiecewisePoly {
                kappa,
                children: [
                    v[0..m].to_vec(),
                    v[m..2 * m].to_vec(),
                    v[2 * m..3 * m].to_vec(),
                    v[3 * m..4 * m].to_vec(),
                ],
            })
            .collect();
        let matrices = atoms.iter().map(|a| a.to_matrix()).collect();
        Ok(Self {
            kappa,
            atoms,
            matrices,
            constraint_singular_values: sig,
        })
    }

    /// Expected dimension `4·κ(κ+1)/2 − κ(κ+1)/2`.
    pub fn expected_dim(kappa: usize) -> usize {
        3 * kappa * (kappa + 1) / 2
    }

    pub fn dim(&self) -> usize {
        self.atoms.len()
    }

    /// Side of the separable coefficient matrices.
    pub fn n(&self) -> usize {
        2 * self.kappa
    }

    fn coefficient_gram(kappa: usize) -> DMatrix<f64> {
        let mons = monomials(kappa);
        let m = mons.len();
        let mut g = DMatrix::zeros(4 * m, 4 * m);
        for ci in 0..4 {
            for (i, a) in mons.iter().enumerate() {
                for (j, b) in mons.iter().enumerate() {
                    g[(ci * m + i, ci * m + j)] =
                        mono_int(a[0] + b[0]) * mono_int(a[1] + b[1]) / 16.0;
                }
            }
        }
        g
    }
}

fn bump(z: f64) -> f64 {
    if z.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - z * z)).exp()
    }
}

const MOLLIFIER_PANELS: usize = 512;

/// Tensor mollifier `φ(x) = φ₁(x₁)φ₁(x₂)` with `φ₁(y) = p(y)·ψ(4y)`,
/// `ψ(z) = exp(−1/(1−z²))`, and `p` an even polynomial chosen so that
/// `∫φ₁ y^m dy = δ_{m0}` for `m < κ`.
#[derive(Clone, Debug)]
pub struct Mollifier {
    pub eta: f64,
    pub kappa: usize,
    /// Coefficients of `p` on the powers `y^0, y^2, y^4, …`.
    pub coeffs: Vec<f64>,
    pub condition: f64,
    /// Cumulative moments `M_j(z_i) = ∫_{-1/4}^{z_i} φ₁(w) w^j dw` at panel ends.
    table: Vec<Vec<f64>>,
    rule: GaussRule,
}

impl Mollifier {
    pub fn new(eta: f64, kappa: usize) -> Result<Self> {
        Self::with_limit(eta, kappa, ETA_MAX)
    }

    pub fn with_limit(eta: f64, kappa: usize, eta_max: f64) -> Result<Self> {
        if !(eta > 0.0 && eta < eta_max) {
            return Err(invalid("eta", format!("need 0 < eta < {eta_max}")));
        }
        if kappa == 0 {
            return Err(invalid("kappa", "must be at least 1"));
        }
        let rule = GaussRule::new(16);
        let r = MOLLIFIER_HALF_WIDTH;
        // Raw moments of ψ(4y) by a fine composite rule.
        let fine = RuleBuilder::new(-r, r)
            .order(16)
            .max_width(2.0 * r / 128.0)
            .build();
        let raw = |k: i32| fine.integrate(|y| bump(4.0 * y) * y.powi(k));
        let evens: Vec<i32> = (0..kappa as i32).filter(|m| m % 2 == 0).collect();
        let ne = evens.len();
        let h = DMatrix::from_fn(ne, ne, |i, j| raw(evens[i] + evens[j]));
        let mut rhs = nalgebra::DVector::zeros(ne);
        rhs[0] = 1.0;
        let sv = h.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        let condition = if smin > 0.0 {
            smax / smin
        } else {
            f64::INFINITY
        };
        if condition > MOLLIFIER_COND_LIMIT {
            return Err(Error::IllConditioned {
                cond: condition,
                limit: MOLLIFIER_COND_LIMIT,
            });
        }
        let c = h.lu().solve(&rhs).ok_or(Error::IllConditioned {
            cond: f64::INFINITY,
            limit: MOLLIFIER_COND_LIMIT,
        })?;
        let mut m = Self {
            eta,
            kappa,
            coeffs: c.as_slice().to_vec(),
            condition,
            table: Vec::new(),
            rule,
        };
        m.table = m.build_table();
        Ok(m)
    }

    fn panel_width() -> f64 {
        2.0 * MOLLIFIER_HALF_WIDTH / MOLLIFIER_PANELS as f64
    }

    fn build_table(&self) -> Vec<Vec<f64>> {
        let w = Self::panel_width();
        let mut table = vec![vec![0.0; MOLLIFIER_PANELS + 1]; self.kappa];
        for p in 0..MOLLIFIER_PANELS {
            let a = -MOLLIFIER_HALF_WIDTH + p as f64 * w;
            for (j, col) in table.iter_mut().enumerate() {
                let inc = self
                    .rule
                    .integrate(a, a + w, |y| self.phi1(y) * y.powi(j as i32));
                col[p + 1] = col[p] + inc;
            }
        }
        table
    }

    /// One-dimensional factor, supported in `[−¼, ¼]`.
    pub fn phi1(&self, y: f64) -> f64 {
        let b = bump(4.0 * y);
        if b == 0.0 {
            return 0.0;
        }
        let y2 = y * y;
        let mut p = 0.0;
        let mut pw = 1.0;
        for c in &self.coeffs {
            p += c * pw;
            pw *= y2;
        }
        p * b
    }

    /// `φ(x) = φ₁(x₁)φ₁(x₂)`.
    pub fn phi(&self, x: [f64; 2]) -> f64 {
        self.phi1(x[0]) * self.phi1(x[1])
    }

    /// `φ_ε(x) = ε^{−2} φ(x/ε)`.
    pub fn phi_scaled(&self, x: [f64; 2], eps: f64) -> f64 {
        self.phi([x[0] / eps, x[1] / eps]) / (eps * eps)
    }

    /// Cumulative moments `∫_{−¼}^{z} φ₁(w) w^j dw` for `j < κ`.
    pub fn cumulative(&self, z: f64, out: &mut [f64]) {
        let r = MOLLIFIER_HALF_WIDTH;
        if z <= -r {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let last = MOLLIFIER_PANELS;
        if z >= r {
            for (j, v) in out.iter_mut().enumerate() {
                *v = self.table[j][last];
            }
            return;
        }
        let w = Self::panel_width();
        let p = (((z + r) / w).floor() as usize).min(last - 1);
        let a = -r + p as f64 * w;
        for (j, v) in out.iter_mut().enumerate() {
            *v = self.table[j][p];
        }
        if z > a {
            let half = 0.5 * (z - a);
            let mid = 0.5 * (z + a);
            for (x, wt) in self.rule.nodes.iter().zip(&self.rule.weights) {
                let y = mid + half * x;
                let f = self.phi1(y) * wt * half;
                let mut yp = 1.0;
                for v in out.iter_mut() {
                    *v += f * yp;
                    yp *= y;
                }
            }
        }
    }

    /// `∫ φ₁(y) y^m dy` by the cumulative table.
    pub fn moment1(&self, m: usize) -> f64 {
        if m < self.kappa {
            return self.table[m][MOLLIFIER_PANELS];
        }
        let fine = RuleBuilder::new(-MOLLIFIER_HALF_WIDTH, MOLLIFIER_HALF_WIDTH)
            .order(16)
            .max_width(1.0 / 256.0)
            .build();
        fine.integrate(|y| self.phi1(y) * y.powi(m as i32))
    }

    /// Largest `|∫φ x^γ − δ_{γ0}|` over `|γ| < κ`.
    pub fn residual_moments(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for g in monomials(self.kappa) {
            let v = self.moment1(g[0] as usize) * self.moment1(g[1] as usize);
            let target = if g == [0, 0] { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
        worst
    }

    /// Sample `φ` on a tensor grid.
    pub fn sample(&self, grid: Arc<TensorGrid>) -> SampledField2D {
        SampledField2D::from_real_fn(grid, |x, y| self.phi([x, y]))
    }
}

/// Physical square `[x0, x0+side] × [y0, y0+side]` carrying an atom family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SquareGeom {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl SquareGeom {
    pub fn new(x0: f64, y0: f64, side: f64) -> Result<Self> {
        if !(side > 0.0 && side.is_finite()) {
            return Err(invalid("side", "must be positive"));
        }
        Ok(Self { x0, y0, side })
    }

    pub fn from_dyadic(q: &DyadicSquare, place: &Placement) -> Self {
        let [x0, y0] = place.to_physical(q.corner());
        Self {
            x0,
            y0,
            side: place.side_of(q),
        }
    }

    /// Square of side `side` centered at `c`.
    pub fn centered(c: [f64; 2], side: f64) -> Self {
        Self {
            x0: c[0] - 0.5 * side,
            y0: c[1] - 0.5 * side,
            side,
        }
    }

    pub fn rect(&self) -> Rect {
        Rect::square(self.x0, self.y0, self.side)
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x0 + 0.5 * self.side, self.y0 + 0.5 * self.side]
    }

    pub fn axis_x(&self) -> Axis {
        Axis {
            lo: self.x0,
            side: self.side,
        }
    }

    pub fn axis_y(&self) -> Axis {
        Axis {
            lo: self.y0,
            side: self.side,
        }
    }

    /// Support of the smooth atoms, `(1+η/2)Q ⊂ (1+2η)Q`.
    pub fn smooth_support(&self, eta: f64) -> Rect {
        self.rect().dilate(1.0 + 0.5 * eta)
    }

    pub fn translate(&self, z: [f64; 2]) -> Self {
        Self {
            x0: self.x0 + z[0],
            y0: self.y0 + z[1],
            side: self.side,
        }
    }
}

/// One coordinate interval of a square, split into two child halves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub side: f64,
}

impl Axis {
    pub fn hi(&self) -> f64 {
        self.lo + self.side
    }

    pub fn mid(&self) -> f64 {
        self.lo + 0.5 * self.side
    }

    /// Raw profiles `F_{s,k}(x) = t^k 1_{half s}(x)`, written into `out[s·κ+k]`.
    pub fn raw_profiles(&self, kappa: usize, x: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if x < self.lo || x > self.hi() {
            return;
        }
        let s = usize::from(x >= self.mid());
        let h = 0.25 * self.side;
        let c = self.lo + h * (1.0 + 2.0 * s as f64);
        let t = (x - c) / h;
        let mut p = 1.0;
        for k in 0..kappa {
            out[s * kappa + k] = p;
            p *= t;
        }
    }

    /// Profiles convolved with `φ₁` scaled to `ε = η·side`.
    pub fn smooth_profiles(&self, moll: &Mollifier, kappa: usize, x: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let eps = moll.eta * self.side;
        let rho = MOLLIFIER_HALF_WIDTH * eps;
        if x <= self.lo - rho || x >= self.hi() + rho {
            return;
        }
        let h = 0.25 * self.side;
        let lam = -4.0 * moll.eta;
        let mut d = [0.0f64; 16];
        let mut dlo = [0.0f64; 16];
        for s in 0..2 {
            let a = self.lo + 0.5 * self.side * s as f64;
            let b = a + 0.5 * self.side;
            if x <= a - rho || x >= b + rho {
                continue;
            }
            let c = a + h;
            let t = (x - c) / h;
            if x >= a + rho && x <= b - rho {
                let mut p = 1.0;
                for k in 0..kappa {
                    out[s * kappa + k] = p;
                    p *= t;
                }
                continue;
            }
            let zlo = ((x - b) / eps).max(-MOLLIFIER_HALF_WIDTH);
            let zhi = ((x - a) / eps).min(MOLLIFIER_HALF_WIDTH);
            moll.cumulative(zhi, &mut d[..kappa]);
            moll.cumulative(zlo, &mut dlo[..kappa]);
            for j in 0..kappa {
                d[j] -= dlo[j];
            }
            for k in 0..kappa {
                let mut acc = 0.0;
                let mut lj = 1.0;
                for (j, dj) in d.iter().enumerate().take(k + 1) {
                    acc += binom(k as u32, j as u32) * t.powi((k - j) as i32) * lj * dj;
                    lj *= lam;
                }
                out[s * kappa + k] = acc;
            }
        }
    }

    /// Breakpoints of the raw profiles.
    pub fn breaks(&self) -> [f64; 3] {
        [self.lo, self.mid(), self.hi()]
    }
}

/// Which variant of an atom family a profile belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Raw,
    Smooth,
}

/// Evaluate the profile vector of `axis` at `x`.
pub fn profiles(
    axis: &Axis,
    variant: Variant,
    kappa: usize,
    moll: &Mollifier,
    x: f64,
    out: &mut [f64],
) {
    match variant {
        Variant::Raw => axis.raw_profiles(kappa, x, out),
        Variant::Smooth => axis.smooth_profiles(moll, kappa, x, out),
    }
}

/// Composite rule covering the product support of two profile families,
/// aligned to their breakpoints with refined smoothing bands.
pub fn pair_rule(
    a: (&Axis, Variant),
    b: (&Axis, Variant),
    eta: f64,
) -> Option<crate::quad::Rule1D> {
    let reach = |ax: &Axis, v: Variant| match v {
        Variant::Raw => 0.0,
        Variant::Smooth => MOLLIFIER_HALF_WIDTH * eta * ax.side,
    };
    let (ra, rb) = (reach(a.0, a.1), reach(b.0, b.1));
    let lo = (a.0.lo - ra).max(b.0.lo - rb);
    let hi = (a.0.hi() + ra).min(b.0.hi() + rb);
    if hi <= lo {
        return None;
    }
    let mut rb_ = RuleBuilder::new(lo, hi).order(16).band_panels(4);
    for (ax, r) in [(a.0, ra), (b.0, rb)] {
        for p in ax.breaks() {
            if r > 0.0 {
                rb_.band(p - r, p + r);
            } else {
                rb_.breakpoint(p);
            }
        }
    }
    Some(rb_.build())
}

/// `M[i][j] = ∫ F^a_i(x) F^b_j(x) dx` for the two profile families (row-major `n×n`).
pub fn axis_gram(
    a: (&Axis, Variant),
    b: (&Axis, Variant),
    kappa: usize,
    moll: &Mollifier,
) -> Vec<f64> {
    let n = 2 * kappa;
    let mut m = vec![0.0; n * n];
    let Some(rule) = pair_rule(a, b, moll.eta) else {
        return m;
    };
    let mut fa = vec![0.0; n];
    let mut fb = vec![0.0; n];
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        profiles(a.0, a.1, kappa, moll, x, &mut fa);
        profiles(b.0, b.1, kappa, moll, x, &mut fb);
        for i in 0..n {
            if fa[i] == 0.0 {
                continue;
            }
            let wi = w * fa[i];
            for j in 0..n {
                m[i * n + j] += wi * fb[j];
            }
        }
    }
    m
}

/// `∫ x^b F_i(x) dx` for every profile of the family.
pub fn axis_moments(
    axis: &Axis,
    variant: Variant,
    kappa: usize,
    moll: &Mollifier,
    b: u32,
) -> Vec<f64> {
    let n = 2 * kappa;
    let mut out = vec![0.0; n];
    let r = match variant {
        Variant::Raw => 0.0,
        Variant::Smooth => MOLLIFIER_HALF_WIDTH * moll.eta * axis.side,
    };
    let mut rb = RuleBuilder::new(axis.lo - r, axis.hi() + r)
        .order(16)
        .band_panels(4);
    for p in axis.breaks() {
        if r > 0.0 {
            rb.band(p - r, p + r);
        } else {
            rb.breakpoint(p);
        }
    }
    let rule = rb.build();
    let mut f = vec![0.0; n];
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        profiles(axis, variant, kappa, moll, x, &mut f);
        let xb = w * x.powi(b as i32);
        for (o, v) in out.iter_mut().zip(&f) {
            *o += xb * v;
        }
    }
    out
}

/// `⟨A, M_x B M_yᵀ⟩_F / (ℓ_A ℓ_B)`: inner product of two separable atoms
/// given the axis Gram matrices between their profile families.
pub fn separable_inner(a: &[f64], b: &[f64], mx: &[f64], my: &[f64], n: usize, scale: f64) -> f64 {
    // tmp = M_x B  (n×n)
    let mut tmp = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let v = mx[i * n + k];
            if v == 0.0 {
                continue;
            }
            for j in 0..n {
                tmp[i * n + j] += v * b[k * n + j];
            }
        }
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let aij = a[i * n + j];
            if aij == 0.0 {
                continue;
            }
            // (tmp M_yᵀ)[i][j] = Σ_l tmp[i][l] M_y[j][l]
            let mut v = 0.0;
            for l in 0..n {
                v += tmp[i * n + l] * my[j * n + l];
            }
            acc += aij * v;
        }
    }
    acc * scale
}

/// Basis plus mollifier: everything needed to evaluate raw and smooth atoms
/// on any square.
#[derive(Clone, Debug)]
pub struct AtomFamily {
    pub basis: Arc<AlpertBasis>,
    pub moll: Arc<Mollifier>,
}

impl AtomFamily {
    pub fn new(kappa: usize, eta: f64) -> Result<Self> {
        Self::with_limit(kappa, eta, ETA_MAX)
    }

    pub fn with_limit(kappa: usize, eta: f64, eta_max: f64) -> Result<Self> {
        if kappa > 12 {
            return Err(invalid("kappa", "supported range is 1..=12"));
        }
        Ok(Self {
            basis: Arc::new(AlpertBasis::new(kappa)?),
            moll: Arc::new(Mollifier::with_limit(eta, kappa, eta_max)?),
        })
    }

    pub fn kappa(&self) -> usize {
        self.basis.kappa
    }

    pub fn eta(&self) -> f64 {
        self.moll.eta
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn n(&self) -> usize {
        self.basis.n()
    }

    /// Both profile vectors at a point.
    pub fn point_profiles(
        &self,
        geom: &SquareGeom,
        variant: Variant,
        p: [f64; 2],
        fx: &mut [f64],
        fy: &mut [f64],
    ) {
        let k = self.kappa();
        profiles(&geom.axis_x(), variant, k, &self.moll, p[0], fx);
        profiles(&geom.axis_y(), variant, k, &self.moll, p[1], fy);
    }

    /// Evaluate a separable coefficient matrix (any linear combination of atoms) at `p`.
    pub fn eval_matrix(&self, geom: &SquareGeom, variant: Variant, m: &[f64], p: [f64; 2]) -> f64 {
        let n = self.n();
        let mut fx = [0.0f64; 32];
        let mut fy = [0.0f64; 32];
        self.point_profiles(geom, variant, p, &mut fx[..n], &mut fy[..n]);
        let mut acc = 0.0;
        for i in 0..n {
            if fx[i] == 0.0 {
                continue;
            }
            let mut r = 0.0;
            for j in 0..n {
                r += m[i * n + j] * fy[j];
            }
            acc += fx[i] * r;
        }
        acc / geom.side
    }

    pub fn eval(&self, geom: &SquareGeom, a: usize, variant: Variant, p: [f64; 2]) -> f64 {
        self.eval_matrix(geom, variant, &self.basis.matrices[a], p)
    }

    /// Combination matrix `Σ_a c_a A_a`.
    pub fn combine(&self, coeffs: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut m = vec![0.0; n * n];
        for (c, a) in coeffs.iter().zip(&self.basis.matrices) {
            if *c == 0.0 {
                continue;
            }
            for (x, y) in m.iter_mut().zip(a) {
                *x += c * y;
            }
        }
        m
    }

    /// Exact moment `∫ h_{Q,a}(x) x^β dx` of a raw atom, or the 1D-quadrature
    /// moment of the smooth atom.
    pub fn moment(&self, geom: &SquareGeom, a: usize, variant: Variant, beta: [u32; 2]) -> f64 {
        let k = self.kappa();
        let n = self.n();
        let (mx, my) = match variant {
            Variant::Raw => (
                raw_axis_moments(&geom.axis_x(), k, beta[0]),
                raw_axis_moments(&geom.axis_y(), k, beta[1]),
            ),
            Variant::Smooth => (
                axis_moments(&geom.axis_x(), variant, k, &self.moll, beta[0]),
                axis_moments(&geom.axis_y(), variant, k, &self.moll, beta[1]),
            ),
        };
        let m = &self.basis.matrices[a];
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += m[i * n + j] * mx[i] * my[j];
            }
        }
        acc / geom.side
    }

    /// Gram block `⟨h_{P,a}, h_{Q,b}⟩` for all atom pairs (row-major `d×d`).
    pub fn gram_block(&self, p: (&SquareGeom, Variant), q: (&SquareGeom, Variant)) -> Vec<f64> {
        let k = self.kappa();
        let mx = axis_gram((&p.0.axis_x(), p.1), (&q.0.axis_x(), q.1), k, &self.moll);
        let my = axis_gram((&p.0.axis_y(), p.1), (&q.0.axis_y(), q.1), k, &self.moll);
        self.gram_from_axes(&mx, &my, p.0.side * q.0.side)
    }

    pub fn gram_from_axes(&self, mx: &[f64], my: &[f64], side_product: f64) -> Vec<f64> {
        let d = self.dim();
        let n = self.n();
        let mut g = vec![0.0; d * d];
        if mx.iter().all(|v| *v == 0.0) || my.iter().all(|v| *v == 0.0) {
            return g;
        }
        let mats = &self.basis.matrices;
        for a in 0..d {
            for b in 0..d {
                g[a * d + b] = separable_inner(&mats[a], &mats[b], mx, my, n, 1.0 / side_product);
            }
        }
        g
    }

    /// Wavelet atom on a dyadic square.
    pub fn atom(&self, q: &DyadicSquare, place: &Placement, index: usize) -> Result<WaveletAtom> {
        if index >= self.dim() {
            return Err(invalid("index", format!("{index} >= {}", self.dim())));
        }
        Ok(WaveletAtom {
            square: *q,
            geom: SquareGeom::from_dyadic(q, place),
            index,
            raw: self.basis.atoms[index].clone(),
            kappa: self.kappa(),
            eta: self.eta(),
        })
    }
}

/// `∫ x^b F_i(x) dx` in closed form for raw profiles.
pub fn raw_axis_moments(axis: &Axis, kappa: usize, b: u32) -> Vec<f64> {
    let h = 0.25 * axis.side;
    let mut out = vec![0.0; 2 * kappa];
    for s in 0..2 {
        let c = axis.lo + h * (1.0 + 2.0 * s as f64);
        for k in 0..kappa {
            // x = c + h t
            let mut acc = 0.0;
            for j in 0..=b {
                acc += binom(b, j)
                    * c.powi((b - j) as i32)
                    * h.powi(j as i32)
                    * mono_int(k as u32 + j);
            }
            out[s * kappa + k] = acc * h;
        }
    }
    out
}

/// One Alpert function on a square with its smooth variant available on demand.
#[derive(Clone, Debug)]
pub struct WaveletAtom {
    pub square: DyadicSquare,
    pub geom: SquareGeom,
    pub index: usize,
    pub raw: PiecewisePoly,
    pub kappa: usize,
    pub eta: f64,
}

impl WaveletAtom {
    pub fn eval_raw(&self, fam: &AtomFamily, p: [f64; 2]) -> f64 {
        fam.eval(&self.geom, self.index, Variant::Raw, p)
    }

    pub fn eval_smooth(&self, fam: &AtomFamily, p: [f64; 2]) -> f64 {
        fam.eval(&self.geom, self.index, Variant::Smooth, p)
    }

    /// Smooth atom sampled on a tensor grid over its support with
    /// `samples_per_band` nodes per `η·ℓ(Q)`.
    pub fn smooth_field(
        &self,
        fam: &AtomFamily,
        samples_per_band: usize,
    ) -> Result<SampledField2D> {
        if samples_per_band < 4 {
            return Err(Error::UnderResolved {
                what: "smooth atom sampling".into(),
                required: "4 samples per smoothing width".into(),
            });
        }
        let eps = self.eta * self.geom.side;
        let r = MOLLIFIER_HALF_WIDTH * eps;
        let panel = eps / samples_per_band as f64 * 8.0;
        let build = |ax: Axis| {
            let mut b = RuleBuilder::new(ax.lo - r, ax.hi() + r)
                .order(8)
                .max_width(panel)
                .band_panels(samples_per_band);
            for p in ax.breaks() {
                b.band(p - r, p + r);
            }
            b.build()
        };
        let grid = TensorGrid::new(build(self.geom.axis_x()), build(self.geom.axis_y()));
        Ok(SampledField2D::from_real_fn(grid, |x, y| {
            self.eval_smooth(fam, [x, y])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dimensions_match_constraint_count() {
        for k in 1..=5 {
            let b = AlpertBasis::new(k).unwrap();
            assert_eq!(b.dim(), AlpertBasis::expected_dim(k));
            assert_eq!(b.dim(), 4 * k * (k + 1) / 2 - monomials(k).len());
        }
        assert_eq!(AlpertBasis::new(1).unwrap().dim(), 4 - 1);
    }

    #[test]
    fn kappa_one_atoms_are_zero_mean_constants() {
        let b = AlpertBasis::new(1).unwrap();
        for a in &b.atoms {
            assert!(a.children.iter().all(|c| c.len() == 1));
            assert!(a.moment_unit([0, 0]).abs() < 1e-14);
        }
    }

    #[test]
    fn raw_atoms_orthonormal_with_vanishing_moments() {
        for k in 1..=4 {
            let b = AlpertBasis::new(k).unwrap();
            for (i, x) in b.atoms.iter().enumerate() {
                for (j, y) in b.atoms.iter().enumerate() {
                    let g = x.inner_unit(y);
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((g - e).abs() < 1e-12, "k={k} ({i},{j}) {g}");
                }
                for beta in monomials(k) {
                    assert!(x.moment_unit(beta).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn moment_functional_examples() {
        let fam = AtomFamily::new(2, 0.02).unwrap();
        let unit = SquareGeom::new(0.0, 0.0, 1.0).unwrap();
        // Indicator of the unit square and x₁ as raw profiles.
        let one = raw_axis_moments(&unit.axis_x(), 2, 0);
        assert!(((one[0] + one[2]) - 1.0).abs() < 1e-15);
        let x2 = raw_axis_moments(&unit.axis_x(), 2, 2);
        assert!(((x2[0] + x2[2]) - 1.0 / 3.0).abs() < 1e-15);
        let zero = PiecewisePoly {
            kappa: 1,
            children: [vec![0.0], vec![0.0], vec![0.0], vec![0.0]],
        };
        assert_eq!(zero.moment_unit([1, 1]), 0.0);
        assert!(fam.moment(&unit, 0, Variant::Raw, [1, 0]).abs() < 1e-14);
    }

    #[test]
    fn mollifier_moments() {
        for k in 1..=6 {
            let m = Mollifier::new(0.02, k).unwrap();
            assert!((m.moment1(0) - 1.0).abs() < 1e-10);
            assert!(m.residual_moments() < 1e-10, "k={k}");
        }
        assert_eq!(Mollifier::new(0.02, 1).unwrap().coeffs.len(), 1);
        assert!(Mollifier::new(0.2, 2).is_err());
    }

    #[test]
    fn mollifier_moments_by_refined_two_dimensional_quadrature() {
        let m = Mollifier::new(0.05, 3).unwrap();
        let r = RuleBuilder::new(-0.25, 0.25)
            .order(20)
            .max_width(1.0 / 300.0)
            .build();
        let g = TensorGrid::new(r.clone(), r);
        let f = m.sample(g);
        assert!((f.moment([0, 0]).re - 1.0).abs() < 1e-10);
        for beta in [[1, 0], [0, 1], [2, 0], [1, 1], [0, 2]] {
            assert!(f.moment(beta).re.abs() < 1e-8, "{beta:?}");
        }
        // Mass is preserved by the scaling φ_ε(x) = ε^{-2} φ(x/ε).
        let eps = 0.3;
        let rs = RuleBuilder::new(-0.25 * eps, 0.25 * eps)
            .order(20)
            .max_width(eps / 300.0)
            .build();
        let gs = TensorGrid::new(rs.clone(), rs);
        let fs = SampledField2D::from_real_fn(gs, |x, y| m.phi_scaled([x, y], eps));
        assert!((fs.integrate().re - 1.0).abs() < 1e-10);
    }

    #[test]
    fn smooth_atoms_keep_vanishing_moments() {
        let unit = SquareGeom::new(0.0, 0.0, 1.0).unwrap();
        for k in 1..=4 {
            let fam = AtomFamily::new(k, 0.02).unwrap();
            for a in 0..fam.dim() {
                for beta in monomials(k) {
                    let v = fam.moment(&unit, a, Variant::Smooth, beta);
                    assert!(v.abs() < 1e-8, "k={k} a={a} {beta:?} {v}");
                }
            }
        }
    }

    #[test]
    fn smooth_atom_moments_on_sampled_grid() {
        let fam = AtomFamily::new(3, 0.05).unwrap();
        let at = fam
            .atom(&DyadicSquare::ROOT, &Placement::default(), 7)
            .unwrap();
        let f = at.smooth_field(&fam, 16).unwrap();
        for beta in monomials(3) {
            assert!(f.moment(beta).re.abs() < 1e-8, "{beta:?}");
        }
        let n2 = f.l2_norm().powi(2);
        assert!((n2 - 1.0).abs() < 10.0 * 0.05, "{n2}");
        let direct = fam.gram_block((&at.geom, Variant::Smooth), (&at.geom, Variant::Smooth))
            [7 * fam.dim() + 7];
        assert!((direct - n2).abs() < 1e-9, "{direct} {n2}");
        assert!(at.smooth_field(&fam, 3).is_err());
    }

    #[test]
    fn smooth_atom_matches_direct_convolution() {
        let fam = AtomFamily::new(2, 0.08).unwrap();
        let geom = SquareGeom::new(0.25, -0.5, 0.5).unwrap();
        let eps = fam.eta() * geom.side;
        let r = 0.25 * eps;
        for (a, p) in [
            (0usize, [0.5, -0.25]),
            (3, [0.25 + 0.3 * r, -0.25 + 0.1 * r]),
            (5, [0.7, 0.0 + 0.5 * r]),
        ] {
            let rule = RuleBuilder::new(-r, r)
                .order(20)
                .max_width(r / 10.0)
                .build();
            let mut acc = 0.0;
            for (&u, &wu) in rule.nodes.iter().zip(&rule.weights) {
                for (&v, &wv) in rule.nodes.iter().zip(&rule.weights) {
                    let raw = fam.eval(&geom, a, Variant::Raw, [p[0] - u, p[1] - v]);
                    acc += wu * wv * raw * fam.moll.phi_scaled([u, v], eps);
                }
            }
            let s = fam.eval(&geom, a, Variant::Smooth, p);
            assert!(
                (s - acc).abs() < 1e-6 * (1.0 + acc.abs()),
                "a={a} {s} vs {acc}"
            );
        }
    }

    #[test]
    fn smooth_atom_vanishes_outside_support() {
        let fam = AtomFamily::new(3, 0.05).unwrap();
        let geom = SquareGeom::new(0.0, 0.0, 1.0).unwrap();
        let sup = geom.smooth_support(0.05);
        assert!(sup.x1 <= geom.rect().dilate(1.1).x1);
        for p in [
            [sup.x1 + 1e-9, 0.5],
            [0.5, sup.y0 - 1e-9],
            [1.2, 1.2],
            [-0.01, -0.5],
        ] {
            for a in 0..fam.dim() {
                assert_eq!(fam.eval(&geom, a, Variant::Smooth, p), 0.0);
            }
        }
    }

    #[test]
    fn raw_gram_block_is_identity() {
        let fam = AtomFamily::new(3, 0.02).unwrap();
        let g = SquareGeom::new(0.125, 0.375, 0.125).unwrap();
        let blk = fam.gram_block((&g, Variant::Raw), (&g, Variant::Raw));
        let d = fam.dim();
        for a in 0..d {
            for b in 0..d {
                let e = if a == b { 1.0 } else { 0.0 };
                assert!((blk[a * d + b] - e).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn atoms_are_affine_images_of_unit_atoms(
            level in 0i32..5, ix in 0i64..16, iy in 0i64..16, a in 0usize..9,
            u in -0.05f64..1.05, v in -0.05f64..1.05, smooth in any::<bool>()
        ) {
            let fam = AtomFamily::new(2, 0.04).unwrap();
            let n = 1i64 << level;
            let q = DyadicSquare::new(level, ix % n, iy % n).unwrap();
            let place = Placement::new([-0.25, -0.25], 0.5).unwrap();
            let geom = SquareGeom::from_dyadic(&q, &place);
            let unit = SquareGeom::new(0.0, 0.0, 1.0).unwrap();
            let variant = if smooth { Variant::Smooth } else { Variant::Raw };
            let p = [geom.x0 + u * geom.side, geom.y0 + v * geom.side];
            let lhs = fam.eval(&geom, a, variant, p);
            let rhs = fam.eval(&unit, a, variant, [u, v]) / geom.side;
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
        }
    }
}
