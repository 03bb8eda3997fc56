//! Frame operators on a truncated dyadic window: synthesis `S`, analysis
//! `S*`, `T = SS*`, Neumann inversion of `T`, doubly smooth
//! pseudoprojections, square functions and tree-distance decay scans.
//!
//! Frame expansions are coefficient vectors `c` over (square, atom) pairs of
//! the window; `S c = Σ c_{I,a} h^η_{I,a}`. Since `T S c = S (G c)` with `G`
//! the Gram matrix of the smooth atoms, every operator acting on expansions
//! is applied in coefficient space through the cached sparse Gram blocks.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::alpert::{axis_gram, AtomFamily, SquareGeom, Variant, MOLLIFIER_HALF_WIDTH};
use crate::dyadic::{dtree, halo, DyadicSquare, Halo, Placement, Rect};
use crate::error::{invalid, Error, Result};
use crate::quad::{RuleBuilder, SampledField2D, TensorGrid};
use crate::stats::{fit_log2, LineFit};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Inclusive range of grid levels kept by the truncation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub min: i32,
    pub max: i32,
}

impl Window {
    pub fn new(min: i32, max: i32) -> Result<Self> {
        if min < 0 || max < min {
            return Err(invalid(
                "window",
                format!("[{min}, {max}] is not a valid level range"),
            ));
        }
        if max > 8 {
            return Err(invalid("window", "levels above 8 are not supported"));
        }
        Ok(Self { min, max })
    }

    pub fn levels(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn contains(&self, q: &DyadicSquare) -> bool {
        q.level >= self.min && q.level <= self.max && q.in_base()
    }

    /// All base squares of the window, coarse levels first.
    pub fn squares(&self) -> Vec<DyadicSquare> {
        (self.min..=self.max)
            .flat_map(|l| DyadicSquare::ROOT.descendants(l))
            .collect()
    }
}

/// Sparse map from (square, atom index) to coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMap {
    pub window: Window,
    pub entries: BTreeMap<(DyadicSquare, usize), Complex64>,
}

impl CoefficientMap {
    pub fn new(window: Window) -> Self {
        Self {
            window,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, q: DyadicSquare, a: usize, v: Complex64) -> Result<()> {
        if !self.window.contains(&q) {
            return Err(Error::WindowMismatch(format!(
                "{q} outside levels [{}, {}]",
                self.window.min, self.window.max
            )));
        }
        self.entries.insert((q, a), v);
        Ok(())
    }

    pub fn get(&self, q: &DyadicSquare, a: usize) -> Complex64 {
        self.entries.get(&(*q, a)).copied().unwrap_or(ZERO)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// CSV rows `square,atom,re,im` in key order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("square,atom,re,im\n");
        for ((q, a), v) in &self.entries {
            s.push_str(&format!("{q},{a},{:.17e},{:.17e}\n", v.re, v.im));
        }
        s
    }
}

/// Outcome of a truncated Neumann series.
#[derive(Clone, Debug)]
pub struct NeumannReport {
    pub terms: usize,
    /// Largest observed ratio of consecutive term norms.
    pub max_ratio: f64,
    pub last_term_norm: f64,
    pub contraction: f64,
}

/// Frame context: window, atom family, and cached sparse Gram blocks of the
/// smooth atoms over halo-intersecting pairs.
#[derive(Clone, Debug)]
pub struct FrameContext {
    pub fam: AtomFamily,
    pub place: Placement,
    pub window: Window,
    pub squares: Vec<DyadicSquare>,
    pub geoms: Vec<SquareGeom>,
    index: HashMap<DyadicSquare, usize>,
    /// `blocks[i] = [(j, G_ij)]` with `G_ij[a·d+b] = ⟨h^η_{i,a}, h^η_{j,b}⟩`.
    pub blocks: Vec<Vec<(usize, Vec<f64>)>>,
    pub tol: f64,
    pub max_terms: usize,
    contraction: f64,
}

impl FrameContext {
    pub fn new(fam: AtomFamily, place: Placement, window: Window) -> Result<Self> {
        let squares = window.squares();
        if squares.is_empty() {
            return Err(Error::Empty("window"));
        }
        let geoms: Vec<SquareGeom> = squares
            .iter()
            .map(|q| SquareGeom::from_dyadic(q, &place))
            .collect();
        let index = squares.iter().enumerate().map(|(i, q)| (*q, i)).collect();
        let eta = fam.eta();
        let halos: Vec<Halo> = squares
            .iter()
            .map(|q| halo(q, eta))
            .collect::<Result<_>>()?;
        let bounds: Vec<Rect> = halos.iter().map(|h| h.bounds()).collect();

        // 1D Gram matrices between axis intervals, keyed by (level, index) pairs.
        let mut intervals: Vec<(i32, i64)> = Vec::new();
        for l in window.min..=window.max {
            for k in 0..(1i64 << l) {
                intervals.push((l, k));
            }
        }
        let axis_of = |iv: &(i32, i64)| {
            let q = DyadicSquare {
                level: iv.0,
                ix: iv.1,
                iy: 0,
            };
            SquareGeom::from_dyadic(&q, &place).axis_x()
        };
        let axis_of_y = |iv: &(i32, i64)| {
            let q = DyadicSquare {
                level: iv.0,
                ix: 0,
                iy: iv.1,
            };
            SquareGeom::from_dyadic(&q, &place).axis_y()
        };
        let kappa = fam.kappa();
        let moll = fam.moll.clone();
        let pairs: Vec<((i32, i64), (i32, i64))> = intervals
            .iter()
            .flat_map(|a| intervals.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a <= b)
            .collect();
        let compute = |ax: &(dyn Fn(&(i32, i64)) -> crate::alpert::Axis + Sync)| -> HashMap<((i32, i64), (i32, i64)), Vec<f64>> {
            pairs
                .par_iter()
                .filter_map(|(a, b)| {
                    let (pa, pb) = (ax(a), ax(b));
                    let ra = MOLLIFIER_HALF_WIDTH * eta * pa.side;
                    let rb = MOLLIFIER_HALF_WIDTH * eta * pb.side;
                    if pa.lo - ra >= pb.hi() + rb || pb.lo - rb >= pa.hi() + ra {
                        return None;
                    }
                    let m = axis_gram((&pa, Variant::Smooth), (&pb, Variant::Smooth), kappa, &moll);
                    Some(((*a, *b), m))
                })
                .collect()
        };
        let gx = compute(&axis_of);
        let gy = if place.origin[0] == place.origin[1] {
            gx.clone()
        } else {
            compute(&axis_of_y)
        };
        let n = fam.n();
        let lookup = |tab: &HashMap<((i32, i64), (i32, i64)), Vec<f64>>,
                      a: (i32, i64),
                      b: (i32, i64)|
         -> Option<Vec<f64>> {
            if a <= b {
                tab.get(&(a, b)).cloned()
            } else {
                tab.get(&(b, a)).map(|m| transpose(m, n))
            }
        };

        let upper: Vec<Vec<(usize, Vec<f64>)>> = (0..squares.len())
            .into_par_iter()
            .map(|i| {
                let qi = &squares[i];
                let mut row = Vec::new();
                for j in i..squares.len() {
                    if bounds[i].intersection(&bounds[j]).is_empty() {
                        continue;
                    }
                    if i != j && !halos[i].intersects(&halos[j]) {
                        continue;
                    }
                    let qj = &squares[j];
                    let (Some(mx), Some(my)) = (
                        lookup(&gx, (qi.level, qi.ix), (qj.level, qj.ix)),
                        lookup(&gy, (qi.level, qi.iy), (qj.level, qj.iy)),
                    ) else {
                        continue;
                    };
                    let mut blk = fam.gram_from_axes(&mx, &my, geoms[i].side * geoms[j].side);
                    if i == j {
                        let t = transpose(&blk, fam.dim());
                        blk.iter_mut()
                            .zip(&t)
                            .for_each(|(x, y)| *x = 0.5 * (*x + y));
                    }
                    row.push((j, blk));
                }
                row
            })
            .collect();
        let d = fam.dim();
        let mut blocks: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); squares.len()];
        for (i, row) in upper.into_iter().enumerate() {
            for (j, blk) in row {
                if i != j {
                    blocks[j].push((i, transpose(&blk, d)));
                }
                blocks[i].push((j, blk));
            }
        }
        for row in blocks.iter_mut() {
            row.sort_by_key(|(j, _)| *j);
        }
        let mut ctx = Self {
            fam,
            place,
            window,
            squares,
            geoms,
            index,
            blocks,
            tol: 1e-8,
            max_terms: 400,
            contraction: f64::NAN,
        };
        ctx.contraction = ctx.estimate_contraction(30);
        Ok(ctx)
    }

    pub fn d(&self) -> usize {
        self.fam.dim()
    }

    /// Length of coefficient vectors.
    pub fn len(&self) -> usize {
        self.squares.len() * self.d()
    }

    pub fn is_empty(&self) -> bool {
        self.squares.is_empty()
    }

    pub fn index_of(&self, q: &DyadicSquare) -> Option<usize> {
        self.index.get(q).copied()
    }

    /// Cached estimate of `‖I − T‖` on the span of the window's smooth atoms.
    pub fn contraction(&self) -> f64 {
        self.contraction
    }

    /// Gram entry `⟨h^η_{i,a}, h^η_{j,b}⟩` (exactly 0 for disjoint halos).
    pub fn gram_entry(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        let d = self.d();
        match self.blocks[i].binary_search_by_key(&j, |(k, _)| *k) {
            Ok(p) => self.blocks[i][p].1[a * d + b],
            Err(_) => 0.0,
        }
    }

    pub fn gram_block(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.blocks[i]
            .binary_search_by_key(&j, |(k, _)| *k)
            .ok()
            .map(|p| self.blocks[i][p].1.as_slice())
    }

    /// Number of stored Gram blocks.
    pub fn nnz_blocks(&self) -> usize {
        self.blocks.iter().map(|r| r.len()).sum()
    }
}

fn transpose(m: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = m[i * n + j];
        }
    }
    t
}

impl FrameContext {
    /// `G x`.
    pub fn gram_apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let d = self.d();
        let mut out = vec![ZERO; x.len()];
        out.par_chunks_mut(d).enumerate().for_each(|(i, oi)| {
            for (j, blk) in &self.blocks[i] {
                let xj = &x[j * d..(j + 1) * d];
                if xj.iter().all(|v| *v == ZERO) {
                    continue;
                }
                for a in 0..d {
                    let row = &blk[a * d..(a + 1) * d];
                    let mut acc = ZERO;
                    for (g, v) in row.iter().zip(xj) {
                        acc += v * *g;
                    }
                    oi[a] += acc;
                }
            }
        });
        out
    }

    /// `⟨S x, S y⟩ = Σ x_i conj(y_j) G_ij`.
    pub fn inner(&self, x: &[Complex64], y: &[Complex64]) -> Complex64 {
        let gx = self.gram_apply(x);
        // G is real symmetric: Σ_j conj(y_j) (G x)_j.
        gx.iter().zip(y).map(|(a, b)| a * b.conj()).sum()
    }

    /// `‖S x‖_{L²}`.
    pub fn norm(&self, x: &[Complex64]) -> f64 {
        self.inner(x, x).re.max(0.0).sqrt()
    }

    /// Power iteration for the spectral radius of `I − G` in the `G`-inner
    /// product, i.e. `‖I − T‖` restricted to the span of the smooth atoms.
    pub fn estimate_contraction(&self, iters: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut v: Vec<Complex64> = (0..self.len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0))
            .collect();
        let nv = self.norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut est = 0.0;
        for _ in 0..iters {
            let gv = self.gram_apply(&v);
            let w: Vec<Complex64> = v.iter().zip(&gv).map(|(a, b)| a - b).collect();
            let nw = self.norm(&w);
            est = nw;
            if nw == 0.0 {
                break;
            }
            v = w.into_iter().map(|x| x / nw).collect();
        }
        est
    }

    /// Partial sum `Σ_{n≤N} (I−G)^n c` with `N` the first index whose term
    /// has `‖S term‖ < tol·‖S c‖`.
    pub fn neumann(&self, c: &[Complex64], tol: f64) -> Result<(Vec<Complex64>, NeumannReport)> {
        if !(self.contraction < 1.0) {
            return Err(Error::NoContraction {
                estimate: self.contraction,
            });
        }
        let base = self.norm(c);
        let mut sum = c.to_vec();
        let report = |terms, max_ratio, last| NeumannReport {
            terms,
            max_ratio,
            last_term_norm: last,
            contraction: self.contraction,
        };
        if base == 0.0 {
            return Ok((sum, report(0, 0.0, 0.0)));
        }
        let mut term = c.to_vec();
        let mut prev = base;
        let mut max_ratio: f64 = 0.0;
        for n in 1..=self.max_terms {
            let g = self.gram_apply(&term);
            for (t, gv) in term.iter_mut().zip(&g) {
                *t -= gv;
            }
            let nt = self.norm(&term);
            max_ratio = max_ratio.max(nt / prev);
            prev = nt;
            for (s, t) in sum.iter_mut().zip(&term) {
                *s += t;
            }
            if nt < tol * base {
                return Ok((sum, report(n, max_ratio, nt / base)));
            }
        }
        Err(Error::NeumannStalled {
            tol,
            terms: self.max_terms,
            last: prev / base,
        })
    }

    /// Coefficients of `T⁻¹ (S c)`.
    pub fn invert_t(&self, c: &[Complex64], tol: f64) -> Result<(Vec<Complex64>, NeumannReport)> {
        self.check_len(c)?;
        self.neumann(c, tol)
    }

    fn check_len(&self, c: &[Complex64]) -> Result<()> {
        if c.len() != self.len() {
            return Err(Error::WindowMismatch(format!(
                "coefficient vector of length {} for a window with {} coefficients",
                c.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Coefficients `⟨T⁻¹ S c, h^η_{I,a}⟩` for every (I, a): the blocks of all
    /// doubly smooth pseudoprojections at once.
    pub fn pseudoprojection_coefficients(
        &self,
        c: &[Complex64],
        tol: f64,
    ) -> Result<(Vec<Complex64>, NeumannReport)> {
        let (x, rep) = self.invert_t(c, tol)?;
        Ok((self.gram_apply(&x), rep))
    }

    /// `△^η_I (S c)` as a coefficient vector supported on the block of `I`.
    pub fn pseudoprojection(
        &self,
        c: &[Complex64],
        q: &DyadicSquare,
        tol: f64,
    ) -> Result<Vec<Complex64>> {
        let i = self
            .index_of(q)
            .ok_or_else(|| Error::WindowMismatch(format!("{q} not in window")))?;
        let (p, _) = self.pseudoprojection_coefficients(c, tol)?;
        let d = self.d();
        let mut out = vec![ZERO; self.len()];
        out[i * d..(i + 1) * d].copy_from_slice(&p[i * d..(i + 1) * d]);
        Ok(out)
    }

    /// Relative L² residual of `Σ_I △^η_I f − f` for `f = S c`.
    pub fn reproduction_residual(&self, c: &[Complex64], tol: f64) -> Result<(f64, NeumannReport)> {
        let (p, rep) = self.pseudoprojection_coefficients(c, tol)?;
        let diff: Vec<Complex64> = p.iter().zip(c).map(|(a, b)| a - b).collect();
        let nf = self.norm(c);
        if nf == 0.0 {
            return Ok((0.0, rep));
        }
        Ok((self.norm(&diff) / nf, rep))
    }

    /// Random frame-supported expansion with i.i.d. uniform coefficients.
    pub fn random_expansion(&self, rng: &mut impl Rng) -> Vec<Complex64> {
        (0..self.len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0))
            .collect()
    }

    /// Unit coefficient vector at `(i, a)`.
    pub fn unit(&self, i: usize, a: usize) -> Vec<Complex64> {
        let mut e = vec![ZERO; self.len()];
        e[i * self.d() + a] = Complex64::new(1.0, 0.0);
        e
    }

    pub fn to_map(&self, c: &[Complex64]) -> CoefficientMap {
        let d = self.d();
        let mut m = CoefficientMap::new(self.window);
        for (i, q) in self.squares.iter().enumerate() {
            for a in 0..d {
                let v = c[i * d + a];
                if v != ZERO {
                    m.entries.insert((*q, a), v);
                }
            }
        }
        m
    }

    pub fn from_map(&self, m: &CoefficientMap) -> Result<Vec<Complex64>> {
        if m.window != self.window {
            return Err(Error::WindowMismatch(format!(
                "map window [{}, {}] vs context [{}, {}]",
                m.window.min, m.window.max, self.window.min, self.window.max
            )));
        }
        let d = self.d();
        let mut c = vec![ZERO; self.len()];
        for ((q, a), v) in &m.entries {
            let i = self
                .index_of(q)
                .ok_or_else(|| Error::WindowMismatch(format!("{q} not in window")))?;
            if *a >= d {
                return Err(invalid("atom", format!("{a} >= {d}")));
            }
            c[i * d + a] = *v;
        }
        Ok(c)
    }
}

/// Local patch of a synthesized field: index ranges into the grid axes and values.
struct Patch {
    x0: usize,
    y0: usize,
    nx: usize,
    values: Vec<Complex64>,
}

fn node_range(nodes: &[f64], lo: f64, hi: f64) -> (usize, usize) {
    let a = nodes.partition_point(|x| *x < lo);
    let b = nodes.partition_point(|x| *x <= hi);
    (a, b.max(a))
}

impl FrameContext {
    /// Physical support of the atoms of square `i`.
    pub fn support(&self, i: usize, variant: Variant) -> Rect {
        match variant {
            Variant::Raw => self.geoms[i].rect(),
            Variant::Smooth => self.geoms[i].smooth_support(self.fam.eta()),
        }
    }

    /// Tensor Gauss grid over the physical support of the window's atoms,
    /// with panels aligned to every dyadic edge and refined smoothing bands.
    pub fn working_grid(&self, order: usize, band_panels: usize) -> Arc<TensorGrid> {
        let eta = self.fam.eta();
        let fine = (-(self.window.max + 1) as f64).exp2();
        let r0 = MOLLIFIER_HALF_WIDTH * eta * (-(self.window.min) as f64).exp2();
        let axis = |origin: f64| {
            let s = self.place.side;
            let mut b = RuleBuilder::new(origin - s * r0, origin + s * (1.0 + r0))
                .order(order)
                .max_width(s * fine)
                .band_panels(band_panels);
            let steps = 1i64 << (self.window.max + 1);
            for k in 0..=steps {
                b.breakpoint(origin + s * k as f64 * fine);
            }
            for l in self.window.min..=self.window.max {
                let rho = MOLLIFIER_HALF_WIDTH * eta * (-l as f64).exp2();
                let m = 1i64 << (l + 1);
                for k in 0..=m {
                    let p = k as f64 / m as f64;
                    b.band(origin + s * (p - rho), origin + s * (p + rho));
                }
            }
            b.build()
        };
        TensorGrid::new(axis(self.place.origin[0]), axis(self.place.origin[1]))
    }

    fn patch(
        &self,
        i: usize,
        c: &[Complex64],
        variant: Variant,
        grid: &TensorGrid,
    ) -> Option<Patch> {
        let d = self.d();
        let n = self.fam.n();
        let ci = &c[i * d..(i + 1) * d];
        if ci.iter().all(|v| *v == ZERO) {
            return None;
        }
        let re: Vec<f64> = ci.iter().map(|v| v.re).collect();
        let im: Vec<f64> = ci.iter().map(|v| v.im).collect();
        let (mre, mim) = (self.fam.combine(&re), self.fam.combine(&im));
        let sup = self.support(i, variant);
        let (xa, xb) = node_range(&grid.x.nodes, sup.x0, sup.x1);
        let (ya, yb) = node_range(&grid.y.nodes, sup.y0, sup.y1);
        let (nx, ny) = (xb - xa, yb - ya);
        if nx == 0 || ny == 0 {
            return None;
        }
        let geom = &self.geoms[i];
        let k = self.fam.kappa();
        let moll = &self.fam.moll;
        let mut px = vec![0.0; nx * n];
        for (r, x) in grid.x.nodes[xa..xb].iter().enumerate() {
            crate::alpert::profiles(
                &geom.axis_x(),
                variant,
                k,
                moll,
                *x,
                &mut px[r * n..(r + 1) * n],
            );
        }
        let mut py = vec![0.0; ny * n];
        for (r, y) in grid.y.nodes[ya..yb].iter().enumerate() {
            crate::alpert::profiles(
                &geom.axis_y(),
                variant,
                k,
                moll,
                *y,
                &mut py[r * n..(r + 1) * n],
            );
        }
        // tmp[iy][i] = Σ_j M[i][j] Py[iy][j]
        let inv = 1.0 / geom.side;
        let mut tmp = vec![ZERO; ny * n];
        for iy in 0..ny {
            let pyr = &py[iy * n..(iy + 1) * n];
            for a in 0..n {
                let mut acc = ZERO;
                for j in 0..n {
                    acc += Complex64::new(mre[a * n + j], mim[a * n + j]) * pyr[j];
                }
                tmp[iy * n + a] = acc * inv;
            }
        }
        let mut values = vec![ZERO; nx * ny];
        for iy in 0..ny {
            let t = &tmp[iy * n..(iy + 1) * n];
            for ix in 0..nx {
                let pxr = &px[ix * n..(ix + 1) * n];
                let mut acc = ZERO;
                for a in 0..n {
                    acc += t[a] * pxr[a];
                }
                values[iy * nx + ix] = acc;
            }
        }
        Some(Patch {
            x0: xa,
            y0: ya,
            nx,
            values,
        })
    }

    fn add_patch(field: &mut SampledField2D, p: &Patch) {
        let gnx = field.grid.x.len();
        for (r, row) in p.values.chunks(p.nx).enumerate() {
            let base = (p.y0 + r) * gnx + p.x0;
            for (v, x) in field.values[base..base + p.nx].iter_mut().zip(row) {
                *v += x;
            }
        }
    }

    /// `Σ c_{I,a} h_{I,a}` (raw or smooth) on `grid`.
    pub fn synthesize(
        &self,
        c: &[Complex64],
        variant: Variant,
        grid: Arc<TensorGrid>,
    ) -> Result<SampledField2D> {
        self.check_len(c)?;
        let patches: Vec<Patch> = (0..self.squares.len())
            .into_par_iter()
            .filter_map(|i| self.patch(i, c, variant, &grid))
            .collect();
        let mut field = SampledField2D::zeros(grid);
        for p in &patches {
            Self::add_patch(&mut field, p);
        }
        Ok(field)
    }

    /// `⟨g, h_{I,a}⟩` for every (I, a) by quadrature on `g`'s grid.
    pub fn analyze(&self, g: &SampledField2D, variant: Variant) -> Vec<Complex64> {
        let d = self.d();
        let n = self.fam.n();
        let grid = &g.grid;
        let gnx = grid.x.len();
        let k = self.fam.kappa();
        let moll = &self.fam.moll;
        let blocks: Vec<Vec<Complex64>> = (0..self.squares.len())
            .into_par_iter()
            .map(|i| {
                let sup = self.support(i, variant);
                let (xa, xb) = node_range(&grid.x.nodes, sup.x0, sup.x1);
                let (ya, yb) = node_range(&grid.y.nodes, sup.y0, sup.y1);
                let geom = &self.geoms[i];
                // B[i][j] = Σ_{x,y} w g Px[i] Py[j]
                let mut px = vec![0.0; n];
                let mut py = vec![0.0; n];
                let mut b = vec![ZERO; n * n];
                let mut rowacc = vec![ZERO; n];
                for iy in ya..yb {
                    let y = grid.y.nodes[iy];
                    crate::alpert::profiles(&geom.axis_y(), variant, k, moll, y, &mut py);
                    if py.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    rowacc.iter_mut().for_each(|v| *v = ZERO);
                    for ix in xa..xb {
                        let v = g.values[iy * gnx + ix];
                        if v == ZERO {
                            continue;
                        }
                        crate::alpert::profiles(
                            &geom.axis_x(),
                            variant,
                            k,
                            moll,
                            grid.x.nodes[ix],
                            &mut px,
                        );
                        let wv = v * grid.x.weights[ix];
                        for a in 0..n {
                            if px[a] != 0.0 {
                                rowacc[a] += wv * px[a];
                            }
                        }
                    }
                    let wy = grid.y.weights[iy];
                    for a in 0..n {
                        if rowacc[a] == ZERO {
                            continue;
                        }
                        for j in 0..n {
                            b[a * n + j] += rowacc[a] * (py[j] * wy);
                        }
                    }
                }
                let inv = 1.0 / geom.side;
                (0..d)
                    .map(|a| {
                        let m = &self.fam.basis.matrices[a];
                        m.iter().zip(&b).map(|(x, y)| y * *x).sum::<Complex64>() * inv
                    })
                    .collect()
            })
            .collect();
        blocks.concat()
    }

    /// `S c` on the working grid.
    pub fn apply_s(&self, c: &CoefficientMap, grid: Arc<TensorGrid>) -> Result<SampledField2D> {
        let v = self.from_map(c)?;
        self.synthesize(&v, Variant::Smooth, grid)
    }

    /// `S* g`: coefficients `⟨g, h^η_{I,a}⟩`.
    pub fn apply_s_star(&self, g: &SampledField2D) -> CoefficientMap {
        let v = self.analyze(g, Variant::Smooth);
        self.to_map(&v)
    }

    /// `T g = Σ ⟨g, h^η_I⟩ h^η_I` by quadrature on `g`'s grid.
    pub fn apply_t(&self, g: &SampledField2D) -> Result<SampledField2D> {
        let v = self.analyze(g, Variant::Smooth);
        self.synthesize(&v, Variant::Smooth, g.grid.clone())
    }

    /// `(Σ_I |△^η_I f|²)^{1/2}` on `grid` for `f = S c`.
    pub fn square_function(
        &self,
        c: &[Complex64],
        tol: f64,
        grid: Arc<TensorGrid>,
    ) -> Result<SampledField2D> {
        let (p, _) = self.pseudoprojection_coefficients(c, tol)?;
        let d = self.d();
        let patches: Vec<Patch> = (0..self.squares.len())
            .into_par_iter()
            .filter_map(|i| {
                let mut only = vec![ZERO; self.len()];
                only[i * d..(i + 1) * d].copy_from_slice(&p[i * d..(i + 1) * d]);
                self.patch(i, &only, Variant::Smooth, &grid).map(|mut pt| {
                    pt.values
                        .iter_mut()
                        .for_each(|v| *v = Complex64::new(v.norm_sqr(), 0.0));
                    pt
                })
            })
            .collect();
        let mut field = SampledField2D::zeros(grid);
        for pt in &patches {
            Self::add_patch(&mut field, pt);
        }
        field
            .values
            .iter_mut()
            .for_each(|v| *v = Complex64::new(v.re.sqrt(), 0.0));
        Ok(field)
    }
}

/// One row of a decay table.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayRow {
    pub dtree: u32,
    pub max_abs: f64,
    pub count_pairs: usize,
}

/// Per-tree-distance maxima with a log₂ slope fitted over `fit_range`.
#[derive(Clone, Debug)]
pub struct DecayScan {
    pub rows: Vec<DecayRow>,
    pub fit_range: (u32, u32),
    pub fit: Option<LineFit>,
}

impl DecayScan {
    /// Build from `(dtree, |value|)` samples; zero values do not count as pairs.
    pub fn from_samples(
        samples: impl IntoIterator<Item = (u32, f64)>,
        fit_range: (u32, u32),
    ) -> Self {
        let mut by_d: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for (d, v) in samples {
            if v == 0.0 {
                continue;
            }
            let e = by_d.entry(d).or_insert((0.0, 0));
            e.0 = e.0.max(v);
            e.1 += 1;
        }
        let rows: Vec<DecayRow> = by_d
            .into_iter()
            .map(|(d, (m, c))| DecayRow {
                dtree: d,
                max_abs: m,
                count_pairs: c,
            })
            .collect();
        let mut s = Self {
            rows,
            fit_range,
            fit: None,
        };
        s.refit(fit_range);
        s
    }

    pub fn refit(&mut self, fit_range: (u32, u32)) {
        self.fit_range = fit_range;
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter(|r| r.dtree >= fit_range.0 && r.dtree <= fit_range.1)
            .map(|r| (r.dtree as f64, r.max_abs))
            .unzip();
        self.fit = fit_log2(&xs, &ys);
    }

    /// Default fit range: drop `d = 0, 1` and the largest distance, cap at `hi`.
    pub fn default_range(&self, hi: u32) -> (u32, u32) {
        let dmax = self.rows.iter().map(|r| r.dtree).max().unwrap_or(0);
        (2, hi.min(dmax.saturating_sub(1)))
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }

    pub fn max_at(&self, d: u32) -> Option<f64> {
        self.rows.iter().find(|r| r.dtree == d).map(|r| r.max_abs)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dtree,max_abs,count_pairs\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6e},{}\n",
                r.dtree, r.max_abs, r.count_pairs
            ));
        }
        s
    }
}

/// Which square pairs a Gram scan includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairFilter {
    All,
    /// Pairs at the same level.
    SameLevel,
    /// Pairs where one square contains the other.
    Nested,
}

/// Tables for the entries of `T⁻¹` and `T⁻²` against smooth atoms.
#[derive(Clone, Debug)]
pub struct LocalizationScan {
    /// `max |⟨T⁻¹h^η_J, h^η_I⟩|` per tree distance.
    pub t_inv: DecayScan,
    /// `max |⟨T⁻²h^η_J, h^η_I⟩|` per tree distance.
    pub t_inv2: DecayScan,
    /// `max Σ_n |⟨(I−T)^n h^η_J, h^η_I⟩|` per tree distance: the termwise
    /// majorant of the Neumann series for `T⁻¹`.
    pub majorant: DecayScan,
    pub max_terms: usize,
    pub references: Vec<DyadicSquare>,
}

impl FrameContext {
    /// `(dtree, max_{a,b} |⟨h^η_{J,b}, h^η_{I,a}⟩|)` over stored blocks.
    pub fn gram_decay_scan(&self, filter: PairFilter, fit_hi: u32) -> Result<DecayScan> {
        if self.window.levels() < 2 {
            return Err(invalid("window", "decay scans need at least two levels"));
        }
        let mut samples = Vec::new();
        for (i, row) in self.blocks.iter().enumerate() {
            for (j, blk) in row {
                if *j < i {
                    continue;
                }
                let (qi, qj) = (&self.squares[i], &self.squares[*j]);
                let keep = match filter {
                    PairFilter::All => true,
                    PairFilter::SameLevel => qi.level == qj.level,
                    PairFilter::Nested => qi.contains(qj) || qj.contains(qi),
                };
                if !keep {
                    continue;
                }
                let m = blk.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                samples.push((dtree(qi, qj)?, m));
            }
        }
        let mut scan = DecayScan::from_samples(samples, (2, fit_hi));
        let r = scan.default_range(fit_hi);
        scan.refit(r);
        Ok(scan)
    }

    /// Entries of `T⁻¹` and `T⁻²` between the smooth atoms of the reference
    /// squares and every square of the window, via the Neumann series.
    pub fn well_localized_scan(
        &self,
        references: &[DyadicSquare],
        tol: f64,
        fit_hi: u32,
    ) -> Result<LocalizationScan> {
        if !(self.contraction < 1.0) {
            return Err(Error::NoContraction {
                estimate: self.contraction,
            });
        }
        let d = self.d();
        let refs: Vec<usize> = references
            .iter()
            .map(|q| {
                self.index_of(q)
                    .ok_or_else(|| Error::WindowMismatch(format!("{q} not in window")))
            })
            .collect::<Result<_>>()?;
        let jobs: Vec<(usize, usize)> = refs
            .iter()
            .flat_map(|&j| (0..d).map(move |b| (j, b)))
            .collect();
        type Cols = (usize, Vec<f64>, Vec<f64>, Vec<f64>, usize);
        let cols: Vec<Cols> = jobs
            .par_iter()
            .map(|&(j, b)| -> Result<Cols> {
                let e = self.unit(j, b);
                let base = self.norm(&e);
                let mut term = e.clone();
                let mut sum = e.clone();
                let mut gterm = self.gram_apply(&term);
                let mut lit: Vec<Complex64> = gterm.clone();
                let mut maj: Vec<f64> = gterm.iter().map(|v| v.norm()).collect();
                let mut n = 0;
                loop {
                    n += 1;
                    if n > self.max_terms {
                        return Err(Error::NeumannStalled {
                            tol,
                            terms: self.max_terms,
                            last: self.norm(&term) / base,
                        });
                    }
                    for (t, g) in term.iter_mut().zip(&gterm) {
                        *t -= g;
                    }
                    for (s, t) in sum.iter_mut().zip(&term) {
                        *s += t;
                    }
                    gterm = self.gram_apply(&term);
                    for ((l, m), g) in lit.iter_mut().zip(maj.iter_mut()).zip(&gterm) {
                        *l += g;
                        *m += g.norm();
                    }
                    if self.norm(&term) < tol * base {
                        break;
                    }
                }
                Ok((
                    j,
                    lit.iter().map(|v| v.norm()).collect(),
                    sum.iter().map(|v| v.norm()).collect(),
                    maj,
                    n,
                ))
            })
            .collect::<Result<_>>()?;
        let mut s1 = Vec::new();
        let mut s2 = Vec::new();
        let mut s3 = Vec::new();
        let mut max_terms = 0;
        for (j, lit, inv2, maj, n) in &cols {
            max_terms = max_terms.max(*n);
            for i in 0..self.squares.len() {
                let dist = dtree(&self.squares[i], &self.squares[*j])?;
                let blk = i * d..(i + 1) * d;
                let m = |v: &[f64]| v[blk.clone()].iter().cloned().fold(0.0, f64::max);
                s1.push((dist, m(lit)));
                s2.push((dist, m(inv2)));
                s3.push((dist, m(maj)));
            }
        }
        let mk = |s: Vec<(u32, f64)>| {
            let mut sc = DecayScan::from_samples(s, (2, fit_hi));
            let r = sc.default_range(fit_hi);
            sc.refit(r);
            sc
        };
        Ok(LocalizationScan {
            t_inv: mk(s1),
            t_inv2: mk(s2),
            majorant: mk(s3),
            max_terms,
            references: references.to_vec(),
        })
    }
}

impl FrameContext {
    /// Solve `G x = b` by conjugate gradients (G is symmetric positive definite
    /// on a window whose smooth atoms are independent).
    pub fn solve_gram(
        &self,
        b: &[Complex64],
        rel_tol: f64,
        max_iter: usize,
    ) -> Result<(Vec<Complex64>, usize)> {
        self.check_len(b)?;
        let dot = |x: &[Complex64], y: &[Complex64]| -> Complex64 {
            x.iter().zip(y).map(|(a, c)| a.conj() * c).sum()
        };
        let bn = dot(b, b).re.sqrt();
        let mut x = vec![ZERO; b.len()];
        if bn == 0.0 {
            return Ok((x, 0));
        }
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut rr = dot(&r, &r).re;
        for it in 1..=max_iter {
            let gp = self.gram_apply(&p);
            let alpha = rr / dot(&p, &gp).re;
            for i in 0..x.len() {
                x[i] += p[i] * alpha;
                r[i] -= gp[i] * alpha;
            }
            let rr_new = dot(&r, &r).re;
            if rr_new.sqrt() < rel_tol * bn {
                return Ok((x, it));
            }
            let beta = rr_new / rr;
            for i in 0..p.len() {
                p[i] = r[i] + p[i] * beta;
            }
            rr = rr_new;
        }
        Err(Error::NeumannStalled {
            tol: rel_tol,
            terms: max_iter,
            last: rr.sqrt() / bn,
        })
    }

    /// Orthogonal projection of a sampled field onto the span of the smooth
    /// atoms: coefficients `c` with `G c = S* g`.
    pub fn project_field(&self, g: &SampledField2D) -> Result<Vec<Complex64>> {
        let b = self.analyze(g, Variant::Smooth);
        Ok(self.solve_gram(&b, 1e-12, 10 * self.len().max(10))?.0)
    }

    /// `T⁻¹ g` for a frame-supported sampled field; inputs farther than
    /// `1e-6` (relative) from the span are rejected.
    pub fn invert_t_field(
        &self,
        g: &SampledField2D,
        tol: f64,
    ) -> Result<(SampledField2D, NeumannReport)> {
        let c = self.project_field(g)?;
        let back = self.synthesize(&c, Variant::Smooth, g.grid.clone())?;
        let gn = g.l2_norm();
        if gn > 0.0 && back.sub(g)?.l2_norm() > 1e-6 * gn {
            return Err(invalid("g", "input is not supported on the frame window"));
        }
        let (x, rep) = self.invert_t(&c, tol)?;
        Ok((self.synthesize(&x, Variant::Smooth, g.grid.clone())?, rep))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alpert::AtomFamily;
    use crate::dyadic::halos_intersect;

    fn ctx(k: usize, eta: f64, w: (i32, i32)) -> FrameContext {
        let fam = AtomFamily::new(k, eta).unwrap();
        FrameContext::new(fam, Placement::default(), Window::new(w.0, w.1).unwrap()).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn window_validation() {
        assert!(Window::new(2, 1).is_err());
        assert!(Window::new(-1, 1).is_err());
        assert_eq!(Window::new(0, 2).unwrap().squares().len(), 21);
    }

    #[test]
    fn gram_is_symmetric_and_gated_by_halos() {
        let c = ctx(2, 0.05, (0, 2));
        let d = c.d();
        for i in 0..c.squares.len() {
            for j in 0..c.squares.len() {
                let meets = halos_intersect(&c.squares[i], &c.squares[j], 0.05).unwrap();
                if !meets {
                    assert!(c.gram_block(i, j).is_none());
                    let direct = c.fam.gram_block(
                        (&c.geoms[i], Variant::Smooth),
                        (&c.geoms[j], Variant::Smooth),
                    );
                    assert!(
                        direct.iter().all(|v| v.abs() < 1e-13),
                        "{} {}",
                        c.squares[i],
                        c.squares[j]
                    );
                }
                for a in 0..d {
                    for b in 0..d {
                        assert_eq!(c.gram_entry(i, a, j, b), c.gram_entry(j, b, i, a));
                    }
                }
            }
        }
    }

    #[test]
    fn synthesis_examples() {
        let c = ctx(2, 0.05, (0, 1));
        let grid = c.working_grid(4, 2);
        let zero = c
            .apply_s(&CoefficientMap::new(c.window), grid.clone())
            .unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let mut m = CoefficientMap::new(c.window);
        let q1 = DyadicSquare::new(1, 1, 0).unwrap();
        m.insert(DyadicSquare::ROOT, 3, Complex64::new(0.7, 0.0))
            .unwrap();
        m.insert(q1, 5, Complex64::new(-1.3, 0.2)).unwrap();
        assert!(m
            .insert(
                DyadicSquare::new(3, 0, 0).unwrap(),
                0,
                Complex64::new(1.0, 0.0)
            )
            .is_err());
        let f = c.apply_s(&m, grid.clone()).unwrap();
        let g0 = c.geoms[0];
        let g1 = c.geoms[c.index_of(&q1).unwrap()];
        let mut r = rng();
        for _ in 0..100 {
            let i = r.gen_range(0..grid.len());
            let p = grid.point(i);
            let expect = Complex64::new(0.7, 0.0) * c.fam.eval(&g0, 3, Variant::Smooth, p)
                + Complex64::new(-1.3, 0.2) * c.fam.eval(&g1, 5, Variant::Smooth, p);
            assert!((f.values[i] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn analysis_duality_and_gram_diagonal() {
        let c = ctx(2, 0.05, (0, 1));
        let grid = c.working_grid(8, 4);
        let mut r = rng();
        let f = c.random_expansion(&mut r);
        let g = SampledField2D::from_real_fn(grid.clone(), |x, y| (3.0 * x).sin() + y * y - 0.2);
        // <S f, g> = <f, S* g> with f given by raw coefficients.
        let sf = c.synthesize(&f, Variant::Smooth, grid.clone()).unwrap();
        let lhs = sf.inner(&g).unwrap();
        let sg = c.analyze(&g, Variant::Smooth);
        let rhs: Complex64 = f.iter().zip(&sg).map(|(a, b)| a * b.conj()).sum();
        assert!((lhs - rhs).norm() < 1e-8 * lhs.norm().max(1.0));
        // Quadrature analysis of a smooth atom reproduces the Gram column.
        let j = c.index_of(&DyadicSquare::new(1, 0, 1).unwrap()).unwrap();
        let h = c.synthesize(&c.unit(j, 2), Variant::Smooth, grid).unwrap();
        let coef = c.analyze(&h, Variant::Smooth);
        let d = c.d();
        assert!((coef[j * d + 2].re - c.gram_entry(j, 2, j, 2)).abs() < 1e-9);
        assert!((coef[j * d + 2].re - 1.0).abs() < 0.05);
        for i in 0..c.squares.len() {
            for a in 0..d {
                assert!((coef[i * d + a].re - c.gram_entry(i, a, j, 2)).abs() < 1e-9);
            }
        }
        assert!(c
            .analyze(&SampledField2D::zeros(h.grid.clone()), Variant::Smooth)
            .iter()
            .all(|v| *v == ZERO));
    }

    #[test]
    fn t_is_self_adjoint_and_matches_gram() {
        let c = ctx(2, 0.05, (0, 1));
        let grid = c.working_grid(8, 4);
        let mut r = rng();
        for _ in 0..20 {
            let g1 = c
                .synthesize(&c.random_expansion(&mut r), Variant::Smooth, grid.clone())
                .unwrap();
            let g2 = SampledField2D::from_real_fn(grid.clone(), |x, y| {
                (x - 0.3) * (y + 0.1) + (5.0 * y).cos()
            });
            let a = c.apply_t(&g1).unwrap().inner(&g2).unwrap();
            let b = g1.inner(&c.apply_t(&g2).unwrap()).unwrap();
            assert!((a - b).norm() < 1e-8 * a.norm().max(1.0));
        }
        let e = c.unit(2, 4);
        let h = c.synthesize(&e, Variant::Smooth, grid.clone()).unwrap();
        let th = c.apply_t(&h).unwrap();
        let dense = c
            .synthesize(&c.gram_apply(&e), Variant::Smooth, grid)
            .unwrap();
        assert!(th.sub(&dense).unwrap().l2_norm() < 1e-8);
    }

    #[test]
    fn neumann_inversion() {
        let c = ctx(2, 0.02, (0, 2));
        assert!(c.contraction() < 1.0);
        let mut r = rng();
        let g = c.random_expansion(&mut r);
        let (x, rep) = c.invert_t(&g, 1e-8).unwrap();
        assert!(rep.terms <= 20, "{rep:?}");
        assert!(rep.max_ratio < 1.0);
        let tx = c.gram_apply(&x);
        let diff: Vec<Complex64> = tx.iter().zip(&g).map(|(a, b)| a - b).collect();
        assert!(c.norm(&diff) < 10.0 * 1e-8 * c.norm(&g));
        let (z, _) = c.invert_t(&vec![ZERO; c.len()], 1e-8).unwrap();
        assert!(z.iter().all(|v| *v == ZERO));
        assert!(c.invert_t(&[ZERO; 3], 1e-8).is_err());
    }

    #[test]
    fn field_inversion_matches_coefficient_inversion() {
        let c = ctx(1, 0.05, (0, 1));
        let grid = c.working_grid(8, 4);
        let mut r = rng();
        let g = c.random_expansion(&mut r);
        let field = c.synthesize(&g, Variant::Smooth, grid.clone()).unwrap();
        let (inv, _) = c.invert_t_field(&field, 1e-10).unwrap();
        let back = c.apply_t(&inv).unwrap();
        assert!(back.sub(&field).unwrap().l2_norm() < 1e-6 * field.l2_norm());
        let off = SampledField2D::from_real_fn(grid, |x, y| (x * 7.0).sin() * y);
        assert!(c.invert_t_field(&off, 1e-8).is_err());
    }

    #[test]
    fn reproducing_identity_and_projection_convergence() {
        let mut r = rng();
        let c = ctx(2, 0.02, (0, 2));
        for _ in 0..3 {
            let f = c.random_expansion(&mut r);
            let (res, _) = c.reproduction_residual(&f, 1e-8).unwrap();
            assert!(res < 1e-6, "{res}");
        }
        let q = DyadicSquare::new(1, 1, 1).unwrap();
        let f = c.random_expansion(&mut r);
        let p = c.pseudoprojection(&f, &q, 1e-8).unwrap();
        let i = c.index_of(&q).unwrap();
        let d = c.d();
        assert!(p.iter().enumerate().all(|(k, v)| k / d == i || *v == ZERO));
        assert!(c
            .pseudoprojection(&vec![ZERO; c.len()], &q, 1e-8)
            .unwrap()
            .iter()
            .all(|v| *v == ZERO));
        // Distance of a fixed smooth function to the span shrinks as the window widens.
        let mut last = f64::INFINITY;
        for w in 0..=2 {
            let cw = ctx(2, 0.02, (0, w));
            let grid = cw.working_grid(6, 4);
            let g = SampledField2D::from_real_fn(grid.clone(), |x, y| {
                if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) {
                    (6.0 * x).sin() * (5.0 * y).cos() * (x * (1.0 - x) * y * (1.0 - y)).powi(2)
                } else {
                    0.0
                }
            });
            let coef = cw.project_field(&g).unwrap();
            let res = cw
                .synthesize(&coef, Variant::Smooth, grid)
                .unwrap()
                .sub(&g)
                .unwrap()
                .l2_norm()
                / g.l2_norm();
            assert!(res < last, "w={w} {res} {last}");
            last = res;
        }
    }

    #[test]
    fn square_function_bounds() {
        let c = ctx(2, 0.02, (0, 2));
        let grid = c.working_grid(6, 4);
        let zero = c
            .square_function(&vec![ZERO; c.len()], 1e-8, grid.clone())
            .unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let e = c.unit(7, 3);
        let sq = c.square_function(&e, 1e-8, grid.clone()).unwrap();
        let f = c.synthesize(&e, Variant::Smooth, grid.clone()).unwrap();
        let ratio = sq.l2_norm() / f.l2_norm();
        assert!((0.9..=1.1).contains(&ratio), "{ratio}");
        let mut r = rng();
        for _ in 0..3 {
            let x = c.random_expansion(&mut r);
            let sq = c.square_function(&x, 1e-8, grid.clone()).unwrap();
            let f = c.synthesize(&x, Variant::Smooth, grid.clone()).unwrap();
            let ratio = sq.l2_norm() / f.l2_norm();
            assert!((0.5..=2.0).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn gram_scan_diagonal_is_near_one() {
        let c = ctx(2, 0.02, (0, 3));
        let s = c.gram_decay_scan(PairFilter::All, 6).unwrap();
        let d0 = s.max_at(0).unwrap();
        assert!((d0 - 1.0).abs() < 0.05);
        assert!(s.rows.iter().all(|r| r.max_abs > 0.0));
        assert!(s.to_csv().starts_with("dtree,max_abs,count_pairs\n"));
        assert!(ctx(2, 0.02, (1, 1))
            .gram_decay_scan(PairFilter::All, 6)
            .is_err());
    }

    #[test]
    fn coefficient_map_roundtrip() {
        let c = ctx(1, 0.05, (0, 1));
        let mut r = rng();
        let x = c.random_expansion(&mut r);
        let m = c.to_map(&x);
        assert_eq!(c.from_map(&m).unwrap(), x);
        let other = CoefficientMap::new(Window::new(0, 2).unwrap());
        assert!(c.from_map(&other).is_err());
    }
}
