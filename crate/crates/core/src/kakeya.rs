//! δ-tube families and rasterized overlap functionals.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::quad::pairwise_sum;

/// Default raster cap in cells.
pub const DEFAULT_SUBSAMPLE: usize = 1;
/// Default raster spacing as a fraction of `δ`.
pub const DEFAULT_SPACING_FRACTION: f64 = 0.125;
pub const DEFAULT_CELL_CAP: usize = 1 << 28;
/// Polar radius of the default direction cap: `2π(1 − cos θ) = 1`, so a δ-net has about `δ⁻²` points.
pub fn default_cap_radius() -> f64 {
    (1.0 - 1.0 / (2.0 * PI)).acos()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> Result<[f64; 3]> {
    let n = dot(a, a).sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(invalid("direction", "must be a nonzero finite vector"));
    }
    Ok([a[0] / n, a[1] / n, a[2] / n])
}

/// Angle between two unit directions.
pub fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos()
}

/// Solid cylinder of length `length` and diameter `width` about `center + t·dir`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tube {
    pub dir: [f64; 3],
    pub center: [f64; 3],
    pub width: f64,
    pub length: f64,
}

impl Tube {
    pub fn new(dir: [f64; 3], center: [f64; 3], width: f64) -> Result<Self> {
        if !(width > 0.0 && width <= 1.0) {
            return Err(invalid("width", "must lie in (0, 1]"));
        }
        Ok(Self {
            dir: normalize(dir)?,
            center,
            width,
            length: 1.0,
        })
    }

    pub fn volume(&self) -> f64 {
        PI * 0.25 * self.width * self.width * self.length
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let v = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let a = dot(v, self.dir);
        if a.abs() > 0.5 * self.length {
            return false;
        }
        let r2 = dot(v, v) - a * a;
        r2 <= 0.25 * self.width * self.width
    }

    /// Axis-aligned bounding box `[lo, hi]`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for i in 0..3 {
            let along = 0.5 * self.length * self.dir[i].abs();
            let across = 0.5 * self.width * (1.0 - self.dir[i] * self.dir[i]).max(0.0).sqrt();
            lo[i] = self.center[i] - along - across;
            hi[i] = self.center[i] + along + across;
        }
        (lo, hi)
    }
}

/// Spherical cap of directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cap {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Cap {
    pub fn around_e3() -> Self {
        Self {
            center: [0.0, 0.0, 1.0],
            radius: default_cap_radius(),
        }
    }

    pub fn contains(&self, d: [f64; 3]) -> bool {
        angle(self.center, d) <= self.radius + 1e-12
    }

    /// Cap of angular `radius` centered at polar angle `tilt`, azimuth `azimuth`.
    pub fn tilted(tilt: f64, azimuth: f64, radius: f64) -> Self {
        Self {
            center: [
                tilt.sin() * azimuth.cos(),
                tilt.sin() * azimuth.sin(),
                tilt.cos(),
            ],
            radius,
        }
    }

    /// Rotate a direction given in coordinates where the cap center is `e₃`.
    fn place(&self, d: [f64; 3]) -> [f64; 3] {
        let c = self.center;
        // orthonormal frame (e1, e2, c)
        let helper = if c[2].abs() < 0.9 {
            [0.0, 0.0, 1.0]
        } else {
            [1.0, 0.0, 0.0]
        };
        let e1 = normalize(cross(helper, c)).expect("non-parallel helper");
        let e2 = cross(c, e1);
        [
            d[0] * e1[0] + d[1] * e2[0] + d[2] * c[0],
            d[0] * e1[1] + d[1] * e2[1] + d[2] * c[1],
            d[0] * e1[2] + d[1] * e2[2] + d[2] * c[2],
        ]
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// δ-separated directions in a cap: rings at polar angles `kδ`, each ring
/// filled at the largest azimuth count keeping neighbours `δ` apart.
pub fn ring_directions(cap: &Cap, delta: f64, azimuth_offset: f64) -> Vec<[f64; 3]> {
    let mut out = vec![cap.center];
    let mut k = 1;
    while k as f64 * delta <= cap.radius + 1e-12 {
        let th = k as f64 * delta;
        let (s, c) = th.sin_cos();
        let cosphi = ((delta.cos() - c * c) / (s * s)).clamp(-1.0, 1.0);
        let dphi = cosphi.acos();
        let n = ((2.0 * PI / dphi) * (1.0 - 1e-12)).floor().max(1.0) as usize;
        let off = (azimuth_offset + k as f64 * 0.618_033_988_75).fract() * 2.0 * PI / n as f64;
        for j in 0..n {
            let ph = off + 2.0 * PI * j as f64 / n as f64;
            out.push(cap.place([s * ph.cos(), s * ph.sin(), c]));
        }
        k += 1;
    }
    out
}

/// How tube centers and direction nets are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamilyKind {
    /// Every tube centered at the origin.
    Bush,
    /// Ring-lattice directions, centers on a planar lattice in `[−¾,¾]² × {0}`.
    Grid,
    /// Randomly rotated rings, centers uniform in `[−1,1]² × [−½,½]`.
    Random,
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bush" => Ok(Self::Bush),
            "grid" | "grid-directions" => Ok(Self::Grid),
            "random" => Ok(Self::Random),
            o => Err(Error::Parse(format!("tube family kind `{o}`"))),
        }
    }
}

/// Tubes whose directions are pairwise at angle `≥ δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeFamily {
    pub tubes: Vec<Tube>,
    pub delta: f64,
    /// Verified minimum pairwise direction angle (`π` for fewer than two tubes).
    pub min_angle: f64,
}

impl TubeFamily {
    pub fn new(tubes: Vec<Tube>, delta: f64) -> Result<Self> {
        let min_angle = (0..tubes.len())
            .into_par_iter()
            .map(|i| {
                tubes[i + 1..]
                    .iter()
                    .map(|t| angle(tubes[i].dir, t.dir))
                    .fold(PI, f64::min)
            })
            .reduce(|| PI, f64::min);
        if min_angle < delta * (1.0 - 1e-9) {
            return Err(invalid(
                "tubes",
                format!("directions {min_angle:.4e} apart, need {delta:.4e}"),
            ));
        }
        Ok(Self {
            tubes,
            delta,
            min_angle,
        })
    }

    pub fn empty(delta: f64) -> Self {
        Self {
            tubes: Vec::new(),
            delta,
            min_angle: PI,
        }
    }

    pub fn len(&self) -> usize {
        self.tubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tubes.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dir1,dir2,dir3,c1,c2,c3,delta\n");
        for t in &self.tubes {
            s.push_str(&format!(
                "{:.12},{:.12},{:.12},{:.12},{:.12},{:.12},{}\n",
                t.dir[0], t.dir[1], t.dir[2], t.center[0], t.center[1], t.center[2], t.width
            ));
        }
        s
    }
}

/// Family with directions in the default cap about `e₃`.
pub fn generate_family(kind: FamilyKind, delta: f64, seed: u64) -> Result<TubeFamily> {
    generate_family_in_cap(kind, delta, &Cap::around_e3(), seed)
}

pub fn generate_family_in_cap(
    kind: FamilyKind,
    delta: f64,
    cap: &Cap,
    seed: u64,
) -> Result<TubeFamily> {
    if !(delta > 0.0 && delta <= 0.5) {
        return Err(invalid("delta", "must lie in (0, 1/2]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..5 {
        let offset = if kind == FamilyKind::Random {
            rng.gen::<f64>()
        } else {
            0.0
        };
        let dirs = ring_directions(cap, delta, offset);
        let g = (dirs.len() as f64).sqrt().ceil() as usize;
        let tubes: Vec<Tube> = dirs
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let c = match kind {
                    FamilyKind::Bush => [0.0; 3],
                    FamilyKind::Grid => [
                        -0.75 + 1.5 * ((k % g) as f64 + 0.5) / g as f64,
                        -0.75 + 1.5 * ((k / g) as f64 + 0.5) / g as f64,
                        0.0,
                    ],
                    FamilyKind::Random => [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-0.5..0.5),
                    ],
                };
                Tube::new(*d, c, delta)
            })
            .collect::<Result<_>>()?;
        if let Ok(f) = TubeFamily::new(tubes, delta) {
            return Ok(f);
        }
    }
    Err(Error::Generation(format!(
        "no δ-separated family after 5 attempts (δ = {delta})"
    )))
}

/// Three caps tilted by `tilt` from `e₃` at azimuths 0°, 120°, 240°, each of
/// radius chosen so distinct caps stay at least `nu` apart.
pub fn nu_separated_caps(tilt: f64, nu: f64) -> Result<[Cap; 3]> {
    let c: Vec<Cap> = (0..3)
        .map(|k| Cap::tilted(tilt, 2.0 * PI * k as f64 / 3.0, 0.0))
        .collect();
    let gap = angle(c[0].center, c[1].center);
    let radius = 0.5 * (gap - nu);
    if radius <= 0.0 {
        return Err(invalid(
            "nu",
            format!("caps at tilt {tilt} are only {gap:.4} apart"),
        ));
    }
    Ok([0, 1, 2].map(|k| Cap { radius, ..c[k] }))
}

/// Box of raster cells on the lattice `−2 + spacing·(ℤ + ½)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterSpec {
    pub spacing: f64,
    /// Index of the first cell on each axis.
    pub lo: [i64; 3],
    pub dims: [usize; 3],
    /// Sub-samples per cell edge; a cell stores the hit count over `sub³` points.
    pub sub: usize,
}

impl RasterSpec {
    /// Smallest cell box covering every tube of the families.
    pub fn covering(families: &[&TubeFamily], spacing: f64, cap: usize) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(invalid("spacing", "must be positive"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for t in families.iter().flat_map(|f| &f.tubes) {
            let (a, b) = t.bounds();
            for i in 0..3 {
                lo[i] = lo[i].min(a[i]);
                hi[i] = hi[i].max(b[i]);
            }
        }
        if lo[0] > hi[0] {
            return Ok(Self {
                spacing,
                lo: [0; 3],
                dims: [0; 3],
                sub: DEFAULT_SUBSAMPLE,
            });
        }
        let mut ilo = [0i64; 3];
        let mut dims = [0usize; 3];
        for i in 0..3 {
            let a = ((lo[i].max(-2.0) + 2.0) / spacing).floor() as i64;
            let b = ((hi[i].min(2.0) + 2.0) / spacing).ceil() as i64;
            ilo[i] = a;
            dims[i] = (b - a).max(0) as usize;
        }
        let cells = dims.iter().product::<usize>();
        if cells > cap {
            return Err(Error::MemoryGuard { cells, cap });
        }
        Ok(Self {
            spacing,
            lo: ilo,
            dims,
            sub: DEFAULT_SUBSAMPLE,
        })
    }

    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn center(&self, i: usize, k: usize) -> f64 {
        -2.0 + self.spacing * ((self.lo[i] + k as i64) as f64 + 0.5)
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(3)
    }

    pub fn with_sub(self, sub: usize) -> Result<Self> {
        if sub == 0 || sub > 8 {
            return Err(invalid("sub", "must be in 1..=8"));
        }
        Ok(Self { sub, ..self })
    }

    /// Offset of sub-sample `m` from the cell center.
    fn offset(&self, m: usize) -> f64 {
        self.spacing * ((m as f64 + 0.5) / self.sub as f64 - 0.5)
    }

    fn level(&self, c: u16) -> f64 {
        c as f64 / self.sub.pow(3) as f64
    }
}

/// Sub-sampled hit counts of `Σ_T 1_T`; cell value is `count / sub³`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub spec: RasterSpec,
    pub counts: Vec<u16>,
}

impl Raster {
    pub fn new(family: &TubeFamily, spec: RasterSpec) -> Result<Self> {
        let sub = spec.sub;
        if family.len() * sub.pow(3) > u16::MAX as usize {
            return Err(invalid(
                "family",
                "too many tubes for u16 counts at this sub-sampling",
            ));
        }
        let [nx, ny, _] = spec.dims;
        let mut counts = vec![0u16; spec.cells()];
        if nx * ny == 0 {
            return Ok(Self { spec, counts });
        }
        let bounds: Vec<([f64; 3], [f64; 3])> = family.tubes.iter().map(|t| t.bounds()).collect();
        let h = spec.spacing;
        let index = |i: usize, x: f64| ((x + 2.0) / h - 0.5).floor() as i64 - spec.lo[i];
        let off: Vec<f64> = (0..sub).map(|m| spec.offset(m)).collect();
        counts
            .par_chunks_mut(nx * ny)
            .enumerate()
            .for_each(|(kz, plane)| {
                for &oz in &off {
                    let z = spec.center(2, kz) + oz;
                    for (t, (lo, hi)) in family.tubes.iter().zip(&bounds) {
                        if z < lo[2] || z > hi[2] {
                            continue;
                        }
                        // cross-section at height z lies within the ellipse around the axis point
                        let a = if t.dir[2].abs() > 1e-12 {
                            (z - t.center[2]) / t.dir[2]
                        } else {
                            0.0
                        };
                        let reach = if t.dir[2].abs() > 1e-12 {
                            0.5 * t.width / t.dir[2].abs() + h
                        } else {
                            f64::INFINITY
                        };
                        let mut rng = [[0i64; 2]; 2];
                        for i in 0..2 {
                            let c = t.center[i] + a * t.dir[i];
                            let (l, u) = ((c - reach).max(lo[i]), (c + reach).min(hi[i]));
                            rng[i] = [
                                index(i, l).max(0),
                                (index(i, u) + 1).min(spec.dims[i] as i64 - 1),
                            ];
                        }
                        for iy in rng[1][0]..=rng[1][1] {
                            let yc = spec.center(1, iy as usize);
                            for ix in rng[0][0]..=rng[0][1] {
                                let xc = spec.center(0, ix as usize);
                                let mut hits = 0u16;
                                for &oy in &off {
                                    for &ox in &off {
                                        hits += t.contains([xc + ox, yc + oy, z]) as u16;
                                    }
                                }
                                let c = &mut plane[iy as usize * nx + ix as usize];
                                *c = c.saturating_add(hits);
                            }
                        }
                    }
                }
            });
        Ok(Self { spec, counts })
    }

    pub fn value(&self, cell: usize) -> f64 {
        self.spec.level(self.counts[cell])
    }

    /// `(Σ cell·count^p)^{1/p}`.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(invalid("p", "must be positive"));
        }
        let terms: Vec<f64> = self
            .counts
            .par_iter()
            .map(|c| {
                if *c == 0 {
                    0.0
                } else {
                    self.spec.level(*c).powf(p)
                }
            })
            .collect();
        Ok((self.spec.cell_volume() * pairwise_sum(&terms)).powf(1.0 / p))
    }
}

/// `‖Σ_{T ∈ 𝕋} 1_T‖_{L^p}` on a raster of spacing `δ/8` (or `spacing` if given).
pub fn overlap_norm(family: &TubeFamily, p: f64, spacing: Option<f64>, cap: usize) -> Result<f64> {
    let spec = RasterSpec::covering(
        &[family],
        spacing.unwrap_or(DEFAULT_SPACING_FRACTION * family.delta),
        cap,
    )?;
    Raster::new(family, spec)?.lp_norm(p)
}

/// `‖Π_k Σ_{T ∈ 𝕋_k} 1_T‖_{L^{1/2}}` on a shared raster.
pub fn trilinear_overlap_norm(
    families: [&TubeFamily; 3],
    spacing: Option<f64>,
    cap: usize,
) -> Result<f64> {
    if families.iter().any(|f| f.is_empty()) {
        return Ok(0.0);
    }
    let delta = families
        .iter()
        .map(|f| f.delta)
        .fold(f64::INFINITY, f64::min);
    let spec = RasterSpec::covering(
        &families,
        spacing.unwrap_or(DEFAULT_SPACING_FRACTION * delta),
        cap,
    )?;
    let r: Vec<Raster> = families
        .iter()
        .map(|f| Raster::new(f, spec))
        .collect::<Result<_>>()?;
    let terms: Vec<f64> = (0..spec.cells())
        .into_par_iter()
        .map(|i| (r[0].value(i) * r[1].value(i) * r[2].value(i)).sqrt())
        .collect();
    Ok((spec.cell_volume() * pairwise_sum(&terms)).powi(2))
}
