//! Dyadic grid over the base square, quadtree navigation, tree distance,
//! halos and separated subcollections.
//!
//! Squares live in normalized coordinates where the base square `U` is
//! `[0,1]²`. Negative levels address the chain of squares above `U`
//! (`U` sits in the lower-left quadrant of its parent).

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

/// Deepest level a square may be refined to.
pub const MAX_LEVEL: i32 = 30;
/// Number of levels above the base square the root chain extends.
pub const SUPER_LEVELS: i32 = 3;

/// Closed axis-aligned rectangle `[x0,x1] × [y0,y1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn square(x0: f64, y0: f64, side: f64) -> Self {
        Self::new(x0, x0 + side, y0, y0 + side)
    }

    pub fn is_empty(&self) -> bool {
        self.x0 > self.x1 || self.y0 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.width() * self.height()
        }
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)]
    }

    /// Concentric dilate by factor `t` (`t·R` in the usual notation).
    pub fn dilate(&self, t: f64) -> Self {
        let [cx, cy] = self.center();
        let hw = 0.5 * t * self.width();
        let hh = 0.5 * t * self.height();
        Self::new(cx - hw, cx + hw, cy - hh, cy + hh)
    }

    pub fn contains_closed(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    pub fn contains_open(&self, p: [f64; 2]) -> bool {
        p[0] > self.x0 && p[0] < self.x1 && p[1] > self.y0 && p[1] < self.y1
    }

    pub fn intersection(&self, o: &Rect) -> Rect {
        Rect::new(
            self.x0.max(o.x0),
            self.x1.min(o.x1),
            self.y0.max(o.y0),
            self.y1.min(o.y1),
        )
    }

    /// Closed rectangle strictly inside the open rectangle `o`.
    pub fn inside_open(&self, o: &Rect) -> bool {
        self.x0 > o.x0 && self.x1 < o.x1 && self.y0 > o.y0 && self.y1 < o.y1
    }

    /// Euclidean distance between the two closed rectangles.
    pub fn distance(&self, o: &Rect) -> f64 {
        let dx = (o.x0 - self.x1).max(self.x0 - o.x1).max(0.0);
        let dy = (o.y0 - self.y1).max(self.y0 - o.y1).max(0.0);
        dx.hypot(dy)
    }
}

/// Node of the quadtree: side `2^{-level}`, lower-left corner
/// `(ix·2^{-level}, iy·2^{-level})`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DyadicSquare {
    pub level: i32,
    pub ix: i64,
    pub iy: i64,
}

impl DyadicSquare {
    pub const ROOT: DyadicSquare = DyadicSquare {
        level: 0,
        ix: 0,
        iy: 0,
    };

    pub fn new(level: i32, ix: i64, iy: i64) -> Result<Self> {
        if level < -SUPER_LEVELS {
            return Err(invalid("level", format!("{level} is above the root chain")));
        }
        if level > MAX_LEVEL {
            return Err(Error::DepthOverflow {
                level,
                max: MAX_LEVEL,
            });
        }
        Ok(Self { level, ix, iy })
    }

    pub fn side(&self) -> f64 {
        (-self.level as f64).exp2()
    }

    pub fn corner(&self) -> [f64; 2] {
        let h = self.side();
        [self.ix as f64 * h, self.iy as f64 * h]
    }

    pub fn center(&self) -> [f64; 2] {
        let h = self.side();
        [(self.ix as f64 + 0.5) * h, (self.iy as f64 + 0.5) * h]
    }

    pub fn rect(&self) -> Rect {
        let [x, y] = self.corner();
        Rect::square(x, y, self.side())
    }

    /// True when the square lies inside the base square `[0,1]²`.
    pub fn in_base(&self) -> bool {
        if self.level < 0 {
            return false;
        }
        let n = 1i64 << self.level;
        (0..n).contains(&self.ix) && (0..n).contains(&self.iy)
    }

    /// The four children in the order lower-left, lower-right, upper-left, upper-right.
    pub fn children(&self) -> Result<[DyadicSquare; 4]> {
        if self.level >= MAX_LEVEL {
            return Err(Error::DepthOverflow {
                level: self.level + 1,
                max: MAX_LEVEL,
            });
        }
        let (l, x, y) = (self.level + 1, 2 * self.ix, 2 * self.iy);
        Ok([
            DyadicSquare {
                level: l,
                ix: x,
                iy: y,
            },
            DyadicSquare {
                level: l,
                ix: x + 1,
                iy: y,
            },
            DyadicSquare {
                level: l,
                ix: x,
                iy: y + 1,
            },
            DyadicSquare {
                level: l,
                ix: x + 1,
                iy: y + 1,
            },
        ])
    }

    /// Position (0..4) of this square among its parent's children.
    pub fn child_index(&self) -> usize {
        (self.ix.rem_euclid(2) + 2 * self.iy.rem_euclid(2)) as usize
    }

    pub fn parent(&self) -> Option<DyadicSquare> {
        if self.level <= -SUPER_LEVELS {
            return None;
        }
        Some(DyadicSquare {
            level: self.level - 1,
            ix: self.ix.div_euclid(2),
            iy: self.iy.div_euclid(2),
        })
    }

    /// Ancestor at `level` (or `self` when `level == self.level`).
    pub fn ancestor(&self, level: i32) -> Option<DyadicSquare> {
        if level > self.level || level < -SUPER_LEVELS {
            return None;
        }
        let sh = (self.level - level) as u32;
        Some(DyadicSquare {
            level,
            ix: self.ix >> sh,
            iy: self.iy >> sh,
        })
    }

    pub fn contains(&self, other: &DyadicSquare) -> bool {
        other.ancestor(self.level).is_some_and(|a| a == *self)
    }

    /// All descendants at `level` (row-major, bottom row first).
    pub fn descendants(&self, level: i32) -> Vec<DyadicSquare> {
        if level < self.level {
            return Vec::new();
        }
        let k = (level - self.level) as u32;
        let n = 1i64 << k;
        let mut out = Vec::with_capacity((n * n) as usize);
        for dy in 0..n {
            for dx in 0..n {
                out.push(DyadicSquare {
                    level,
                    ix: (self.ix << k) + dx,
                    iy: (self.iy << k) + dy,
                });
            }
        }
        out
    }

    pub fn key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for DyadicSquare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.level, self.ix, self.iy)
    }
}

impl FromStr for DyadicSquare {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Parse(format!("square address `{s}`")));
        }
        let p = |t: &str| {
            t.trim()
                .parse::<i64>()
                .map_err(|_| Error::Parse(format!("square address `{s}`")))
        };
        let level = p(parts[0])? as i32;
        DyadicSquare::new(level, p(parts[1])?, p(parts[2])?)
    }
}

/// Length of the tree path joining `a` and `b`.
pub fn dtree(a: &DyadicSquare, b: &DyadicSquare) -> Result<u32> {
    let top = a.level.min(b.level);
    let (mut x, mut y) = (
        a.ancestor(top).expect("level within chain"),
        b.ancestor(top).expect("level within chain"),
    );
    while x != y {
        match (x.parent(), y.parent()) {
            (Some(px), Some(py)) => {
                x = px;
                y = py;
            }
            _ => {
                return Err(Error::DifferentTrees {
                    a: a.key(),
                    b: b.key(),
                })
            }
        }
    }
    Ok(((a.level - x.level) + (b.level - x.level)) as u32)
}

/// Subcollection of one grid level, optionally certified separated.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSlice {
    pub level: i32,
    pub squares: Vec<DyadicSquare>,
    pub separation: Option<f64>,
}

impl GridSlice {
    /// Every square of the base grid at `level`.
    pub fn full(level: i32) -> Result<Self> {
        if !(0..=MAX_LEVEL).contains(&level) {
            return Err(invalid("level", format!("{level} outside 0..={MAX_LEVEL}")));
        }
        Ok(Self {
            level,
            squares: DyadicSquare::ROOT.descendants(level),
            separation: None,
        })
    }

    /// Descendants of `parent` at `level`.
    pub fn within(parent: &DyadicSquare, level: i32) -> Self {
        Self {
            level,
            squares: parent.descendants(level),
            separation: None,
        }
    }

    pub fn len(&self) -> usize {
        self.squares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.squares.is_empty()
    }

    /// Smallest Euclidean gap between distinct members.
    pub fn min_gap(&self) -> Option<f64> {
        let rects: Vec<Rect> = self.squares.iter().map(|q| q.rect()).collect();
        let mut best: Option<f64> = None;
        for i in 0..rects.len() {
            for j in (i + 1)..rects.len() {
                let d = rects[i].distance(&rects[j]);
                best = Some(best.map_or(d, |b: f64| b.min(d)));
            }
        }
        best
    }
}

/// Squares at level `s` whose indices have parities `(px, py)`; pairwise gaps
/// are at least `2^{-s}`, and the four parity classes partition the level.
pub fn separated_slice(s: i32, parity: (u8, u8)) -> Result<GridSlice> {
    if s < 1 {
        return Err(invalid("s", "separated slices need s >= 1"));
    }
    if parity.0 > 1 || parity.1 > 1 {
        return Err(invalid("parity", "parities must be 0 or 1"));
    }
    let full = GridSlice::full(s)?;
    let squares = full
        .squares
        .into_iter()
        .filter(|q| q.ix.rem_euclid(2) == parity.0 as i64 && q.iy.rem_euclid(2) == parity.1 as i64)
        .collect();
    Ok(GridSlice {
        level: s,
        squares,
        separation: Some((-s as f64).exp2()),
    })
}

/// Minimum tree distance from `j` to the members of `slice`.
pub fn dtree_to_slice(j: &DyadicSquare, slice: &GridSlice) -> Result<u32> {
    if slice.is_empty() {
        return Err(Error::Empty("slice"));
    }
    let mut best = u32::MAX;
    for q in &slice.squares {
        best = best.min(dtree(j, q)?);
    }
    Ok(best)
}

/// Annular frame `(1+η)K \ (1−η)K`: closed outer rectangle minus open inner one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub outer: Rect,
    pub inner: Rect,
}

impl Frame {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.outer.contains_closed(p) && !self.inner.contains_open(p)
    }

    pub fn area(&self) -> f64 {
        self.outer.area() - self.inner.area()
    }

    /// Exact test for a common point of two frames.
    pub fn intersects(&self, o: &Frame) -> bool {
        let r = self.outer.intersection(&o.outer);
        if r.is_empty() {
            return false;
        }
        let h = &self.inner;
        let pieces = [
            Rect::new(r.x0, r.x1.min(h.x0), r.y0, r.y1),
            Rect::new(r.x0.max(h.x1), r.x1, r.y0, r.y1),
            Rect::new(r.x0, r.x1, r.y0, r.y1.min(h.y0)),
            Rect::new(r.x0, r.x1, r.y0.max(h.y1), r.y1),
        ];
        pieces
            .iter()
            .any(|p| !p.is_empty() && !p.inside_open(&o.inner))
    }
}

/// The η-halo of a square: union of the frames of its four children.
#[derive(Clone, Debug, PartialEq)]
pub struct Halo {
    pub frames: [Frame; 4],
}

impl Halo {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.frames.iter().any(|f| f.contains(p))
    }

    pub fn intersects(&self, o: &Halo) -> bool {
        self.frames
            .iter()
            .any(|a| o.frames.iter().any(|b| a.intersects(b)))
    }

    /// Bounding box of the halo, which equals `(1+η/2)J`.
    pub fn bounds(&self) -> Rect {
        let mut b = self.frames[0].outer;
        for f in &self.frames[1..] {
            b.x0 = b.x0.min(f.outer.x0);
            b.x1 = b.x1.max(f.outer.x1);
            b.y0 = b.y0.min(f.outer.y0);
            b.y1 = b.y1.max(f.outer.y1);
        }
        b
    }
}

pub fn halo(j: &DyadicSquare, eta: f64) -> Result<Halo> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(invalid("eta", "halo needs 0 < eta < 1"));
    }
    let kids = j.children()?;
    let f = |k: &DyadicSquare| Frame {
        outer: k.rect().dilate(1.0 + eta),
        inner: k.rect().dilate(1.0 - eta),
    };
    Ok(Halo {
        frames: [f(&kids[0]), f(&kids[1]), f(&kids[2]), f(&kids[3])],
    })
}

/// Exact area of the halo of a square of side `side` (frames of adjacent
/// children overlap, so this is less than the sum of the frame areas).
pub fn halo_area(side: f64, eta: f64) -> f64 {
    let k = 0.5 * side;
    (12.0 * eta - 3.0 * eta * eta) * k * k
}

pub fn halos_intersect(i: &DyadicSquare, j: &DyadicSquare, eta: f64) -> Result<bool> {
    if i == j {
        return Ok(true);
    }
    let (a, b) = (halo(i, eta)?, halo(j, eta)?);
    if a.bounds().intersection(&b.bounds()).is_empty() {
        return Ok(false);
    }
    Ok(a.intersects(&b))
}

/// Decide `ν ≤ ℓ(U_k) ≤ 2ν` for each square and pairwise distances `≥ ν`.
pub fn nu_disjoint_triple(u: [&Rect; 3], nu: f64) -> Result<bool> {
    if !(nu > 0.0 && nu < 1.0) {
        return Err(invalid("nu", "needs 0 < nu < 1"));
    }
    let tol = 1e-12;
    for r in u {
        let side = r.width();
        if (r.height() - side).abs() > tol * side.max(1.0) {
            return Err(invalid("U", "triple members must be squares"));
        }
        if side < nu - tol || side > 2.0 * nu + tol {
            return Ok(false);
        }
    }
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        if u[a].distance(u[b]) < nu - tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Number of squares at levels `0..=depth` at tree distance `l` from `j`
/// whose halos meet the halo of `j`.
pub fn omega_count(j: &DyadicSquare, l: u32, eta: f64, depth: i32) -> Result<usize> {
    let mut n = 0;
    for level in 0..=depth {
        // Only levels reachable by a path of length l.
        if (level - j.level).unsigned_abs() > l {
            continue;
        }
        for q in DyadicSquare::ROOT.descendants(level) {
            if dtree(j, &q)? == l && halos_intersect(j, &q, eta)? {
                n += 1;
            }
        }
    }
    Ok(n)
}

/// Affine placement of the normalized base square in physical coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub origin: [f64; 2],
    pub side: f64,
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            origin: [0.0, 0.0],
            side: 1.0,
        }
    }
}

impl Placement {
    pub fn new(origin: [f64; 2], side: f64) -> Result<Self> {
        if !(side > 0.0 && side.is_finite()) {
            return Err(invalid("side", "placement side must be positive"));
        }
        Ok(Self { origin, side })
    }

    pub fn to_physical(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.origin[0] + self.side * p[0],
            self.origin[1] + self.side * p[1],
        ]
    }

    pub fn to_normalized(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.origin[0]) / self.side,
            (p[1] - self.origin[1]) / self.side,
        ]
    }

    pub fn rect(&self, r: &Rect) -> Rect {
        let [x0, y0] = self.to_physical([r.x0, r.y0]);
        Rect::new(
            x0,
            x0 + self.side * r.width(),
            y0,
            y0 + self.side * r.height(),
        )
    }

    pub fn square(&self, q: &DyadicSquare) -> Rect {
        self.rect(&q.rect())
    }

    /// Physical side length of `q`.
    pub fn side_of(&self, q: &DyadicSquare) -> f64 {
        self.side * q.side()
    }

    pub fn center_of(&self, q: &DyadicSquare) -> [f64; 2] {
        self.to_physical(q.center())
    }
}
