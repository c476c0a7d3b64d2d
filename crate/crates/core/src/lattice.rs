//! Lattice geometry: sites of `Z^d`, integer boxes, finite site sets, and
//! blow-ups of the continuum shapes used by the experiments.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{LabError, Result};

/// Largest supported lattice dimension. Desk-scale experiments never go
/// beyond `d = 4`.
pub const MAX_DIM: usize = 4;

/// Coordinates larger than this are rejected so that sums and squared norms
/// of differences stay far away from `i32`/`i64` overflow.
pub const COORD_LIMIT: i32 = 1 << 20;

/// A site of `Z^d` stored inline.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    dim: u8,
    coords: [i32; MAX_DIM],
}

impl Point {
    pub fn new(coords: &[i32]) -> Result<Self> {
        check_dim(coords.len())?;
        if let Some(c) = coords.iter().find(|c| c.abs() > COORD_LIMIT) {
            return Err(LabError::invalid(format!("coordinate {c} exceeds {COORD_LIMIT}")));
        }
        let mut p = Point { dim: coords.len() as u8, coords: [0; MAX_DIM] };
        p.coords[..coords.len()].copy_from_slice(coords);
        Ok(p)
    }

    pub fn origin(dim: usize) -> Self {
        Point { dim: dim as u8, coords: [0; MAX_DIM] }
    }

    /// `sign * e_axis`.
    pub fn unit(dim: usize, axis: usize, sign: i32) -> Self {
        let mut p = Point::origin(dim);
        p.coords[axis] = sign;
        p
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    #[inline]
    pub fn coords(&self) -> &[i32] {
        &self.coords[..self.dim as usize]
    }

    #[inline]
    pub fn coord(&self, axis: usize) -> i32 {
        self.coords[axis]
    }

    #[inline]
    pub fn with_coord(mut self, axis: usize, value: i32) -> Self {
        self.coords[axis] = value;
        self
    }

    #[inline]
    pub fn add(&self, other: &Point) -> Point {
        let mut p = *self;
        for i in 0..self.dim() {
            p.coords[i] += other.coords[i];
        }
        p
    }

    #[inline]
    pub fn sub(&self, other: &Point) -> Point {
        let mut p = *self;
        for i in 0..self.dim() {
            p.coords[i] -= other.coords[i];
        }
        p
    }

    #[inline]
    pub fn norm_inf(&self) -> i32 {
        self.coords().iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    #[inline]
    pub fn norm1(&self) -> i64 {
        self.coords().iter().map(|&c| c.abs() as i64).sum()
    }

    #[inline]
    pub fn norm2_sq(&self) -> i64 {
        self.coords().iter().map(|&c| c as i64 * c as i64).sum()
    }

    pub fn norm2(&self) -> f64 {
        (self.norm2_sq() as f64).sqrt()
    }

    /// Coordinates as reals, optionally scaled by `1/n`.
    pub fn to_real(&self, scale: f64) -> Vec<f64> {
        self.coords().iter().map(|&c| c as f64 * scale).collect()
    }

    /// The `2d` nearest neighbours, ordered `+e_0, -e_0, +e_1, ...`.
    pub fn neighbors(&self) -> impl Iterator<Item = Point> + '_ {
        (0..2 * self.dim()).map(move |k| {
            let mut p = *self;
            p.coords[k / 2] += if k % 2 == 0 { 1 } else { -1 };
            p
        })
    }

    pub fn is_neighbor(&self, other: &Point) -> bool {
        self.dim == other.dim && self.sub(other).norm1() == 1
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.coords())
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.coords().iter().map(|c| c.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl Serialize for Point {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Point {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v: Vec<i32> = Vec::deserialize(d)?;
        Point::new(&v).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn check_dim(dim: usize) -> Result<()> {
    if !(3..=MAX_DIM).contains(&dim) {
        return Err(LabError::invalid(format!(
            "lattice dimension must be in 3..={MAX_DIM}, got {dim}"
        )));
    }
    Ok(())
}

/// Closed integer box `[lo, hi]` (inclusive on both ends), with a row-major
/// linear indexing of its sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntBox {
    pub lo: Point,
    pub hi: Point,
}

impl IntBox {
    pub fn new(lo: Point, hi: Point) -> Result<Self> {
        if lo.dim() != hi.dim() {
            return Err(LabError::DimensionMismatch { expected: lo.dim(), got: hi.dim() });
        }
        if (0..lo.dim()).any(|i| lo.coord(i) > hi.coord(i)) {
            return Err(LabError::invalid(format!("empty box {lo}..{hi}")));
        }
        Ok(IntBox { lo, hi })
    }

    /// The `l^inf` ball `B(center, r)`.
    pub fn ball(center: Point, r: i32) -> Self {
        let mut lo = center;
        let mut hi = center;
        for i in 0..center.dim() {
            lo.coords[i] -= r;
            hi.coords[i] += r;
        }
        IntBox { lo, hi }
    }

    /// `corner + [0, side)^d`.
    pub fn cube(corner: Point, side: i32) -> Self {
        let mut hi = corner;
        for i in 0..corner.dim() {
            hi.coords[i] += side - 1;
        }
        IntBox { lo: corner, hi }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.lo.dim()
    }

    #[inline]
    pub fn side(&self, axis: usize) -> usize {
        (self.hi.coord(axis) - self.lo.coord(axis) + 1) as usize
    }

    pub fn len(&self) -> usize {
        (0..self.dim()).map(|i| self.side(i)).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn contains(&self, p: &Point) -> bool {
        (0..self.dim()).all(|i| p.coord(i) >= self.lo.coord(i) && p.coord(i) <= self.hi.coord(i))
    }

    /// Whether `p` is strictly inside (not on the boundary layer).
    pub fn contains_interior(&self, p: &Point) -> bool {
        (0..self.dim()).all(|i| p.coord(i) > self.lo.coord(i) && p.coord(i) < self.hi.coord(i))
    }

    #[inline]
    pub fn index_of(&self, p: &Point) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let mut idx = 0usize;
        for i in 0..self.dim() {
            idx = idx * self.side(i) + (p.coord(i) - self.lo.coord(i)) as usize;
        }
        Some(idx)
    }

    #[inline]
    pub fn point_at(&self, mut idx: usize) -> Point {
        let mut p = self.lo;
        for i in (0..self.dim()).rev() {
            let s = self.side(i);
            p.coords[i] += (idx % s) as i32;
            idx /= s;
        }
        p
    }

    /// Linear index stride along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        (axis + 1..self.dim()).map(|i| self.side(i)).product()
    }

    pub fn iter(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(move |i| self.point_at(i))
    }

    pub fn intersect(&self, other: &IntBox) -> Option<IntBox> {
        let mut lo = self.lo;
        let mut hi = self.hi;
        for i in 0..self.dim() {
            lo.coords[i] = lo.coords[i].max(other.lo.coord(i));
            hi.coords[i] = hi.coords[i].min(other.hi.coord(i));
            if lo.coords[i] > hi.coords[i] {
                return None;
            }
        }
        Some(IntBox { lo, hi })
    }

    pub fn grow(&self, r: i32) -> IntBox {
        let mut lo = self.lo;
        let mut hi = self.hi;
        for i in 0..self.dim() {
            lo.coords[i] -= r;
            hi.coords[i] += r;
        }
        IntBox { lo, hi }
    }

    pub fn contains_box(&self, other: &IntBox) -> bool {
        self.contains(&other.lo) && self.contains(&other.hi)
    }
}

/// A finite, deduplicated, lexicographically sorted set of sites.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSet {
    sites: Vec<Point>,
    bounding_box: Option<IntBox>,
}

impl SiteSet {
    pub fn empty() -> Self {
        SiteSet { sites: Vec::new(), bounding_box: None }
    }

    pub fn from_points(mut sites: Vec<Point>) -> Result<Self> {
        if let Some(first) = sites.first() {
            let d = first.dim();
            if let Some(bad) = sites.iter().find(|p| p.dim() != d) {
                return Err(LabError::DimensionMismatch { expected: d, got: bad.dim() });
            }
        }
        sites.sort_unstable();
        sites.dedup();
        let bounding_box = bounding_box(&sites);
        Ok(SiteSet { sites, bounding_box })
    }

    pub fn from_box(b: &IntBox) -> Self {
        // Row-major order of an IntBox is lexicographic.
        SiteSet { sites: b.iter().collect(), bounding_box: Some(*b) }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.sites.first().map(|p| p.dim())
    }

    pub fn sites(&self) -> &[Point] {
        &self.sites
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.sites.iter()
    }

    pub fn bounding_box(&self) -> Option<IntBox> {
        self.bounding_box
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.sites.binary_search(p).is_ok()
    }

    pub fn position(&self, p: &Point) -> Option<usize> {
        self.sites.binary_search(p).ok()
    }

    pub fn is_subset_of(&self, other: &SiteSet) -> bool {
        self.sites.iter().all(|p| other.contains(p))
    }

    pub fn intersects(&self, other: &SiteSet) -> bool {
        let (small, large) = if self.len() <= other.len() { (self, other) } else { (other, self) };
        small.sites.iter().any(|p| large.contains(p))
    }

    pub fn union(&self, other: &SiteSet) -> SiteSet {
        let mut v = self.sites.clone();
        v.extend_from_slice(&other.sites);
        SiteSet::from_points(v).expect("union of sets with equal dimension")
    }

    /// Sites of `self` with at least one nearest neighbour outside `self`.
    pub fn inner_boundary(&self) -> SiteSet {
        let sites: Vec<Point> = self
            .sites
            .iter()
            .filter(|p| p.neighbors().any(|q| !self.contains(&q)))
            .copied()
            .collect();
        let bounding_box = bounding_box(&sites);
        SiteSet { sites, bounding_box }
    }

    /// Sites outside `self` with a nearest neighbour in `self`.
    pub fn outer_boundary(&self) -> SiteSet {
        let mut v = Vec::new();
        for p in &self.sites {
            for q in p.neighbors() {
                if !self.contains(&q) {
                    v.push(q);
                }
            }
        }
        SiteSet::from_points(v).expect("neighbours share the dimension")
    }

    pub fn translate(&self, by: &Point) -> SiteSet {
        SiteSet::from_points(self.sites.iter().map(|p| p.add(by)).collect())
            .expect("translation preserves dimension")
    }

    /// Plain text: one site per line, space-separated coordinates.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for p in &self.sites {
            let parts: Vec<String> = p.coords().iter().map(|c| c.to_string()).collect();
            writeln!(w, "{}", parts.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut pts = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let coords: std::result::Result<Vec<i32>, _> =
                line.split_whitespace().map(str::parse::<i32>).collect();
            let coords = coords
                .map_err(|e| LabError::invalid(format!("line {}: {e}", lineno + 1)))?;
            pts.push(Point::new(&coords)?);
        }
        SiteSet::from_points(pts)
    }
}

fn bounding_box(sites: &[Point]) -> Option<IntBox> {
    let first = sites.first()?;
    let mut lo = *first;
    let mut hi = *first;
    for p in sites {
        for i in 0..p.dim() {
            lo.coords[i] = lo.coords[i].min(p.coord(i));
            hi.coords[i] = hi.coords[i].max(p.coord(i));
        }
    }
    Some(IntBox { lo, hi })
}

/// An axis-aligned closed box in continuum coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl RealBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        RealBox { lo, hi }
    }

    pub fn cube(center: &[f64], half_side: f64) -> Self {
        RealBox {
            lo: center.iter().map(|c| c - half_side).collect(),
            hi: center.iter().map(|c| c + half_side).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| (h - l).max(0.0)).product()
    }

    /// Euclidean distance from `x` to the box (zero inside).
    pub fn distance(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..x.len() {
            let d = (self.lo[i] - x[i]).max(x[i] - self.hi[i]).max(0.0);
            s += d * d;
        }
        s.sqrt()
    }

    /// `l^inf` distance from `x` to the box.
    pub fn distance_inf(&self, x: &[f64]) -> f64 {
        (0..x.len())
            .map(|i| (self.lo[i] - x[i]).max(x[i] - self.hi[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn intersection_volume(&self, other: &RealBox) -> f64 {
        (0..self.dim())
            .map(|i| (self.hi[i].min(other.hi[i]) - self.lo[i].max(other.lo[i])).max(0.0))
            .product()
    }

    pub fn scaled(&self, s: f64) -> RealBox {
        RealBox {
            lo: self.lo.iter().map(|v| v * s).collect(),
            hi: self.hi.iter().map(|v| v * s).collect(),
        }
    }

    pub fn grown(&self, r: f64) -> RealBox {
        RealBox {
            lo: self.lo.iter().map(|v| v - r).collect(),
            hi: self.hi.iter().map(|v| v + r).collect(),
        }
    }

    pub fn has_interior(&self) -> bool {
        self.lo.iter().zip(&self.hi).all(|(l, h)| h > l)
    }
}

/// A finite union of closed boxes in continuum coordinates. Boxes may
/// overlap; volumes count the union.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxUnion {
    pub boxes: Vec<RealBox>,
}

impl BoxUnion {
    pub fn new(boxes: Vec<RealBox>) -> Self {
        BoxUnion { boxes }
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.boxes.first().map(|b| b.dim()).unwrap_or(0)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.contains(x))
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        self.boxes.iter().map(|b| b.distance(x)).fold(f64::INFINITY, f64::min)
    }

    pub fn bounding_box(&self) -> Option<RealBox> {
        let first = self.boxes.first()?;
        let mut lo = first.lo.clone();
        let mut hi = first.hi.clone();
        for b in &self.boxes {
            for i in 0..lo.len() {
                lo[i] = lo[i].min(b.lo[i]);
                hi[i] = hi[i].max(b.hi[i]);
            }
        }
        Some(RealBox { lo, hi })
    }

    /// Shortest box side, the smallest geometric feature.
    pub fn min_side(&self) -> f64 {
        self.boxes
            .iter()
            .flat_map(|b| b.lo.iter().zip(&b.hi).map(|(l, h)| h - l))
            .fold(f64::INFINITY, f64::min)
    }

    /// Exact volume of `window ∩ union`, by coordinate compression.
    pub fn intersection_volume(&self, window: &RealBox) -> f64 {
        let d = window.dim();
        let clipped: Vec<RealBox> = self
            .boxes
            .iter()
            .filter(|b| b.intersection_volume(window) > 0.0)
            .map(|b| RealBox {
                lo: (0..d).map(|i| b.lo[i].max(window.lo[i])).collect(),
                hi: (0..d).map(|i| b.hi[i].min(window.hi[i])).collect(),
            })
            .collect();
        if clipped.is_empty() {
            return 0.0;
        }
        if clipped.len() == 1 {
            return clipped[0].volume();
        }
        let cuts: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut v: Vec<f64> = clipped.iter().flat_map(|b| [b.lo[i], b.hi[i]]).collect();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            })
            .collect();
        let cells: Vec<usize> = cuts.iter().map(|c| c.len() - 1).collect();
        let total: usize = cells.iter().product();
        let mut vol = 0.0;
        let mut mid = vec![0.0; d];
        for mut idx in 0..total {
            let mut cell_vol = 1.0;
            for i in (0..d).rev() {
                let k = idx % cells[i];
                idx /= cells[i];
                mid[i] = 0.5 * (cuts[i][k] + cuts[i][k + 1]);
                cell_vol *= cuts[i][k + 1] - cuts[i][k];
            }
            if clipped.iter().any(|b| b.contains(&mid)) {
                vol += cell_vol;
            }
        }
        vol
    }

    pub fn volume(&self) -> f64 {
        match self.bounding_box() {
            Some(bb) => self.intersection_volume(&bb),
            None => 0.0,
        }
    }

    pub fn scaled(&self, s: f64) -> BoxUnion {
        BoxUnion { boxes: self.boxes.iter().map(|b| b.scaled(s)).collect() }
    }
}

/// Continuum shapes: unions of boxes and balls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShapeKind {
    BoxUnion { boxes: Vec<RealBox> },
    EuclideanBall { center: Vec<f64>, radius: f64 },
    LInfBall { center: Vec<f64>, radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub kind: ShapeKind,
    /// `A` must lie in the open `l^inf` ball of this radius.
    pub enclosing_m: f64,
}

// Tolerance for the lattice-point membership test, absorbing decimal
// round-off such as `0.1 * 10`.
const MEMBERSHIP_EPS: f64 = 1e-9;

impl ShapeSpec {
    pub fn box_union(boxes: Vec<RealBox>, enclosing_m: f64) -> Result<Self> {
        let s = ShapeSpec { kind: ShapeKind::BoxUnion { boxes }, enclosing_m };
        s.validate()?;
        Ok(s)
    }

    pub fn euclidean_ball(center: Vec<f64>, radius: f64, enclosing_m: f64) -> Result<Self> {
        let s = ShapeSpec { kind: ShapeKind::EuclideanBall { center, radius }, enclosing_m };
        s.validate()?;
        Ok(s)
    }

    pub fn linf_ball(center: Vec<f64>, radius: f64, enclosing_m: f64) -> Result<Self> {
        let s = ShapeSpec { kind: ShapeKind::LInfBall { center, radius }, enclosing_m };
        s.validate()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ShapeKind::BoxUnion { boxes } => boxes.first().map(|b| b.dim()).unwrap_or(0),
            ShapeKind::EuclideanBall { center, .. } | ShapeKind::LInfBall { center, .. } => {
                center.len()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim())?;
        if !(self.enclosing_m > 0.0) {
            return Err(LabError::invalid("enclosing_m must be positive"));
        }
        let d = self.dim();
        match &self.kind {
            ShapeKind::BoxUnion { boxes } => {
                if boxes.is_empty() {
                    return Err(LabError::invalid("box union has no boxes"));
                }
                for b in boxes {
                    if b.dim() != d || b.hi.len() != d {
                        return Err(LabError::DimensionMismatch { expected: d, got: b.dim() });
                    }
                    if !b.has_interior() {
                        return Err(LabError::invalid("box with empty interior"));
                    }
                }
            }
            ShapeKind::EuclideanBall { radius, .. } | ShapeKind::LInfBall { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(LabError::invalid("ball radius must be positive"));
                }
            }
        }
        let bb = self.bounding_box();
        let extent = bb.lo.iter().chain(&bb.hi).map(|v| v.abs()).fold(0.0, f64::max);
        if extent >= self.enclosing_m {
            return Err(LabError::invalid(format!(
                "shape reaches l^inf radius {extent}, not inside the open ball of radius {}",
                self.enclosing_m
            )));
        }
        Ok(())
    }

    pub fn bounding_box(&self) -> RealBox {
        match &self.kind {
            ShapeKind::BoxUnion { boxes } => {
                let d = boxes[0].dim();
                let mut lo = vec![f64::INFINITY; d];
                let mut hi = vec![f64::NEG_INFINITY; d];
                for b in boxes {
                    for i in 0..d {
                        lo[i] = lo[i].min(b.lo[i]);
                        hi[i] = hi[i].max(b.hi[i]);
                    }
                }
                RealBox { lo, hi }
            }
            ShapeKind::EuclideanBall { center, radius } | ShapeKind::LInfBall { center, radius } => {
                RealBox::cube(center, *radius)
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.contains_tol(x, 0.0)
    }

    fn contains_tol(&self, x: &[f64], tol: f64) -> bool {
        match &self.kind {
            ShapeKind::BoxUnion { boxes } => boxes.iter().any(|b| b.grown(tol).contains(x)),
            ShapeKind::EuclideanBall { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                r2.sqrt() <= radius + tol
            }
            ShapeKind::LInfBall { center, radius } => {
                x.iter().zip(center).all(|(a, c)| (a - c).abs() <= radius + tol)
            }
        }
    }

    /// Euclidean distance to the shape (zero inside).
    pub fn distance(&self, x: &[f64]) -> f64 {
        match &self.kind {
            ShapeKind::BoxUnion { boxes } => {
                boxes.iter().map(|b| b.distance(x)).fold(f64::INFINITY, f64::min)
            }
            ShapeKind::EuclideanBall { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                (r2.sqrt() - radius).max(0.0)
            }
            ShapeKind::LInfBall { center, radius } => RealBox::cube(center, *radius).distance(x),
        }
    }

    /// The shape scaled by `s` about the origin.
    pub fn scaled(&self, s: f64) -> ShapeSpec {
        let kind = match &self.kind {
            ShapeKind::BoxUnion { boxes } => {
                ShapeKind::BoxUnion { boxes: boxes.iter().map(|b| b.scaled(s)).collect() }
            }
            ShapeKind::EuclideanBall { center, radius } => ShapeKind::EuclideanBall {
                center: center.iter().map(|c| c * s).collect(),
                radius: radius * s,
            },
            ShapeKind::LInfBall { center, radius } => ShapeKind::LInfBall {
                center: center.iter().map(|c| c * s).collect(),
                radius: radius * s,
            },
        };
        ShapeSpec { kind, enclosing_m: self.enclosing_m * s.abs() }
    }

    /// Lebesgue volume of the shape. Box unions are assumed to have
    /// disjoint interiors.
    pub fn volume(&self) -> f64 {
        let d = self.dim() as i32;
        match &self.kind {
            ShapeKind::BoxUnion { boxes } => boxes.iter().map(|b| b.volume()).sum(),
            ShapeKind::EuclideanBall { radius, .. } => {
                let dh = d as f64 / 2.0;
                std::f64::consts::PI.powf(dh) / statrs::function::gamma::gamma(dh + 1.0)
                    * radius.powi(d)
            }
            ShapeKind::LInfBall { radius, .. } => (2.0 * radius).powi(d),
        }
    }
}

/// `A_N = (N A) ∩ Z^d`.
pub fn blow_up(shape: &ShapeSpec, n: u32) -> Result<SiteSet> {
    if n == 0 {
        return Err(LabError::invalid("blow-up scale N must be at least 1"));
    }
    shape.validate()?;
    let nf = n as f64;
    let bb = shape.bounding_box();
    let d = shape.dim();
    let lo: Vec<i32> = bb.lo.iter().map(|v| (v * nf - MEMBERSHIP_EPS).floor() as i32).collect();
    let hi: Vec<i32> = bb.hi.iter().map(|v| (v * nf + MEMBERSHIP_EPS).ceil() as i32).collect();
    let scan = IntBox::new(Point::new(&lo)?, Point::new(&hi)?)?;
    let tol = MEMBERSHIP_EPS / nf.max(1.0);
    let mut x = vec![0.0; d];
    let sites: Vec<Point> = scan
        .iter()
        .filter(|p| {
            for i in 0..d {
                x[i] = p.coord(i) as f64 / nf;
            }
            shape.contains_tol(&x, tol)
        })
        .collect();
    SiteSet::from_points(sites)
}

/// `S_N = {x : |x|_inf = floor(M N)}`.
pub fn boundary_shell(m: f64, n: u32, dim: usize) -> Result<SiteSet> {
    check_dim(dim)?;
    let r = shell_radius(m, n)?;
    let b = IntBox::ball(Point::origin(dim), r);
    Ok(SiteSet::from_points(b.iter().filter(|p| p.norm_inf() == r).collect())?)
}

/// `floor(M N)`, rejecting zero.
pub fn shell_radius(m: f64, n: u32) -> Result<i32> {
    let r = (m * n as f64 + MEMBERSHIP_EPS).floor();
    if !(r >= 1.0) {
        return Err(LabError::invalid(format!("shell radius floor(M N) = {r} must be at least 1")));
    }
    if r > COORD_LIMIT as f64 {
        return Err(LabError::invalid("shell radius too large"));
    }
    Ok(r as i32)
}

/// The nearest neighbours of `x`.
pub fn neighbors(x: &Point) -> Vec<Point> {
    x.neighbors().collect()
}
