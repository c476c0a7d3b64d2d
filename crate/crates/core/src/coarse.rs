//! Multi-scale coarse-graining of a disconnected configuration: the scales
//! `L_0 < L̂_0`, classification of `L_0`-boxes as ψ-good/h-good, columns of
//! ψ-bad boxes, and extraction of a sparse interface of h-bad boxes.
//!
//! Boxes are labelled by their corner `z ∈ L_0 Z^d`:
//! `B_z = z + [0, L_0)^d ⊆ D_z = z + [-3L_0, 4L_0)^d ⊆ U_z = z + [-K L_0 + 1, K L_0 - 1)^d`.

use std::collections::{HashMap, HashSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gff::{Decomposer, FieldSample};
use crate::green::GreenTable;
use crate::lattice::{BoxUnion, IntBox, Point, RealBox, SiteSet};
use crate::potential::equilibrium_measure;

/// Choice of the vanishing sequence `γ_N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum GammaRule {
    /// `min(1, log N / √N)` for `d = 3`, `min(1, N^{-(d-2)/(d+2)} (log N)²)` otherwise.
    Default,
    Fixed { value: f64 },
}

pub fn gamma_n(d: usize, n: u32, rule: GammaRule) -> Result<f64> {
    let nf = n as f64;
    let g = match rule {
        GammaRule::Default if d == 3 => (nf.ln() / nf.sqrt()).min(1.0),
        GammaRule::Default => (nf.powf(-((d as f64 - 2.0) / (d as f64 + 2.0))) * nf.ln().powi(2)).min(1.0),
        GammaRule::Fixed { value } => value,
    };
    if !(g > 0.0 && g <= 1.0) {
        return Err(LabError::invalid(format!("γ_N = {g} is outside (0, 1]")));
    }
    Ok(g)
}

/// Whether a rule drives `γ_N → 0` and `γ_N^{(d+1)/2} N^{d-2} / log N → ∞`,
/// judged on `N = 10^8 .. 10^24`: both sequences must be monotone with the
/// last ratio at least twice the first.
pub fn gamma_rule_admissible(d: usize, rule: GammaRule) -> bool {
    let ns: Vec<f64> = (8..=24).step_by(2).map(|k| 10f64.powi(k)).collect();
    let eval = |nf: f64| -> Option<(f64, f64)> {
        let g = match rule {
            GammaRule::Default if d == 3 => (nf.ln() / nf.sqrt()).min(1.0),
            GammaRule::Default => (nf.powf(-((d as f64 - 2.0) / (d as f64 + 2.0))) * nf.ln().powi(2)).min(1.0),
            GammaRule::Fixed { value } => value,
        };
        if !(g > 0.0 && g <= 1.0) {
            return None;
        }
        let lhs = g.powf((d as f64 + 1.0) / 2.0) * nf.powi(d as i32 - 2) / nf.ln();
        Some((g, lhs))
    };
    let Some(vals) = ns.iter().map(|n| eval(*n)).collect::<Option<Vec<_>>>() else {
        return false;
    };
    let shrinking = vals.windows(2).all(|w| w[1].0 < w[0].0);
    let growing = vals.windows(2).all(|w| w[1].1 > w[0].1);
    shrinking && growing && vals.last().unwrap().1 > 2.0 * vals[0].1 && vals.last().unwrap().0 < 1e-2
}

/// `L_0`, `L̂_0` and the spacing of the `L̂_0`-lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub gamma_n: f64,
    pub l0: i64,
    pub l0_hat: i64,
    /// `⌊√γ_N N⌋ = L̂_0 / (100 d)`.
    pub hat_spacing: i64,
}

/// `L_0 = ⌊(N log N / γ_N)^{1/(d-1)}⌋`, `L̂_0 = 100 d ⌊√γ_N N⌋`.
pub fn scales(d: usize, n: u32, rule: GammaRule) -> Result<Scales> {
    if n < 2 {
        return Err(LabError::invalid("scales need N ≥ 2"));
    }
    let g = gamma_n(d, n, rule)?;
    let nf = n as f64;
    let l0 = (nf * nf.ln() / g).powf(1.0 / (d as f64 - 1.0)).floor() as i64;
    let hat_spacing = (g.sqrt() * nf).floor() as i64;
    let l0_hat = 100 * d as i64 * hat_spacing;
    if l0 < 1 || hat_spacing < 1 {
        return Err(LabError::invalid("degenerate scales"));
    }
    Ok(Scales { gamma_n: g, l0, l0_hat, hat_spacing })
}

/// Smallest `N₀ ≤ limit` with `L_0 ≤ L̂_0` for all `N₀ ≤ N ≤ limit`.
pub fn scale_order_threshold(d: usize, rule: GammaRule, limit: u32) -> Option<u32> {
    let mut threshold = None;
    for n in (2..=limit).rev() {
        match scales(d, n, rule) {
            Ok(s) if s.l0 <= s.l0_hat => threshold = Some(n),
            _ => break,
        }
    }
    threshold
}

/// Parameters of the coarse-graining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseGrainConfig {
    pub dim: usize,
    pub n: u32,
    pub m: f64,
    pub alpha: f64,
    pub delta: f64,
    pub gamma: f64,
    pub k: i32,
    pub l0: i32,
    pub l0_hat: i32,
    pub hat_spacing: i32,
    /// Constant in the target cardinality `⌊(c'/K · L̂_0/L_0)^{d-1}⌋`.
    pub c_prime: f64,
    /// Column-count threshold factor; `L_0^{-1/2}` when absent.
    pub rho: Option<f64>,
    /// Set when `L_0`, `L̂_0`, `K` are pinned by hand below the asymptotic regime.
    pub reduced: bool,
    pub gamma_n: Option<f64>,
}

impl CoarseGrainConfig {
    /// Scales from `γ_N`; needs `K ≥ 100`.
    #[allow(clippy::too_many_arguments)]
    pub fn asymptotic(d: usize, n: u32, m: f64, levels: (f64, f64, f64), k: i32, rule: GammaRule) -> Result<Self> {
        let s = scales(d, n, rule)?;
        let fits = |v: i64| i32::try_from(v).map_err(|_| LabError::invalid("scale exceeds i32"));
        let cfg = CoarseGrainConfig {
            dim: d,
            n,
            m,
            alpha: levels.0,
            delta: levels.1,
            gamma: levels.2,
            k,
            l0: fits(s.l0)?,
            l0_hat: fits(s.l0_hat)?,
            hat_spacing: fits(s.hat_spacing)?,
            c_prime: 1.0,
            rho: None,
            reduced: false,
            gamma_n: Some(s.gamma_n),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hand-pinned scales for desk-sized windows; needs `K ≥ 5` so that `D_z ⊆ U_z`.
    #[allow(clippy::too_many_arguments)]
    pub fn reduced(d: usize, n: u32, m: f64, levels: (f64, f64, f64), k: i32, l0: i32, l0_hat: i32) -> Result<Self> {
        let cfg = CoarseGrainConfig {
            dim: d,
            n,
            m,
            alpha: levels.0,
            delta: levels.1,
            gamma: levels.2,
            k,
            l0,
            l0_hat,
            hat_spacing: (l0_hat / (100 * d as i32)).max(1),
            c_prime: 1.0,
            rho: None,
            reduced: true,
            gamma_n: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        crate::lattice::check_dim(self.dim)?;
        if !(self.alpha < self.delta && self.delta < self.gamma) {
            return Err(LabError::invalid("levels must satisfy α < δ < γ"));
        }
        let k_min = if self.reduced { 5 } else { 100 };
        if self.k < k_min {
            return Err(LabError::invalid(format!("K = {} is below {k_min}", self.k)));
        }
        if self.l0 < 1 || self.l0_hat < 1 || self.hat_spacing < 1 || !(self.c_prime > 0.0) || !(self.m > 0.0) {
            return Err(LabError::invalid("scales, c' and M must be positive"));
        }
        Ok(())
    }

    /// `a = δ - α`.
    pub fn a(&self) -> f64 {
        self.delta - self.alpha
    }

    pub fn rho(&self) -> f64 {
        self.rho.unwrap_or((self.l0 as f64).powf(-0.5))
    }

    /// `K̄ L_0 = 4 K L_0`.
    pub fn separation(&self) -> i32 {
        4 * self.k * self.l0
    }

    pub fn target_cardinality(&self) -> usize {
        let base = self.c_prime / self.k as f64 * self.l0_hat as f64 / self.l0 as f64;
        base.powi(self.dim as i32 - 1).floor() as usize
    }

    /// `⌊(M + 1) N⌋`.
    pub fn outer_radius(&self) -> i32 {
        ((self.m + 1.0) * self.n as f64).floor() as i32
    }

    pub fn b_box(&self, z: &Point) -> IntBox {
        IntBox::cube(*z, self.l0)
    }

    pub fn d_box(&self, z: &Point) -> IntBox {
        IntBox::cube(*z, self.l0).shifted(-3 * self.l0, 3 * self.l0)
    }

    pub fn u_box(&self, z: &Point) -> IntBox {
        let kl = self.k * self.l0;
        IntBox::cube(*z, self.l0).shifted(-kl + 1, kl - 1 - self.l0)
    }

    /// Box corners `z ∈ L_0 Z^d` whose `B_z` meets `[-r, r]^d`.
    pub fn labels_meeting(&self, r: i32) -> Vec<Point> {
        let o = Point::origin(self.dim);
        let idx = IntBox::new(o.scaled_to((-r).div_euclid(self.l0)), o.scaled_to(r.div_euclid(self.l0)))
            .expect("non-empty label range");
        idx.iter().map(|k| k.times(self.l0)).collect()
    }

    /// Smallest box holding every `U_z` of `labels` with its outer boundary.
    pub fn window_for(&self, labels: &[Point]) -> Option<IntBox> {
        let mut it = labels.iter().map(|z| self.u_box(z).grow(1));
        let first = it.next()?;
        Some(it.fold(first, |acc, b| acc.hull(&b)))
    }
}

trait BoxExt {
    fn shifted(&self, lo: i32, hi: i32) -> IntBox;
    fn hull(&self, other: &IntBox) -> IntBox;
}

impl BoxExt for IntBox {
    /// `[lo + a, hi + b]` per axis.
    fn shifted(&self, a: i32, b: i32) -> IntBox {
        let d = self.dim();
        let lo: Vec<i32> = (0..d).map(|i| self.lo.coord(i) + a).collect();
        let hi: Vec<i32> = (0..d).map(|i| self.hi.coord(i) + b).collect();
        IntBox { lo: Point::new(&lo).expect("shifted box"), hi: Point::new(&hi).expect("shifted box") }
    }

    fn hull(&self, o: &IntBox) -> IntBox {
        let d = self.dim();
        let lo: Vec<i32> = (0..d).map(|i| self.lo.coord(i).min(o.lo.coord(i))).collect();
        let hi: Vec<i32> = (0..d).map(|i| self.hi.coord(i).max(o.hi.coord(i))).collect();
        IntBox { lo: Point::new(&lo).expect("hull"), hi: Point::new(&hi).expect("hull") }
    }
}

trait PointExt {
    fn scaled_to(&self, v: i32) -> Point;
    fn times(&self, s: i32) -> Point;
}

impl PointExt for Point {
    /// The point with every coordinate equal to `v`.
    fn scaled_to(&self, v: i32) -> Point {
        Point::new(&vec![v; self.dim()]).expect("label range")
    }

    fn times(&self, s: i32) -> Point {
        let c: Vec<i32> = self.coords().iter().map(|c| c * s).collect();
        Point::new(&c).expect("label")
    }
}

/// Connected components of `{p ∈ region : open(p)}`; returns a label per
/// region index (`-1` closed) and `(size, l^∞ diameter)` per component.
fn components(region: &IntBox, open: impl Fn(&Point) -> bool) -> (Vec<i32>, Vec<(usize, i32)>) {
    let n = region.len();
    let d = region.dim();
    let mut label = vec![-1i32; n];
    let is_open: Vec<bool> = region.iter().map(|p| open(&p)).collect();
    let mut stats = Vec::new();
    let mut queue = VecDeque::new();
    for s in 0..n {
        if !is_open[s] || label[s] >= 0 {
            continue;
        }
        let id = stats.len() as i32;
        label[s] = id;
        queue.push_back(s);
        let (mut lo, mut hi) = ([i32::MAX; 4], [i32::MIN; 4]);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = region.point_at(i);
            for k in 0..d {
                lo[k] = lo[k].min(p.coord(k));
                hi[k] = hi[k].max(p.coord(k));
            }
            for q in p.neighbors() {
                if let Some(j) = region.index_of(&q) {
                    if is_open[j] && label[j] < 0 {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        stats.push((size, (0..d).map(|k| hi[k] - lo[k]).max().unwrap_or(0)));
    }
    (label, stats)
}

/// Outcome of classifying one box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxClassification {
    pub z: Point,
    pub psi_good: bool,
    pub h_good: bool,
    /// `inf_{D_z} h^z`.
    pub inf_h: f64,
    /// Largest `l^∞` diameter of a component of `B_z ∩ {ψ^z ≥ γ}`.
    pub max_diameter: i32,
    /// Neighbouring boxes checked for the linking clause.
    pub linked_neighbors: usize,
}

impl BoxClassification {
    pub fn good(&self) -> bool {
        self.psi_good && self.h_good
    }
}

/// Large (`diameter ≥ L_0/10`) components of `B_z ∩ {ψ ≥ γ}` as site lists.
fn large_components(cfg: &CoarseGrainConfig, z: &Point, psi: &dyn Fn(&Point) -> f64) -> (Vec<Vec<Point>>, i32) {
    let b = cfg.b_box(z);
    let (label, stats) = components(&b, |p| psi(p) >= cfg.gamma);
    let max_diameter = stats.iter().map(|s| s.1).max().unwrap_or(-1);
    let keep: Vec<bool> = stats.iter().map(|s| s.1 as f64 >= cfg.l0 as f64 / 10.0).collect();
    let mut out: Vec<Vec<Point>> = vec![Vec::new(); stats.len()];
    for (i, l) in label.iter().enumerate() {
        if *l >= 0 && keep[*l as usize] {
            out[*l as usize].push(b.point_at(i));
        }
    }
    (out.into_iter().filter(|c| !c.is_empty()).collect(), max_diameter)
}

/// Classifies the boxes `labels` of one field sample. Decompositions are
/// computed for every label and every neighbouring box whose `U_z` fits in
/// the window; the linking clause uses the neighbours that fit.
pub fn classify_boxes(labels: &[Point], phi: &FieldSample, cfg: &CoarseGrainConfig) -> Result<Vec<BoxClassification>> {
    cfg.validate()?;
    let window = phi.window.clone();
    let fits = |z: &Point| {
        let u = cfg.u_box(z).grow(1);
        window.contains(&u.lo) && window.contains(&u.hi) && is_box_window(&window, &u)
    };
    if let Some(bad) = labels.iter().find(|z| !fits(z)) {
        return Err(LabError::OutsideDomain(format!("U_z of box {bad} leaves the window")));
    }
    let mut needed: Vec<Point> = labels.to_vec();
    for z in labels {
        for q in z.neighbors() {
            let nz = z.add(&q.sub(z).times(cfg.l0));
            if fits(&nz) {
                needed.push(nz);
            }
        }
    }
    needed.sort_unstable();
    needed.dedup();
    let psis: HashMap<Point, (Vec<f64>, Vec<f64>)> = needed
        .par_iter()
        .map(|z| {
            let u = SiteSet::from_box(&cfg.u_box(z));
            let dec = Decomposer::new(window.clone(), &u)?.decompose(phi)?;
            Ok((*z, (dec.psi, dec.h)))
        })
        .collect::<Result<_>>()?;
    let at = |v: &Vec<f64>, p: &Point| v[window.position(p).expect("inside window")];
    labels
        .par_iter()
        .map(|z| {
            let (psi, h) = &psis[z];
            let psi_z = |p: &Point| at(psi, p);
            let d_box = cfg.d_box(z);
            let inf_h = d_box.iter().map(|p| at(h, &p)).fold(f64::INFINITY, f64::min);
            let (mine, max_diameter) = large_components(cfg, z, &psi_z);
            let mut psi_good = !mine.is_empty();
            let neighbours: Vec<Point> = z
                .neighbors()
                .map(|q| z.add(&q.sub(z).times(cfg.l0)))
                .filter(|nz| psis.contains_key(nz))
                .collect();
            if psi_good {
                let (dlabel, _) = components(&d_box, |p| psi_z(p) >= cfg.delta);
                let lab = |p: &Point| dlabel[d_box.index_of(p).expect("B_z' inside D_z")];
                for nz in &neighbours {
                    let psi_n = &psis[nz].0;
                    let (theirs, _) = large_components(cfg, nz, &|p: &Point| at(psi_n, p));
                    for c1 in &mine {
                        let l1: HashSet<i32> = c1.iter().map(lab).filter(|l| *l >= 0).collect();
                        for c2 in &theirs {
                            if !c2.iter().map(lab).any(|l| l >= 0 && l1.contains(&l)) {
                                psi_good = false;
                            }
                        }
                    }
                }
            }
            Ok(BoxClassification { z: *z, psi_good, h_good: inf_h > -cfg.a(), inf_h, max_diameter, linked_neighbors: neighbours.len() })
        })
        .collect()
}

fn is_box_window(window: &SiteSet, b: &IntBox) -> bool {
    // Windows are boxes in practice; otherwise check every corner-to-corner site.
    match window.bounding_box() {
        Some(wb) if wb.len() == window.len() => wb.contains_box(b),
        _ => b.iter().all(|p| window.contains(&p)),
    }
}

/// Single-box convenience wrapper around [`classify_boxes`].
pub fn classify_box(z: &Point, phi: &FieldSample, cfg: &CoarseGrainConfig) -> Result<BoxClassification> {
    Ok(classify_boxes(std::slice::from_ref(z), phi, cfg)?.remove(0))
}

/// Columns of boxes containing a ψ-bad box, per direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BadColumns {
    pub per_direction: Vec<usize>,
    /// `ρ (N_{L_0}/L_0)^{d-1}` with `N_{L_0} = L_0^{d-1}/log L_0`; absent for `L_0 < 2`.
    pub threshold: Option<f64>,
    /// Set when the classifications do not cover every box meeting `B(0, 10(M+1)N)`.
    pub truncated: bool,
}

pub fn bad_event_count(classes: &[BoxClassification], cfg: &CoarseGrainConfig) -> BadColumns {
    let d = cfg.dim;
    let r = (10.0 * (cfg.m + 1.0) * cfg.n as f64).floor() as i32;
    let region = IntBox::ball(Point::origin(d), r);
    let inside: Vec<&BoxClassification> = classes
        .iter()
        .filter(|c| cfg.b_box(&c.z).intersect(&region).is_some())
        .collect();
    let expected: usize = (0..d)
        .map(|_| (r.div_euclid(cfg.l0) - (-r).div_euclid(cfg.l0) + 1) as usize)
        .product();
    let per_direction = (0..d)
        .map(|e| {
            let cols: HashSet<Vec<i32>> = inside
                .iter()
                .filter(|c| !c.psi_good)
                .map(|c| (0..d).filter(|i| *i != e).map(|i| c.z.coord(i)).collect())
                .collect();
            cols.len()
        })
        .collect();
    let threshold = (cfg.l0 >= 2).then(|| {
        let l = cfg.l0 as f64;
        let nl = l.powi(d as i32 - 1) / l.ln();
        cfg.rho() * (nl / l).powi(d as i32 - 1)
    });
    BadColumns { per_direction, threshold, truncated: inside.len() < expected }
}

/// The coarse-graining record `(Ŝ, S̃, (π̃_x, 𝒞̃_x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaRecord {
    pub s_hat: Vec<Point>,
    pub s_tilde: Vec<Point>,
    pub selections: Vec<Selection>,
}

/// Boxes chosen near one point of `S̃`, with the dropped coordinate of the projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub x: Point,
    pub axis: usize,
    pub boxes: Vec<Point>,
}

impl KappaRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// An extracted interface.
#[derive(Clone, Debug)]
pub struct InterfaceSpec {
    /// Box corners `𝒞`.
    pub boxes: Vec<Point>,
    /// Discrete filling `C = ∪ B_z`.
    pub filling: SiteSet,
    /// `Σ = (1/N) ∪ (z + [0, L_0]^d)`.
    pub sigma: BoxUnion,
    /// `(1/N) ∪_{x ∈ Ŝ} B_∞(x, L̂_0/(50d))`; `U_0` is the complement of the
    /// unbounded component of its complement.
    pub segmentation: BoxUnion,
    pub kappa: KappaRecord,
    pub reduced: bool,
}

/// Result of [`extract_interface`].
#[derive(Clone, Debug)]
pub struct Extraction {
    pub spec: Option<InterfaceSpec>,
    pub diagnostic: String,
    /// `σ̂(x)` at the examined `L̂_0`-lattice points.
    pub sigma_hat: Vec<(Point, f64)>,
    /// Boxes meeting `B(0, (M+1)N)` that were not classified (treated as bad).
    pub truncated: bool,
}

/// Largest site grid for the `σ̂` table.
const SIGMA_CAP: usize = 1 << 24;

/// Inclusion-exclusion box sums of a 0/1 indicator on a box.
struct SummedArea {
    region: IntBox,
    dims: Vec<usize>,
    acc: Vec<u64>,
}

impl SummedArea {
    fn new(region: &IntBox, f: impl Fn(&Point) -> bool) -> Self {
        let d = region.dim();
        let dims: Vec<usize> = (0..d).map(|i| region.side(i) + 1).collect();
        let mut acc = vec![0u64; dims.iter().product()];
        let flat = |idx: &[usize]| idx.iter().zip(&dims).fold(0, |a, (i, n)| a * n + i);
        for q in region.iter() {
            let idx: Vec<usize> = (0..d).map(|i| (q.coord(i) - region.lo.coord(i)) as usize + 1).collect();
            acc[flat(&idx)] = f(&q) as u64;
        }
        for axis in 0..d {
            let stride: usize = dims[axis + 1..].iter().product();
            for j in 0..acc.len() {
                if (j / stride) % dims[axis] > 0 {
                    acc[j] += acc[j - stride];
                }
            }
        }
        SummedArea { region: *region, dims, acc }
    }

    /// Sum over `b ⊆ region`.
    fn sum(&self, b: &IntBox) -> u64 {
        let d = self.dims.len();
        let mut total: i64 = 0;
        for mask in 0..(1usize << d) {
            let mut j = 0;
            let mut sign = 1i64;
            for i in 0..d {
                let k = if mask >> i & 1 == 1 {
                    sign = -sign;
                    b.lo.coord(i) - self.region.lo.coord(i)
                } else {
                    b.hi.coord(i) - self.region.lo.coord(i) + 1
                } as usize;
                j = j * self.dims[i] + k;
            }
            total += sign * self.acc[j] as i64;
        }
        total as u64
    }
}

/// Projected `l^∞` distance between box corners with coordinate `axis` dropped.
pub fn projected_distance(a: &Point, b: &Point, axis: usize) -> i32 {
    (0..a.dim()).filter(|i| *i != axis).map(|i| (a.coord(i) - b.coord(i)).abs()).max().unwrap_or(0)
}

/// Builds `𝒰¹` by flood fill, evaluates `σ̂` on the `L̂_0`-lattice, selects
/// `Ŝ`, `S̃` greedily in lexicographic order, and picks ψ-good h-bad boxes
/// whose projections are `4 K L_0` apart.
pub fn extract_interface(classes: &[BoxClassification], a_n: &SiteSet, cfg: &CoarseGrainConfig) -> Result<Extraction> {
    cfg.validate()?;
    let d = cfg.dim;
    let l0 = cfg.l0;
    let r_out = cfg.outer_radius();
    let outer = IntBox::ball(Point::origin(d), r_out);
    let by_z: HashMap<Point, &BoxClassification> = classes.iter().map(|c| (c.z, c)).collect();
    let is_outside = |z: &Point| cfg.b_box(z).intersect(&outer).is_none();
    let inner_labels = cfg.labels_meeting(r_out);
    let truncated = inner_labels.iter().any(|z| !by_z.contains_key(z));
    // 𝒰¹: outside boxes, plus good boxes joined to an outside box through good boxes.
    let mut in_u1: HashSet<Point> = HashSet::new();
    let mut queue: VecDeque<Point> = VecDeque::new();
    for z in &inner_labels {
        for q in z.neighbors() {
            let nz = z.add(&q.sub(z).times(l0));
            if is_outside(&nz) {
                if let Some(c) = by_z.get(z) {
                    if c.good() && in_u1.insert(*z) {
                        queue.push_back(*z);
                    }
                }
            }
        }
    }
    while let Some(z) = queue.pop_front() {
        for q in z.neighbors() {
            let nz = z.add(&q.sub(&z).times(l0));
            if let Some(c) = by_z.get(&nz) {
                if !is_outside(&nz) && c.good() && in_u1.insert(nz) {
                    queue.push_back(nz);
                }
            }
        }
    }
    let in_u1_box = |z: &Point| is_outside(z) || in_u1.contains(z);

    let touches = inner_labels
        .iter()
        .filter(|z| in_u1.contains(*z))
        .any(|z| a_n.iter().any(|p| cfg.b_box(z).contains(p)));
    if touches {
        return Ok(Extraction { spec: None, diagnostic: "connected".into(), sigma_hat: Vec::new(), truncated });
    }

    // σ̂ on L̂_0-lattice points whose ball B(x, L̂_0) meets B(0, (M+1)N),
    // by a summed-area table of the site indicator of ∪_{z ∈ 𝒰¹} B_z.
    let lh = cfg.l0_hat;
    let sp = cfg.hat_spacing;
    let extent = IntBox::ball(Point::origin(d), r_out + lh);
    if extent.len() > SIGMA_CAP {
        return Err(LabError::TooLarge { size: extent.len(), cap: SIGMA_CAP });
    }
    let label_of = |q: &Point| {
        let c: Vec<i32> = q.coords().iter().map(|c| c.div_euclid(l0) * l0).collect();
        Point::new(&c).expect("label")
    };
    let table = SummedArea::new(&extent, |q| in_u1_box(&label_of(q)));
    let reach = (r_out + lh) / sp;
    let ball_len = ((2 * lh + 1) as f64).powi(d as i32);
    let sigma_hat: Vec<(Point, f64)> = IntBox::ball(Point::origin(d), reach)
        .iter()
        .map(|k| {
            let x = k.times(sp);
            let ball = IntBox::ball(x, lh).intersect(&extent).expect("centre inside the extent");
            // Sites of the ball beyond the extent lie outside B(0, (M+1)N).
            let outside = ball_len - ball.len() as f64;
            (x, (table.sum(&ball) as f64 + outside) / ball_len)
        })
        .collect();
    let s_hat: Vec<Point> = sigma_hat
        .iter()
        .filter(|(_, s)| (0.25..=0.75).contains(s))
        .map(|(x, _)| *x)
        .collect();
    if s_hat.is_empty() {
        return Ok(Extraction { spec: None, diagnostic: "no segmentation points (Ŝ empty)".into(), sigma_hat, truncated });
    }
    let mut s_tilde: Vec<Point> = Vec::new();
    for x in &s_hat {
        if s_tilde.iter().all(|y| x.sub(y).norm_inf() > 4 * lh) {
            s_tilde.push(*x);
        }
    }
    let target = cfg.target_cardinality();
    if target == 0 {
        return Ok(Extraction {
            spec: None,
            diagnostic: "target cardinality is zero at these scales".into(),
            sigma_hat,
            truncated,
        });
    }
    let sep = cfg.separation();
    let mut selections = Vec::new();
    for x in &s_tilde {
        let ball = IntBox::ball(*x, lh);
        let mut cands: Vec<Point> = classes
            .iter()
            .filter(|c| c.psi_good && !c.h_good && cfg.b_box(&c.z).intersect(&ball).is_some())
            .map(|c| c.z)
            .collect();
        cands.sort_unstable();
        let mut best: Option<(usize, Vec<Point>)> = None;
        for axis in 0..d {
            let mut picked: Vec<Point> = Vec::new();
            for z in &cands {
                if picked.iter().all(|y| projected_distance(z, y, axis) >= sep) {
                    picked.push(*z);
                }
            }
            if best.as_ref().is_none_or(|(_, b)| picked.len() > b.len()) {
                best = Some((axis, picked));
            }
        }
        let (axis, mut picked) = best.expect("d ≥ 1");
        if picked.len() < target {
            return Ok(Extraction {
                spec: None,
                diagnostic: format!("target cardinality {target} unreachable near {x} (found {})", picked.len()),
                sigma_hat,
                truncated,
            });
        }
        picked.truncate(target);
        selections.push(Selection { x: *x, axis, boxes: picked });
    }
    let mut boxes: Vec<Point> = selections.iter().flat_map(|s| s.boxes.iter().copied()).collect();
    boxes.sort_unstable();
    boxes.dedup();
    let nf = cfg.n as f64;
    let filling = SiteSet::from_points(boxes.iter().flat_map(|z| cfg.b_box(z).iter().collect::<Vec<_>>()).collect())?;
    let sigma = BoxUnion::new(
        boxes
            .iter()
            .map(|z| {
                let lo: Vec<f64> = z.coords().iter().map(|c| *c as f64 / nf).collect();
                let hi: Vec<f64> = z.coords().iter().map(|c| (c + l0) as f64 / nf).collect();
                RealBox::new(lo, hi)
            })
            .collect(),
    );
    let half = lh as f64 / (50.0 * d as f64) / nf;
    let segmentation = BoxUnion::new(s_hat.iter().map(|x| RealBox::cube(&x.to_real(1.0 / nf), half)).collect());
    Ok(Extraction {
        spec: Some(InterfaceSpec {
            boxes,
            filling,
            sigma,
            segmentation,
            kappa: KappaRecord { s_hat, s_tilde, selections },
            reduced: cfg.reduced,
        }),
        diagnostic: "interface extracted".into(),
        sigma_hat,
        truncated,
    })
}

/// `|C|/N^d` and `d · cap(C) / N^{d-2}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeCapacity {
    pub volume_ratio: f64,
    pub capacity_ratio: f64,
    /// Set when only every `k`-th box entered the capacity (a lower bound).
    pub subsampled: bool,
}

pub fn interface_volume_capacity(gt: &GreenTable, boxes: &[Point], l0: i32, n: u32) -> Result<VolumeCapacity> {
    let d = gt.dim();
    let nf = n as f64;
    if boxes.is_empty() {
        return Ok(VolumeCapacity { volume_ratio: 0.0, capacity_ratio: 0.0, subsampled: false });
    }
    let fill = |bs: &[Point]| {
        SiteSet::from_points(bs.iter().flat_map(|z| IntBox::cube(*z, l0).iter().collect::<Vec<_>>()).collect())
    };
    let c = fill(boxes)?;
    let volume_ratio = c.len() as f64 / nf.powi(d as i32);
    let mut step = 1;
    loop {
        let sub: Vec<Point> = boxes.iter().step_by(step).copied().collect();
        match equilibrium_measure(gt, &fill(&sub)?) {
            Ok(em) => {
                return Ok(VolumeCapacity {
                    volume_ratio,
                    capacity_ratio: d as f64 * em.capacity() / nf.powi(d as i32 - 2),
                    subsampled: step > 1,
                })
            }
            Err(LabError::TooLarge { .. }) if sub.len() > 1 => step *= 2,
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use rand::Rng;

    fn p(c: &[i32]) -> Point {
        Point::new(c).unwrap()
    }

    #[test]
    fn scales_at_n_1000() {
        let s = scales(3, 1000, GammaRule::Default).unwrap();
        assert!((s.gamma_n - 0.218_45).abs() < 1e-4);
        assert_eq!(s.l0, 177);
        assert_eq!(s.hat_spacing, 467);
        assert_eq!(s.l0_hat, 140_100);
        assert!(gamma_rule_admissible(3, GammaRule::Default));
        assert!(gamma_rule_admissible(4, GammaRule::Default));
        assert!(!gamma_rule_admissible(3, GammaRule::Fixed { value: 0.5 }));
        assert!(gamma_n(3, 10, GammaRule::Fixed { value: 1.5 }).is_err());
        let t = scale_order_threshold(3, GammaRule::Default, 100_000).unwrap();
        let s = scales(3, t, GammaRule::Default).unwrap();
        assert!(s.l0 <= s.l0_hat);
    }

    #[test]
    fn config_validation() {
        assert!(CoarseGrainConfig::reduced(3, 8, 1.0, (0.0, 0.5, 1.0), 5, 2, 8).is_ok());
        assert!(CoarseGrainConfig::reduced(3, 8, 1.0, (0.0, 0.5, 1.0), 4, 2, 8).is_err());
        assert!(CoarseGrainConfig::reduced(3, 8, 1.0, (0.6, 0.5, 1.0), 5, 2, 8).is_err());
        assert!(CoarseGrainConfig::asymptotic(3, 1000, 1.0, (0.0, 0.5, 1.0), 50, GammaRule::Default).is_err());
        let c = CoarseGrainConfig::asymptotic(3, 1000, 1.0, (0.0, 0.5, 1.0), 100, GammaRule::Default).unwrap();
        assert_eq!(c.separation(), 400 * 177);
    }

    #[test]
    fn box_geometry() {
        let c = CoarseGrainConfig::reduced(3, 8, 1.0, (0.0, 0.5, 1.0), 5, 2, 8).unwrap();
        let z = p(&[2, 0, -2]);
        assert_eq!(c.b_box(&z), IntBox::new(p(&[2, 0, -2]), p(&[3, 1, -1])).unwrap());
        assert_eq!(c.d_box(&z), IntBox::new(p(&[-4, -6, -8]), p(&[9, 7, 5])).unwrap());
        assert_eq!(c.u_box(&z), IntBox::new(p(&[-7, -9, -11]), p(&[10, 8, 6])).unwrap());
        assert!(c.u_box(&z).contains_box(&c.d_box(&z)));
    }

    fn small_cfg() -> CoarseGrainConfig {
        CoarseGrainConfig::reduced(3, 4, 0.5, (-1.0, 0.0, 0.5), 5, 2, 4).unwrap()
    }

    fn window_around(cfg: &CoarseGrainConfig, labels: &[Point]) -> Arc<SiteSet> {
        Arc::new(SiteSet::from_box(&cfg.window_for(labels).unwrap()))
    }

    #[test]
    fn constant_fields() {
        let cfg = small_cfg();
        let z = Point::origin(3);
        let w = window_around(&cfg, &[z]);
        let up = FieldSample::from_fn(w.clone(), |_| cfg.gamma + 1.0);
        let c = classify_box(&z, &up, &cfg).unwrap();
        // A constant field is all harmonic part: ψ ≡ 0 < γ.
        assert!(!c.psi_good);
        assert!(c.h_good);
        let down = FieldSample::from_fn(w, |_| -cfg.a() - 1.0);
        assert!(!classify_box(&z, &down, &cfg).unwrap().h_good);
    }

    /// Components of `{q ∈ region : open(q)}` by hash-set search.
    fn oracle_components(region: &IntBox, open: impl Fn(&Point) -> bool) -> Vec<Vec<Point>> {
        let open: HashSet<Point> = region.iter().filter(|q| open(q)).collect();
        let mut seen: HashSet<Point> = HashSet::new();
        let mut out = Vec::new();
        let mut starts: Vec<&Point> = open.iter().collect();
        starts.sort();
        for s in starts {
            if !seen.insert(*s) {
                continue;
            }
            let mut stack = vec![*s];
            let mut comp = vec![];
            while let Some(x) = stack.pop() {
                comp.push(x);
                for y in x.neighbors() {
                    if open.contains(&y) && seen.insert(y) {
                        stack.push(y);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    fn diameter(c: &[Point]) -> i32 {
        (0..c[0].dim())
            .map(|i| c.iter().map(|q| q.coord(i)).max().unwrap() - c.iter().map(|q| q.coord(i)).min().unwrap())
            .max()
            .unwrap()
    }

    /// Independent evaluation of both predicates, linking clause included.
    fn oracle(cfg: &CoarseGrainConfig, z: &Point, phi: &FieldSample) -> (bool, bool) {
        let psi_of = |z: &Point| {
            let dec = crate::gff::decompose(phi, &SiteSet::from_box(&cfg.u_box(z))).unwrap();
            let w = phi.window.clone();
            (move |q: &Point| dec.psi[w.position(q).unwrap()], dec.h)
        };
        let (psi, h) = psi_of(z);
        let d_box = cfg.d_box(z);
        let inf = d_box.iter().map(|q| h[phi.window.position(&q).unwrap()]).fold(f64::INFINITY, f64::min);
        let large = |f: &dyn Fn(&Point) -> f64, z: &Point| -> Vec<Vec<Point>> {
            oracle_components(&cfg.b_box(z), |q| f(q) >= cfg.gamma)
                .into_iter()
                .filter(|c| diameter(c) as f64 >= cfg.l0 as f64 / 10.0)
                .collect()
        };
        let mine = large(&psi, z);
        let mut good = !mine.is_empty();
        let linked = oracle_components(&d_box, |q| psi(q) >= cfg.delta);
        let comp_of = |q: &Point| linked.iter().position(|c| c.contains(q));
        for e in 0..3 {
            for sgn in [-1, 1] {
                let nz = z.add(&Point::unit(3, e, sgn * cfg.l0));
                let u = cfg.u_box(&nz).grow(1);
                if !u.iter().all(|q| phi.window.contains(&q)) {
                    continue;
                }
                let (psi_n, _) = psi_of(&nz);
                for c1 in &mine {
                    for c2 in large(&psi_n, &nz) {
                        let hit = c1
                            .iter()
                            .filter_map(comp_of)
                            .any(|k| c2.iter().any(|q| comp_of(q) == Some(k)));
                        good &= hit;
                    }
                }
            }
        }
        (good, inf > -cfg.a())
    }

    #[test]
    fn classification_matches_bruteforce_predicates() {
        let cfg = small_cfg();
        let z = Point::origin(3);
        let w = window_around(&cfg, &[z]);
        let mut rng = crate::mc::stream_rng(23, 0);
        let mut seen = [[0; 2]; 2];
        for _ in 0..100 {
            let scale: f64 = rng.gen_range(0.3..3.0);
            let shift: f64 = rng.gen_range(-1.5..0.5);
            let vals: Vec<f64> = (0..w.len()).map(|_| shift + scale * (rng.gen::<f64>() - 0.5)).collect();
            let phi = FieldSample::from_values(w.clone(), vals).unwrap();
            let c = classify_box(&z, &phi, &cfg).unwrap();
            assert_eq!(c.linked_neighbors, 0);
            let (psi, h) = oracle(&cfg, &z, &phi);
            assert_eq!((c.psi_good, c.h_good), (psi, h));
            seen[psi as usize][h as usize] += 1;
        }
        assert!(seen.iter().flatten().filter(|n| **n > 0).count() >= 3, "{seen:?}");
    }

    #[test]
    fn linking_clause_matches_bruteforce() {
        let cfg = small_cfg();
        let z = Point::origin(3);
        let labels: Vec<Point> =
            std::iter::once(z).chain((0..3).flat_map(|e| [-1, 1].map(|s| Point::unit(3, e, s * cfg.l0)))).collect();
        let w = window_around(&cfg, &labels);
        let mut rng = crate::mc::stream_rng(29, 0);
        let mut outcomes = HashSet::new();
        for _ in 0..8 {
            let scale: f64 = rng.gen_range(1.0..4.0);
            let vals: Vec<f64> = (0..w.len()).map(|_| scale * (rng.gen::<f64>() - 0.4)).collect();
            let phi = FieldSample::from_values(w.clone(), vals).unwrap();
            let c = classify_box(&z, &phi, &cfg).unwrap();
            assert_eq!(c.linked_neighbors, 6);
            assert_eq!((c.psi_good, c.h_good), oracle(&cfg, &z, &phi));
            outcomes.insert(c.psi_good);
        }
        assert_eq!(outcomes.len(), 2);
    }

    fn synthetic(cfg: &CoarseGrainConfig, bad: impl Fn(&Point) -> (bool, bool)) -> Vec<BoxClassification> {
        cfg.labels_meeting(cfg.outer_radius())
            .into_iter()
            .map(|z| {
                let (psi_good, h_good) = bad(&z);
                BoxClassification { z, psi_good, h_good, inf_h: 0.0, max_diameter: 0, linked_neighbors: 0 }
            })
            .collect()
    }

    #[test]
    fn bad_columns() {
        let cfg = CoarseGrainConfig::reduced(3, 2, 0.5, (-1.0, 0.0, 0.5), 5, 2, 4).unwrap();
        let all_good = synthetic(&cfg, |_| (true, true));
        assert_eq!(bad_event_count(&all_good, &cfg).per_direction, vec![0, 0, 0]);
        let one = synthetic(&cfg, |z| (*z != Point::origin(3), true));
        let counts = bad_event_count(&one, &cfg);
        assert_eq!(counts.per_direction, vec![1, 1, 1]);
        assert!(counts.truncated);
        // Random pattern against a brute-force column scan.
        let mut rng = crate::mc::stream_rng(4, 0);
        let flags: HashMap<Point, bool> = all_good.iter().map(|c| (c.z, rng.gen::<f64>() < 0.2)).collect();
        let random = synthetic(&cfg, |z| (!flags[z], true));
        let got = bad_event_count(&random, &cfg).per_direction;
        for e in 0..3 {
            let mut cols = Vec::new();
            for c in &random {
                if !c.psi_good {
                    let mut key = c.z;
                    key = key.with_coord(e, 0);
                    if !cols.contains(&key) {
                        cols.push(key);
                    }
                }
            }
            assert_eq!(got[e], cols.len());
        }
    }

    fn shell_cfg() -> CoarseGrainConfig {
        // N = 16, M = 1: unit boxes, a shell of h-bad boxes at l^inf radius 14.
        let mut c = CoarseGrainConfig::reduced(3, 16, 1.0, (-1.0, 0.0, 0.5), 5, 1, 2).unwrap();
        c.c_prime = 2.6;
        c
    }

    fn in_shell(z: &Point) -> bool {
        z.norm_inf() == 14
    }

    #[test]
    fn summed_area_matches_direct_sums() {
        let region = IntBox::new(p(&[-3, 0, 2]), p(&[4, 5, 6])).unwrap();
        let f = |q: &Point| (q.coord(0) * 7 + q.coord(1) * 3 + q.coord(2)).rem_euclid(5) < 2;
        let t = SummedArea::new(&region, f);
        let mut rng = crate::mc::stream_rng(6, 0);
        for _ in 0..200 {
            let a = region.point_at(rng.gen_range(0..region.len()));
            let b = region.point_at(rng.gen_range(0..region.len()));
            let lo: Vec<i32> = (0..3).map(|i| a.coord(i).min(b.coord(i))).collect();
            let hi: Vec<i32> = (0..3).map(|i| a.coord(i).max(b.coord(i))).collect();
            let sub = IntBox::new(p(&lo), p(&hi)).unwrap();
            assert_eq!(t.sum(&sub), sub.iter().filter(|q| f(q)).count() as u64);
        }
    }

    #[test]
    fn all_good_is_connected() {
        let cfg = shell_cfg();
        let classes = synthetic(&cfg, |_| (true, true));
        let a = SiteSet::from_box(&IntBox::ball(Point::origin(3), 2));
        let e = extract_interface(&classes, &a, &cfg).unwrap();
        assert!(e.spec.is_none());
        assert_eq!(e.diagnostic, "connected");
    }

    #[test]
    fn shell_of_h_bad_boxes_gives_an_enclosing_interface() {
        let cfg = shell_cfg();
        let classes = synthetic(&cfg, |z| if in_shell(z) { (true, false) } else { (true, true) });
        let a = SiteSet::from_box(&IntBox::ball(Point::origin(3), 4));
        let e = extract_interface(&classes, &a, &cfg).unwrap();
        assert!(!e.truncated);
        // σ̂ against a direct count: the region is everything at l^inf radius > 14.
        for (x, s) in e.sigma_hat.iter().step_by(97) {
            let ball = IntBox::ball(*x, cfg.l0_hat);
            let direct = ball.iter().filter(|q| q.norm_inf() > 14).count() as f64 / ball.len() as f64;
            assert!((s - direct).abs() < 1e-12, "{x}: {s} vs {direct}");
        }
        let spec = e.spec.unwrap_or_else(|| panic!("{}", e.diagnostic));
        assert!(spec.boxes.iter().all(|z| in_shell(z)));
        // Σ surrounds (1/N) A_N: its bounding box strictly contains it and Σ misses it.
        let nf = cfg.n as f64;
        let sb = spec.sigma.bounding_box().unwrap();
        for i in 0..3 {
            assert!(sb.lo[i] < -4.0 / nf && sb.hi[i] > 4.0 / nf);
        }
        assert!(a.iter().all(|q| !spec.sigma.contains(&q.to_real(1.0 / nf))));
        // Mutual-distance contract, rechecked exhaustively.
        for s in &spec.kappa.selections {
            for (i, u) in s.boxes.iter().enumerate() {
                for v in &s.boxes[i + 1..] {
                    assert!(projected_distance(u, v, s.axis) >= cfg.separation());
                }
            }
        }
        // S̃ maximality: every Ŝ point conflicts with a chosen one.
        for x in &spec.kappa.s_hat {
            assert!(spec.kappa.s_tilde.iter().any(|y| x.sub(y).norm_inf() <= 4 * cfg.l0_hat));
        }
        let json = spec.kappa.to_json().unwrap();
        assert_eq!(KappaRecord::from_json(&json).unwrap(), spec.kappa);
        let again = extract_interface(&classes, &a, &cfg).unwrap().spec.unwrap();
        assert_eq!(again.kappa, spec.kappa);
    }

    #[test]
    fn several_boxes_per_point_respect_the_projection_contract() {
        let mut cfg = CoarseGrainConfig::reduced(3, 16, 1.0, (-1.0, 0.0, 0.5), 5, 1, 24).unwrap();
        cfg.hat_spacing = 4;
        cfg.c_prime = 0.42;
        assert_eq!(cfg.target_cardinality(), 4);
        let classes = synthetic(&cfg, |z| if z.norm_inf() == 20 { (true, false) } else { (true, true) });
        let a = SiteSet::from_box(&IntBox::ball(Point::origin(3), 4));
        let e = extract_interface(&classes, &a, &cfg).unwrap();
        let spec = e.spec.unwrap_or_else(|| panic!("{}", e.diagnostic));
        for s in &spec.kappa.selections {
            assert_eq!(s.boxes.len(), 4);
            for (i, u) in s.boxes.iter().enumerate() {
                assert!(u.norm_inf() == 20 && cfg.b_box(u).intersect(&IntBox::ball(s.x, cfg.l0_hat)).is_some());
                for v in &s.boxes[i + 1..] {
                    assert!(projected_distance(u, v, s.axis) >= cfg.separation());
                }
            }
        }
        cfg.c_prime = 1.0;
        let e = extract_interface(&classes, &a, &cfg).unwrap();
        assert!(e.spec.is_none());
        assert!(e.diagnostic.contains("unreachable"), "{}", e.diagnostic);
    }

    #[test]
    fn volume_and_capacity_ratios() {
        let gt = GreenTable::new(3).unwrap();
        let z = interface_volume_capacity(&gt, &[], 2, 10).unwrap();
        assert_eq!((z.volume_ratio, z.capacity_ratio), (0.0, 0.0));
        let one = interface_volume_capacity(&gt, &[Point::origin(3)], 3, 10).unwrap();
        assert!((one.volume_ratio - 27.0 / 1000.0).abs() < 1e-15);
        assert!(one.capacity_ratio > 0.0 && !one.subsampled);
    }
}
