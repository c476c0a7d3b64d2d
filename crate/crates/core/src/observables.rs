//! Observables of a field sample: pairings of the random measure
//! `X_N = N^{-d} Σ φ_x δ_{x/N}` with test functions, the mollified field,
//! the exact variance of a pairing, the target profile `-(h̄ - α) h_A`, the
//! bounded-Lipschitz distance `d_J`, and pairings of the profile measures
//! `Y_N`, `Φ(u)` and `Z_N` with `η ⊗ F` for local functionals `F`.

use std::collections::HashMap;
use std::sync::Arc;

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::{brownian_potential_ball, FineLatticePotential};
use crate::dirichlet::KilledOperator;
use crate::error::{LabError, Result};
use crate::fftn::autocorrelation_pairing;
use crate::gff::{Decomposer, FieldSample, GffSampler};
use crate::green::GreenTable;
use crate::lattice::{IntBox, Point, RealBox, ShapeKind, ShapeSpec, SiteSet};
use crate::mc::{derive_seed, Estimate, Moments};
use crate::testfn::{Mollifier, TestFunction};

/// `α` together with a stand-in for the critical level `h̄`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercolationLevels {
    pub alpha: f64,
    pub h_bar_estimate: f64,
}

impl PercolationLevels {
    pub fn new(alpha: f64, h_bar_estimate: f64) -> Result<Self> {
        if !(alpha < h_bar_estimate) {
            return Err(LabError::invalid("need α < h̄_est"));
        }
        Ok(PercolationLevels { alpha, h_bar_estimate })
    }

    pub fn gap(&self) -> f64 {
        self.h_bar_estimate - self.alpha
    }
}

/// Lattice box of the sites `x` with `x/N` in `b`.
fn lattice_range(b: &RealBox, n: u32) -> Option<IntBox> {
    let nf = n as f64;
    let lo: Vec<i32> = b.lo.iter().map(|v| (v * nf).ceil() as i32).collect();
    let hi: Vec<i32> = b.hi.iter().map(|v| (v * nf).floor() as i32).collect();
    if lo.iter().zip(&hi).any(|(l, h)| l > h) {
        return None;
    }
    Some(IntBox::new(Point::new(&lo).ok()?, Point::new(&hi).ok()?).expect("ordered corners"))
}

/// Sites `x` with `η(x/N) ≠ 0`, with the values.
pub fn scaled_sites(eta: &TestFunction, n: u32) -> Vec<(Point, f64)> {
    let nf = n as f64;
    let Some(range) = lattice_range(eta.support_box(), n) else {
        return Vec::new();
    };
    range
        .iter()
        .filter_map(|x| {
            let v = eta.eval(&x.to_real(1.0 / nf));
            (v != 0.0).then_some((x, v))
        })
        .collect()
}

fn window_values(phi: &FieldSample, sites: &[(Point, f64)]) -> Result<Vec<f64>> {
    sites
        .iter()
        .map(|(x, _)| {
            phi.value(x)
                .ok_or_else(|| LabError::OutsideDomain(format!("{x}: test function support leaves the window")))
        })
        .collect()
}

/// `⟨X_N, η⟩ = N^{-d} Σ_x η(x/N) φ_x`.
pub fn x_pair(phi: &FieldSample, eta: &TestFunction, n: u32) -> Result<f64> {
    let sites = scaled_sites(eta, n);
    let vals = window_values(phi, &sites)?;
    let s: f64 = sites.iter().zip(&vals).map(|((_, e), v)| e * v).sum();
    Ok(s / (n as f64).powi(eta.dim() as i32))
}

/// `X^ε_N(x) = N^{-d} Σ_z χ_ε(z/N - x) φ_z`, the pairing with the shifted mollifier.
pub fn mollified_field(phi: &FieldSample, moll: &Mollifier, x: &[f64], n: u32) -> Result<f64> {
    x_pair(phi, &TestFunction::bump(x.to_vec(), moll.eps)?, n)
}

/// `N^{d-2} Var⟨X_N, η⟩ = N^{d-2} N^{-2d} Σ_{x,y} η(x/N) g(x - y) η(y/N)`,
/// which tends to `d E(η)`.
pub fn var_exact(eta: &TestFunction, n: u32, gt: &GreenTable) -> Result<f64> {
    let d = gt.dim();
    if eta.dim() != d {
        return Err(LabError::DimensionMismatch { expected: d, got: eta.dim() });
    }
    let Some(range) = lattice_range(eta.support_box(), n) else {
        return Ok(0.0);
    };
    let nf = n as f64;
    let values: Vec<f64> = range.iter().map(|x| eta.eval(&x.to_real(1.0 / nf))).collect();
    if values.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let dims: Vec<usize> = (0..d).map(|i| range.side(i)).collect();
    let pairing = autocorrelation_pairing(&values, &dims, |k| gt.g(&Point::new(k).expect("offset")));
    Ok(pairing * nf.powi(d as i32 - 2) / nf.powi(2 * d as i32))
}

/// Hitting potential `h_A` used by the target profile.
#[derive(Clone, Debug)]
pub enum HittingPotential {
    /// Closed form for Euclidean balls in `d = 3`.
    Ball { center: Vec<f64>, radius: f64 },
    /// Lattice potential of the blow-up at a fine mesh.
    Lattice(FineLatticePotential),
}

impl HittingPotential {
    pub fn for_shape(gt: &GreenTable, shape: &ShapeSpec, mesh: u32) -> Result<Self> {
        match &shape.kind {
            ShapeKind::EuclideanBall { center, radius } if center.len() == 3 => {
                Ok(HittingPotential::Ball { center: center.clone(), radius: *radius })
            }
            _ => Ok(HittingPotential::Lattice(FineLatticePotential::new(gt, shape, mesh)?)),
        }
    }

    pub fn eval(&self, gt: &GreenTable, x: &[f64]) -> f64 {
        match self {
            HittingPotential::Ball { center, radius } => {
                let y: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
                brownian_potential_ball(*radius, &y)
            }
            HittingPotential::Lattice(p) => p.eval(gt, x),
        }
    }
}

/// `H^α_A(x) = -(h̄_est - α) h_A(x)`.
pub fn target_profile(gt: &GreenTable, h: &HittingPotential, levels: &PercolationLevels, x: &[f64]) -> f64 {
    -levels.gap() * h.eval(gt, x)
}

/// A finite signed measure on `R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub points: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, masses: Vec<f64>) -> Result<Self> {
        if points.len() != masses.len() {
            return Err(LabError::invalid("points and masses differ in length"));
        }
        Ok(DiscreteMeasure { points, masses })
    }

    pub fn dirac(x: Vec<f64>, mass: f64) -> Self {
        DiscreteMeasure { points: vec![x], masses: vec![mass] }
    }

    /// `X_N` of a sample restricted to the sites with `x/N ∈ j`.
    pub fn from_field(phi: &FieldSample, n: u32, j: &RealBox) -> Self {
        let nf = n as f64;
        let d = phi.window.dim().unwrap_or(0);
        let (points, masses) = phi
            .window
            .iter()
            .zip(&phi.values)
            .map(|(x, v)| (x.to_real(1.0 / nf), v / nf.powi(d as i32)))
            .filter(|(x, _)| j.contains(x))
            .unzip();
        DiscreteMeasure { points, masses }
    }

    /// `f(x) dx` by the midpoint rule on cells of side `h` covering `j`.
    pub fn from_density(j: &RealBox, h: f64, f: impl Fn(&[f64]) -> f64) -> Self {
        let d = j.dim();
        let counts: Vec<usize> = (0..d).map(|i| ((j.hi[i] - j.lo[i]) / h).ceil().max(1.0) as usize).collect();
        let total: usize = counts.iter().product();
        let mut points = Vec::with_capacity(total);
        let mut masses = Vec::with_capacity(total);
        for mut k in 0..total {
            let mut x = vec![0.0; d];
            let mut vol = 1.0;
            for i in (0..d).rev() {
                let c = k % counts[i];
                k /= counts[i];
                let lo = j.lo[i] + c as f64 * h;
                let hi = (lo + h).min(j.hi[i]);
                x[i] = 0.5 * (lo + hi);
                vol *= hi - lo;
            }
            masses.push(f(&x) * vol);
            points.push(x);
        }
        DiscreteMeasure { points, masses }
    }

    pub fn pair(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.points.iter().zip(&self.masses).map(|(x, m)| m * f(x)).sum()
    }

    pub fn total_variation(&self) -> f64 {
        self.masses.iter().map(|m| m.abs()).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        DiscreteMeasure { points: self.points.clone(), masses: self.masses.iter().map(|m| c * m).collect() }
    }
}

/// Lower bound and linear-programming estimate of `d_J(μ, ν)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DjEstimate {
    /// `sup_y |⟨μ - ν, χ_ε(· - y)⟩| / ‖χ_ε‖_BL` over `y` with `B(y, ε) ⊆ J`.
    pub location: f64,
    pub location_argmax: Option<Vec<f64>>,
    /// Optimal value of the program over functions on the atoms.
    pub lp: f64,
    pub atoms: usize,
    /// Lipschitz constraints only between atoms closer than this (`∞` for all pairs);
    /// dropping constraints can only raise the optimum.
    pub pair_radius: f64,
}

/// Atom count up to which every pair gets a Lipschitz constraint.
const FULL_PAIRS: usize = 300;

/// `d_J(μ, ν) = sup{|⟨μ - ν, η⟩| : supp η ⊆ J, ‖η‖_∞ + Lip(η) ≤ 1}`.
///
/// On the atoms `x_i` of `μ - ν` the program maximizes `Σ m_i η_i` subject to
/// `|η_i| ≤ s`, `|η_i - η_j| ≤ L |x_i - x_j|`, `|η_i| ≤ L dist(x_i, J^c)` and
/// `s + L ≤ 1`; by McShane extension (truncated at `±s`, zero off `J`) its
/// value is the supremum for atoms in `J`.
pub fn d_j(mu: &DiscreteMeasure, nu: &DiscreteMeasure, j: &RealBox, moll: &Mollifier, ys: &[Vec<f64>], y_spacing: f64) -> Result<DjEstimate> {
    if y_spacing > moll.eps / 4.0 {
        return Err(LabError::Numerical(format!(
            "location grid spacing {y_spacing} exceeds ε/4 = {}",
            moll.eps / 4.0
        )));
    }
    let mut atoms: HashMap<Vec<u64>, (Vec<f64>, f64)> = HashMap::new();
    for (m, sign) in [(mu, 1.0), (nu, -1.0)] {
        for (x, w) in m.points.iter().zip(&m.masses) {
            if !j.contains(x) {
                if *w != 0.0 {
                    return Err(LabError::OutsideDomain("measure charges points outside J".into()));
                }
                continue;
            }
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            atoms.entry(key).or_insert_with(|| (x.clone(), 0.0)).1 += sign * w;
        }
    }
    let mut atoms: Vec<(Vec<f64>, f64)> = atoms.into_values().filter(|(_, m)| *m != 0.0).collect();
    atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite coordinates"));

    let diff = |y: &[f64]| {
        let f = |x: &[f64]| {
            let z: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            moll.eval(&z)
        };
        mu.pair(f) - nu.pair(f)
    };
    let inside = |y: &[f64]| (0..y.len()).all(|i| y[i] - moll.eps >= j.lo[i] && y[i] + moll.eps <= j.hi[i]);
    let (mut location, mut location_argmax) = (0.0, None);
    for y in ys.iter().filter(|y| inside(y)) {
        let v = diff(y).abs() / moll.bl_norm();
        if v > location {
            location = v;
            location_argmax = Some(y.clone());
        }
    }

    let n = atoms.len();
    if n == 0 {
        return Ok(DjEstimate { location, location_argmax, lp: 0.0, atoms: 0, pair_radius: f64::INFINITY });
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    let pair_radius = if n <= FULL_PAIRS {
        f64::INFINITY
    } else {
        // Three times the median nearest-neighbour distance.
        let mut nn: Vec<f64> = (0..n)
            .map(|i| (0..n).filter(|k| *k != i).map(|k| dist(&atoms[i].0, &atoms[k].0)).fold(f64::INFINITY, f64::min))
            .collect();
        nn.sort_by(|a, b| a.partial_cmp(b).unwrap());
        3.0 * nn[n / 2]
    };
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let s = lp.add_var(0.0, (0.0, 1.0));
    let l = lp.add_var(0.0, (0.0, 1.0));
    let eta: Vec<_> = atoms.iter().map(|(_, m)| lp.add_var(*m, (-1.0, 1.0))).collect();
    lp.add_constraint(&[(s, 1.0), (l, 1.0)], ComparisonOp::Le, 1.0);
    for (i, (x, _)) in atoms.iter().enumerate() {
        let edge = (0..x.len()).map(|k| (x[k] - j.lo[k]).min(j.hi[k] - x[k])).fold(f64::INFINITY, f64::min);
        for sign in [1.0, -1.0] {
            lp.add_constraint(&[(eta[i], sign), (s, -1.0)], ComparisonOp::Le, 0.0);
            lp.add_constraint(&[(eta[i], sign), (l, -edge)], ComparisonOp::Le, 0.0);
        }
        for k in i + 1..n {
            let r = dist(x, &atoms[k].0);
            if r <= pair_radius {
                for sign in [1.0, -1.0] {
                    lp.add_constraint(&[(eta[i], sign), (eta[k], -sign), (l, -r)], ComparisonOp::Le, 0.0);
                }
            }
        }
    }
    let sol = lp.solve().map_err(|e| LabError::Solver(format!("d_J program: {e}")))?;
    Ok(DjEstimate { location, location_argmax, lp: sol.objective(), atoms: n, pair_radius })
}

/// Bounded local Lipschitz functionals of a field configuration, evaluated
/// on `f(γ)` for `γ` in a finite support around the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LocalFunctional {
    Constant { value: f64 },
    /// `clip(f(offset), lo, hi)`.
    ClippedSite { offset: Point, lo: f64, hi: f64 },
    /// `clip(mean_{γ ∈ offsets} f(γ), lo, hi)`.
    ClippedAverage { offsets: Vec<Point>, lo: f64, hi: f64 },
    Combination { terms: Vec<(f64, LocalFunctional)> },
}

impl LocalFunctional {
    pub fn clipped_origin(dim: usize, c: f64) -> Self {
        LocalFunctional::ClippedSite { offset: Point::origin(dim), lo: -c, hi: c }
    }

    /// Offsets the functional reads, sorted and deduplicated.
    pub fn support(&self) -> Vec<Point> {
        let mut out = Vec::new();
        self.collect_support(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect_support(&self, out: &mut Vec<Point>) {
        match self {
            LocalFunctional::Constant { .. } => {}
            LocalFunctional::ClippedSite { offset, .. } => out.push(*offset),
            LocalFunctional::ClippedAverage { offsets, .. } => out.extend(offsets.iter().copied()),
            LocalFunctional::Combination { terms } => terms.iter().for_each(|(_, f)| f.collect_support(out)),
        }
    }

    /// Constant `K` with `|F(f) - F(g)| ≤ K max_Γ |f - g|`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            LocalFunctional::Constant { .. } => 0.0,
            LocalFunctional::ClippedSite { .. } | LocalFunctional::ClippedAverage { .. } => 1.0,
            LocalFunctional::Combination { terms } => terms.iter().map(|(c, f)| c.abs() * f.lipschitz()).sum(),
        }
    }

    pub fn bound(&self) -> f64 {
        match self {
            LocalFunctional::Constant { value } => value.abs(),
            LocalFunctional::ClippedSite { lo, hi, .. } | LocalFunctional::ClippedAverage { lo, hi, .. } => {
                lo.abs().max(hi.abs())
            }
            LocalFunctional::Combination { terms } => terms.iter().map(|(c, f)| c.abs() * f.bound()).sum(),
        }
    }

    /// `F(f)` with `f` given on offsets.
    pub fn eval(&self, f: &dyn Fn(&Point) -> f64) -> f64 {
        match self {
            LocalFunctional::Constant { value } => *value,
            LocalFunctional::ClippedSite { offset, lo, hi } => f(offset).clamp(*lo, *hi),
            LocalFunctional::ClippedAverage { offsets, lo, hi } => {
                (offsets.iter().map(f).sum::<f64>() / offsets.len().max(1) as f64).clamp(*lo, *hi)
            }
            LocalFunctional::Combination { terms } => terms.iter().map(|(c, g)| c * g.eval(f)).sum(),
        }
    }

    /// `F` of values listed in the order of [`LocalFunctional::support`].
    pub fn eval_on(&self, support: &[Point], values: &[f64]) -> f64 {
        self.eval(&|p: &Point| values[support.binary_search(p).expect("offset in support")])
    }
}

/// Values of `τ_x φ` on the support of `F`.
fn shifted(phi: &FieldSample, x: &Point, support: &[Point]) -> Result<Vec<f64>> {
    support
        .iter()
        .map(|g| {
            let y = x.add(g);
            phi.value(&y).ok_or_else(|| LabError::OutsideDomain(format!("{y}: functional support leaves the window")))
        })
        .collect()
}

/// `⟨Y_N, η ⊗ F⟩ = N^{-d} Σ_x η(x/N) F(τ_x φ)`.
pub fn y_pair(phi: &FieldSample, eta: &TestFunction, f: &LocalFunctional, n: u32) -> Result<f64> {
    let support = f.support();
    let mut s = 0.0;
    for (x, e) in scaled_sites(eta, n) {
        s += e * f.eval_on(&support, &shifted(phi, &x, &support)?);
    }
    Ok(s / (n as f64).powi(eta.dim() as i32))
}

/// `⟨Φ(u), η ⊗ F⟩ = ∫ η(x) E[F(φ|_Γ + u(x))] dx` with the midpoint rule on
/// `quad^d` cells over the support of `η`, and `samples` exact draws of
/// `φ|_Γ` shared by all nodes. The error bar comes from the per-draw integrals.
pub fn phi_pair(
    gt: &GreenTable,
    u: impl Fn(&[f64]) -> f64 + Sync,
    eta: &TestFunction,
    f: &LocalFunctional,
    quad: usize,
    samples: usize,
    seed: u64,
) -> Result<Estimate> {
    if quad == 0 || samples < 2 {
        return Err(LabError::invalid("need quadrature nodes and at least two samples"));
    }
    let b = eta.support_box();
    let d = b.dim();
    let h: Vec<f64> = (0..d).map(|i| (b.hi[i] - b.lo[i]) / quad as f64).collect();
    let cell: f64 = h.iter().product();
    let mut nodes = Vec::new();
    for k in 0..quad.pow(d as u32) {
        let mut r = k;
        let x: Vec<f64> = (0..d)
            .map(|i| {
                let c = r % quad;
                r /= quad;
                b.lo[i] + (c as f64 + 0.5) * h[i]
            })
            .collect();
        let w = eta.eval(&x) * cell;
        if w != 0.0 {
            nodes.push((w, u(&x)));
        }
    }
    let support = f.support();
    let draws: Vec<Vec<f64>> = if support.is_empty() {
        vec![Vec::new(); samples]
    } else {
        let sampler = GffSampler::new(gt, &SiteSet::from_points(support.clone())?)?;
        sampler.sample(samples, seed).into_iter().map(|s| s.values).collect()
    };
    let integrals: Vec<f64> = draws
        .par_iter()
        .map(|phi| {
            let mut shifted = phi.clone();
            nodes
                .iter()
                .map(|(w, ux)| {
                    shifted.iter_mut().zip(phi).for_each(|(s, p)| *s = p + ux);
                    w * f.eval_on(&support, &shifted)
                })
                .sum()
        })
        .collect();
    let mut m = Moments::default();
    integrals.iter().for_each(|v| m.push(*v));
    Ok(m.estimate())
}

/// `⟨Z_N, η ⊗ F⟩ = N^{-d} Σ_x η(x/N) E[F(τ_x h + ψ)]` with `L = ⌊log N⌋`:
/// `φ = ψ + h` on the window with `U` the interior sites off `LZ^d`, and the
/// inner expectation samples `ψ` on `x + Γ` from the Green function killed
/// outside `U`.
///
/// Everything except `h` is independent of the sample and is built once.
pub struct ZPairing {
    n: u32,
    window: Arc<SiteSet>,
    decomposer: Decomposer,
    support: Vec<Point>,
    f: LocalFunctional,
    sites: Vec<(Point, f64)>,
    /// Per site: coordinates of `x + Γ` inside `U` and the Cholesky factor of their covariance.
    laws: Vec<(Vec<usize>, DMatrix<f64>)>,
    norm: f64,
}

impl ZPairing {
    pub fn new(window: Arc<SiteSet>, eta: &TestFunction, f: &LocalFunctional, n: u32) -> Result<Self> {
        let l = (n as f64).ln().floor() as i32;
        if l < 2 {
            return Err(LabError::invalid("⌊log N⌋ < 2 leaves no mesoscopic grid"));
        }
        let on_grid = |p: &Point| p.coords().iter().all(|v| v.rem_euclid(l) == 0);
        let u = SiteSet::from_points(
            window.iter().filter(|p| !on_grid(p) && p.neighbors().all(|q| window.contains(&q))).copied().collect(),
        )?;
        let decomposer = Decomposer::new(window.clone(), &u)?;
        let op = KilledOperator::new(&u);
        let support = f.support();
        let sites = scaled_sites(eta, n);
        for (x, _) in &sites {
            for g in &support {
                if !window.contains(&x.add(g)) {
                    return Err(LabError::OutsideDomain(format!("{}: functional support leaves the window", x.add(g))));
                }
            }
        }
        let laws = sites
            .par_iter()
            .map(|(x, _)| {
                let pts: Vec<Point> = support.iter().map(|g| x.add(g)).collect();
                let free: Vec<usize> = (0..pts.len()).filter(|i| u.contains(&pts[*i])).collect();
                let mut cov = DMatrix::zeros(free.len(), free.len());
                for (a, ia) in free.iter().enumerate() {
                    let col = op.green_column(&pts[*ia])?;
                    for (b, ib) in free.iter().enumerate() {
                        cov[(b, a)] = col[u.position(&pts[*ib]).expect("free site")];
                    }
                }
                if free.is_empty() {
                    return Ok((free, cov));
                }
                let sym = (&cov + cov.transpose()) * 0.5;
                let chol = sym.cholesky().ok_or_else(|| LabError::Solver("ψ covariance not positive definite".into()))?;
                Ok((free, chol.l()))
            })
            .collect::<Result<_>>()?;
        let norm = (n as f64).powi(eta.dim() as i32);
        Ok(ZPairing { n, window, decomposer, support, f: f.clone(), sites, laws, norm })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    /// Inner Monte Carlo over `inner` draws of `ψ`, independent across sites.
    pub fn pair(&self, phi: &FieldSample, inner: usize, seed: u64) -> Result<Estimate> {
        if inner < 2 {
            return Err(LabError::invalid("need at least two inner samples"));
        }
        let h = self.decomposer.decompose(phi)?.h;
        let h_field = FieldSample::from_values(Arc::clone(&self.window), h)?;
        let frozen: Vec<Vec<f64>> =
            self.sites.iter().map(|(x, _)| shifted(&h_field, x, &self.support)).collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "z-pair"));
        let mut vals = vec![0.0; self.support.len()];
        let mut m = Moments::default();
        for _ in 0..inner {
            let mut total = 0.0;
            for (((_, e), hx), (free, lower)) in self.sites.iter().zip(&frozen).zip(&self.laws) {
                vals.copy_from_slice(hx);
                if !free.is_empty() {
                    let z = DVector::from_fn(free.len(), |_, _| StandardNormal.sample(&mut rng));
                    let v = lower * z;
                    for (k, i) in free.iter().enumerate() {
                        vals[*i] += v[k];
                    }
                }
                total += e * self.f.eval_on(&self.support, &vals);
            }
            m.push(total / self.norm);
        }
        Ok(m.estimate())
    }
}

/// One-shot [`ZPairing`].
pub fn z_pair(phi: &FieldSample, eta: &TestFunction, f: &LocalFunctional, n: u32, inner: usize, seed: u64) -> Result<Estimate> {
    ZPairing::new(phi.window.clone(), eta, f, n)?.pair(phi, inner, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::energy_e;
    use rand::Rng;
    use std::sync::OnceLock;

    fn table() -> &'static GreenTable {
        static T: OnceLock<GreenTable> = OnceLock::new();
        T.get_or_init(|| GreenTable::new(3).unwrap())
    }

    fn cube_window(r: i32) -> Arc<SiteSet> {
        Arc::new(SiteSet::from_box(&IntBox::ball(Point::origin(3), r)))
    }

    #[test]
    fn x_pair_basics() {
        let w = cube_window(6);
        let eta = TestFunction::tent(vec![0.0; 3], 0.5).unwrap();
        assert_eq!(x_pair(&FieldSample::from_fn(w.clone(), |_| 0.0), &eta, 10).unwrap(), 0.0);
        let ones = FieldSample::from_fn(w.clone(), |_| 1.0);
        let riemann = x_pair(&ones, &eta, 10).unwrap();
        assert!((riemann - eta.integral()).abs() < 0.05 * eta.integral());
        let wide = TestFunction::tent(vec![0.0; 3], 0.8).unwrap();
        assert!(x_pair(&ones, &wide, 10).is_err());
    }

    #[test]
    fn mollified_field_is_the_shifted_pairing() {
        let w = cube_window(8);
        let mut rng = crate::mc::stream_rng(2, 0);
        let a = FieldSample::from_values(w.clone(), (0..w.len()).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let b = FieldSample::from_values(w.clone(), a.values.iter().map(|v| 2.0 - 3.0 * v).collect()).unwrap();
        let m = Mollifier::new(3, 0.3).unwrap();
        let x = [0.1, -0.05, 0.2];
        let direct = x_pair(&a, &TestFunction::bump(x.to_vec(), 0.3).unwrap(), 10).unwrap();
        assert_eq!(mollified_field(&a, &m, &x, 10).unwrap(), direct);
        let fb = mollified_field(&b, &m, &x, 10).unwrap();
        let ones = FieldSample::from_fn(w, |_| 1.0);
        let c = mollified_field(&ones, &m, &x, 10).unwrap();
        assert!((fb - (2.0 * c - 3.0 * direct)).abs() < 1e-12);
        assert!((c - 1.0).abs() < 0.05);
    }

    #[test]
    fn var_exact_matches_double_sum() {
        let gt = table();
        let eta = TestFunction::tent(vec![0.05, 0.0, -0.1], 0.3).unwrap();
        let n = 10;
        let sites = scaled_sites(&eta, n);
        let mut direct = 0.0;
        for (x, a) in &sites {
            for (y, b) in &sites {
                direct += a * b * gt.g_between(x, y);
            }
        }
        let nf = n as f64;
        direct *= nf / nf.powi(6);
        let fast = var_exact(&eta, n, gt).unwrap();
        assert!((fast - direct).abs() < 1e-10 * direct, "{fast} vs {direct}");
        let zero = TestFunction::tent(vec![0.05; 3], 0.01).unwrap();
        assert_eq!(var_exact(&zero, 10, gt).unwrap(), 0.0);
    }

    #[test]
    fn var_exact_trends_to_the_energy() {
        let gt = table();
        let eta = TestFunction::mollified_ball(vec![0.0; 3], 0.5, 0.25).unwrap();
        let target = 3.0 * energy_e(&eta).unwrap().value;
        let gaps: Vec<f64> = [8, 16, 32].iter().map(|n| (var_exact(&eta, *n, gt).unwrap() / target - 1.0).abs()).collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn sample_variance_matches_var_exact() {
        let gt = table();
        let w = cube_window(5);
        let sampler = GffSampler::new(gt, &w).unwrap();
        let eta = TestFunction::tent(vec![0.0; 3], 0.45).unwrap();
        let n = 10;
        let mut m = Moments::default();
        for s in sampler.sample(10_000, 77) {
            m.push(x_pair(&s, &eta, n).unwrap());
        }
        let v = var_exact(&eta, n, gt).unwrap() / n as f64;
        assert!(m.estimate().z_exact(0.0).abs() < 3.0);
        // Standard error of the sample variance of a Gaussian: v √(2/(n-1)).
        let se = v * (2.0 / (m.n as f64 - 1.0)).sqrt();
        assert!((m.variance() - v).abs() < 3.0 * se, "{} vs {v}", m.variance());
    }

    #[test]
    fn target_profile_cases() {
        let gt = table();
        let lv = PercolationLevels::new(0.0, 2.0).unwrap();
        assert!(PercolationLevels::new(2.0, 1.0).is_err());
        let ball = ShapeSpec::euclidean_ball(vec![0.0; 3], 0.5, 1.0).unwrap();
        let h = HittingPotential::for_shape(gt, &ball, 4).unwrap();
        assert_eq!(target_profile(gt, &h, &lv, &[0.1, 0.0, 0.0]), -2.0);
        assert!((target_profile(gt, &h, &lv, &[0.0, 1.0, 0.0]) + 1.0).abs() < 1e-15);
        assert!(target_profile(gt, &h, &lv, &[1e6, 0.0, 0.0]).abs() < 1e-5);
        let cube = ShapeSpec::linf_ball(vec![0.0; 3], 0.5, 1.0).unwrap();
        let hc = HittingPotential::for_shape(gt, &cube, 4).unwrap();
        assert_eq!(target_profile(gt, &hc, &lv, &[0.0; 3]), -2.0);
        let far = target_profile(gt, &hc, &lv, &[3.0, 0.0, 0.0]);
        assert!(far < 0.0 && far > -1.0);
    }

    #[test]
    fn d_j_two_diracs() {
        let j = RealBox::cube(&[0.0; 3], 10.0);
        let m = Mollifier::new(3, 0.4).unwrap();
        for v in [0.5, 1.0, 2.0] {
            let mu = DiscreteMeasure::dirac(vec![0.0; 3], 1.0);
            let nu = DiscreteMeasure::dirac(vec![v, 0.0, 0.0], 1.0);
            let ys: Vec<Vec<f64>> = (-40..=80).map(|k| vec![k as f64 * 0.05, 0.0, 0.0]).collect();
            let e = d_j(&mu, &nu, &j, &m, &ys, 0.05).unwrap();
            let exact = 2.0 * v / (v + 2.0);
            assert!((e.lp - exact).abs() < 1e-9, "{v}: {} vs {exact}", e.lp);
            assert!(e.location > 0.0 && e.location <= e.lp);
            let scaled = d_j(&mu.scaled(-2.5), &nu.scaled(-2.5), &j, &m, &ys, 0.05).unwrap();
            assert!((scaled.lp - 2.5 * e.lp).abs() < 1e-9);
            let same = d_j(&mu, &mu, &j, &m, &ys, 0.05).unwrap();
            assert_eq!((same.lp, same.location), (0.0, 0.0));
        }
        let mu = DiscreteMeasure::dirac(vec![0.0; 3], 1.0);
        assert!(d_j(&mu, &mu, &j, &m, &[], 0.2).is_err());
    }

    #[test]
    fn d_j_near_the_boundary_is_capped_by_the_distance() {
        // A unit mass at distance 0.25 from ∂J: the best η is min(s, L·0.25) with s + L = 1.
        let j = RealBox::new(vec![0.0; 3], vec![1.0; 3]);
        let m = Mollifier::new(3, 0.1).unwrap();
        let mu = DiscreteMeasure::dirac(vec![0.25, 0.5, 0.5], 1.0);
        let zero = DiscreteMeasure::new(vec![], vec![]).unwrap();
        let e = d_j(&mu, &zero, &j, &m, &[vec![0.5; 3]], 0.01).unwrap();
        assert!((e.lp - 0.2).abs() < 1e-9, "{}", e.lp);
    }

    #[test]
    fn local_functionals() {
        let f = LocalFunctional::Combination {
            terms: vec![
                (2.0, LocalFunctional::clipped_origin(3, 1.0)),
                (-1.0, LocalFunctional::ClippedAverage { offsets: vec![Point::unit(3, 0, 1), Point::origin(3)], lo: -2.0, hi: 2.0 }),
                (0.5, LocalFunctional::Constant { value: 3.0 }),
            ],
        };
        assert_eq!(f.support().len(), 2);
        assert_eq!(f.lipschitz(), 3.0);
        assert_eq!(f.bound(), 5.5);
        let mut rng = crate::mc::stream_rng(8, 0);
        let sup = f.support();
        for _ in 0..1000 {
            let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let (fa, fb) = (f.eval_on(&sup, &a), f.eval_on(&sup, &b));
            let dist = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!((fa - fb).abs() <= f.lipschitz() * dist + 1e-12);
            assert!(fa.abs() <= f.bound());
        }
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<LocalFunctional>(&json).unwrap(), f);
    }

    #[test]
    fn y_pair_cases() {
        let w = cube_window(7);
        let eta = TestFunction::tent(vec![0.0; 3], 0.5).unwrap();
        let n = 10;
        let mass: f64 = scaled_sites(&eta, n).iter().map(|(_, v)| v).sum::<f64>() / 1000.0;
        let zero = FieldSample::from_fn(w.clone(), |_| 0.0);
        let two = FieldSample::from_fn(w.clone(), |_| 2.0);
        let clip = LocalFunctional::clipped_origin(3, 1.0);
        assert!((y_pair(&zero, &eta, &LocalFunctional::Constant { value: 3.0 }, n).unwrap() - 3.0 * mass).abs() < 1e-12);
        assert_eq!(y_pair(&zero, &eta, &clip, n).unwrap(), 0.0);
        assert!((y_pair(&two, &eta, &clip, n).unwrap() - mass).abs() < 1e-12);
        // Linearity in F.
        let mut rng = crate::mc::stream_rng(5, 0);
        let phi = FieldSample::from_values(w.clone(), (0..w.len()).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let g = LocalFunctional::ClippedSite { offset: Point::unit(3, 1, -1), lo: -0.5, hi: 1.5 };
        let comb = LocalFunctional::Combination { terms: vec![(2.0, clip.clone()), (-3.0, g.clone())] };
        let lhs = y_pair(&phi, &eta, &comb, n).unwrap();
        let rhs = 2.0 * y_pair(&phi, &eta, &clip, n).unwrap() - 3.0 * y_pair(&phi, &eta, &g, n).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn phi_pair_cases() {
        let gt = table();
        let eta = TestFunction::tent(vec![0.0; 3], 0.5).unwrap();
        let c = phi_pair(gt, |_| 0.0, &eta, &LocalFunctional::Constant { value: 2.0 }, 12, 50, 1).unwrap();
        assert!((c.value - 2.0 * eta.integral()).abs() < 0.02 * eta.integral());
        assert!(c.se < 1e-7);
        let clip = LocalFunctional::clipped_origin(3, 1.0);
        let odd = phi_pair(gt, |_| 0.0, &eta, &clip, 8, 4000, 2).unwrap();
        assert!(odd.z_exact(0.0).abs() < 4.0);
        let sat = phi_pair(gt, |_| 50.0, &eta, &clip, 12, 100, 3).unwrap();
        assert!((sat.value - c.value / 2.0).abs() < 1e-12);
    }

    #[test]
    fn z_pair_cases() {
        let gt = table();
        let w = cube_window(7);
        let sampler = GffSampler::new(gt, &w).unwrap();
        let n = 64;
        let eta = TestFunction::bump(vec![0.0; 3], 5.0 / 64.0).unwrap();
        let phi = sampler.sample(1, 4).remove(0);
        let mass: f64 = scaled_sites(&eta, n).iter().map(|(_, v)| v).sum::<f64>() / (n as f64).powi(3);
        let c = z_pair(&phi, &eta, &LocalFunctional::Constant { value: 1.5 }, n, 10, 1).unwrap();
        assert!((c.value - 1.5 * mass).abs() < 1e-12 && c.se == 0.0);
        // F(f) = f_0: the inner ψ-mean vanishes, leaving the pairing of h.
        let lin = LocalFunctional::clipped_origin(3, 1e6);
        let z = z_pair(&phi, &eta, &lin, n, 2000, 2).unwrap();
        let l = 4;
        let on_grid = |p: &Point| p.coords().iter().all(|v| v.rem_euclid(l) == 0);
        let u = SiteSet::from_points(
            w.iter().filter(|p| !on_grid(p) && p.neighbors().all(|q| w.contains(&q))).copied().collect(),
        )
        .unwrap();
        let h = crate::gff::decompose(&phi, &u).unwrap().h;
        let hx = x_pair(&FieldSample::from_values(w.clone(), h).unwrap(), &eta, n).unwrap();
        assert!(z.z_exact(hx).abs() < 4.0, "{z:?} vs {hx}");
    }

    #[test]
    fn y_and_z_pairings_are_close() {
        let gt = table();
        let w = cube_window(7);
        let sampler = GffSampler::new(gt, &w).unwrap();
        let n = 64;
        let f = LocalFunctional::clipped_origin(3, 1.0);
        let samples = sampler.sample(200, 11);
        // Bump radii up to the largest whose lattice support stays inside the 15^3 window.
        let mut means = Vec::new();
        for r in [4.0, 6.0] {
            let eta = TestFunction::bump(vec![0.0; 3], r / 64.0).unwrap();
            let zp = ZPairing::new(w.clone(), &eta, &f, n).unwrap();
            let (mut gap, mut abs) = (Moments::default(), Moments::default());
            for (i, phi) in samples.iter().enumerate() {
                let y = y_pair(phi, &eta, &f, n).unwrap();
                let z = zp.pair(phi, 100, i as u64).unwrap();
                gap.push(y - z.value);
                abs.push((y - z.value).abs());
            }
            assert!(gap.estimate().z_exact(0.0).abs() < 4.0, "{r}: {:?}", gap.estimate());
            means.push(abs.mean());
        }
        assert!(means[1] < means[0] && means[1] < 0.12, "{means:?}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn d_j_is_symmetric_and_bounded_by_the_mass(
            atoms in proptest::collection::vec(((0.5f64..3.5, 0.5f64..3.5, 0.5f64..3.5), -2.0f64..2.0), 1..8),
        ) {
            let j = RealBox::new(vec![0.0; 3], vec![4.0; 3]);
            let m = Mollifier::new(3, 0.4).unwrap();
            let (pts, masses): (Vec<Vec<f64>>, Vec<f64>) = atoms.iter().map(|((x, y, z), w)| (vec![*x, *y, *z], *w)).unzip();
            let mu = DiscreteMeasure::new(pts, masses.clone()).unwrap();
            let zero = DiscreteMeasure::new(vec![], vec![]).unwrap();
            let ys = vec![vec![2.0; 3]];
            let ab = d_j(&mu, &zero, &j, &m, &ys, 0.1).unwrap();
            let ba = d_j(&zero, &mu, &j, &m, &ys, 0.1).unwrap();
            proptest::prop_assert!((ab.lp - ba.lp).abs() < 1e-9);
            proptest::prop_assert!(ab.lp >= -1e-12);
            proptest::prop_assert!(ab.lp <= masses.iter().map(|w| w.abs()).sum::<f64>() + 1e-9);
            proptest::prop_assert!(ab.location <= ab.lp + 1e-9);
        }
    }
}
