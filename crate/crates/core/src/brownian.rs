//! Continuum potential theory for Brownian motion in `R^3` with generator
//! `½Δ`: closed-form ball potentials, walk-on-spheres hitting estimators and
//! Brownian capacities.
//!
//! Walk-on-spheres runs inside a sphere enclosing the obstacle. Outside it,
//! the walk either escapes (probability `1 - R/|y|`) or is moved to the
//! sphere according to the harmonic measure seen from `y`, which by Kelvin
//! inversion is the Poisson kernel of the inverted point `R² y/|y|²`. Both
//! steps are exact, so the infinite horizon needs no truncation.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::green::GreenTable;
use crate::lattice::{blow_up, BoxUnion, RealBox, ShapeSpec};
use crate::mc::{binomial_estimate, par_blocks, Estimate};
use crate::potential::{equilibrium_measure, EquilibriumMeasure};

/// `W_x[H_B < ∞]` for the Euclidean ball of radius `r` at the origin.
pub fn brownian_potential_ball(r: f64, x: &[f64]) -> f64 {
    let d = x.len() as i32;
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n <= r {
        1.0
    } else {
        (r / n).powi(d - 2)
    }
}

/// Brownian Green kernel `Γ(d/2-1) / (2π^{d/2}) |x|^{2-d}`.
pub fn brownian_green(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    statrs::function::gamma::gamma(d / 2.0 - 1.0) / (2.0 * PI.powf(d / 2.0)) * r.powf(2.0 - d)
}

/// A closed set Brownian motion can be absorbed on.
pub trait Obstacle: Sync {
    fn distance(&self, x: &[f64]) -> f64;
    /// Centre and radius of a ball containing the set.
    fn bounding_ball(&self) -> (Vec<f64>, f64);
    /// Size of the smallest geometric feature, used to guard the shell width.
    fn min_feature(&self) -> f64;
}

impl Obstacle for ShapeSpec {
    fn distance(&self, x: &[f64]) -> f64 {
        ShapeSpec::distance(self, x)
    }

    fn bounding_ball(&self) -> (Vec<f64>, f64) {
        match &self.kind {
            crate::lattice::ShapeKind::EuclideanBall { center, radius } => (center.clone(), *radius),
            _ => box_ball(&self.bounding_box()),
        }
    }

    fn min_feature(&self) -> f64 {
        match &self.kind {
            crate::lattice::ShapeKind::BoxUnion { boxes } => {
                BoxUnion::new(boxes.clone()).min_side()
            }
            crate::lattice::ShapeKind::EuclideanBall { radius, .. }
            | crate::lattice::ShapeKind::LInfBall { radius, .. } => 2.0 * radius,
        }
    }
}

impl Obstacle for BoxUnion {
    fn distance(&self, x: &[f64]) -> f64 {
        BoxUnion::distance(self, x)
    }

    fn bounding_ball(&self) -> (Vec<f64>, f64) {
        box_ball(&self.bounding_box().expect("non-empty box union"))
    }

    fn min_feature(&self) -> f64 {
        self.min_side()
    }
}

fn box_ball(b: &RealBox) -> (Vec<f64>, f64) {
    let c: Vec<f64> = b.lo.iter().zip(&b.hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let r = b.lo.iter().zip(&b.hi).map(|(l, h)| 0.25 * (h - l) * (h - l)).sum::<f64>().sqrt();
    (c, r)
}

/// Walk-on-spheres settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BmConfig {
    /// Absorption shell width around the obstacle.
    pub shell: f64,
    pub walkers: usize,
    pub seed: u64,
}

impl BmConfig {
    pub fn new(shell: f64, walkers: usize, seed: u64) -> Self {
        BmConfig { shell, walkers, seed }
    }

    pub(crate) fn check<O: Obstacle + ?Sized>(&self, obs: &O, dim: usize) -> Result<()> {
        if dim != 3 {
            return Err(LabError::invalid("Brownian estimators are implemented for d = 3"));
        }
        if !(self.shell > 0.0) || self.walkers == 0 {
            return Err(LabError::invalid("shell width and walker budget must be positive"));
        }
        if 10.0 * self.shell > obs.min_feature() {
            return Err(LabError::Numerical(format!(
                "shell {} is not 10x below the smallest feature {}",
                self.shell,
                obs.min_feature()
            )));
        }
        Ok(())
    }
}

fn uniform_direction(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    loop {
        let mut s = 0.0;
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
            s += *v * *v;
        }
        if s > 1e-20 {
            let inv = 1.0 / s.sqrt();
            out.iter_mut().for_each(|v| *v *= inv);
            return;
        }
    }
}

/// Moves `y` (outside the sphere `(c, big_r)`) to the point where Brownian
/// motion from `y` first hits that sphere, conditioned on hitting it.
fn exterior_harmonic_point(y: &mut [f64], c: &[f64], big_r: f64, rng: &mut ChaCha8Rng) {
    let u: Vec<f64> = y.iter().zip(c).map(|(a, b)| a - b).collect();
    let a = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let axis: Vec<f64> = u.iter().map(|v| v / a).collect();
    let a_in = big_r * big_r / a;
    // |ξ - y*|^{-2} density in ρ = |ξ - y*| makes 1/ρ uniform.
    let s = rng.gen_range(1.0 / (big_r + a_in)..1.0 / (big_r - a_in));
    let rho = 1.0 / s;
    let cos_t = ((big_r * big_r + a_in * a_in - rho * rho) / (2.0 * a_in * big_r)).clamp(-1.0, 1.0);
    let sin_t = (1.0 - cos_t * cos_t).sqrt();
    let (e1, e2) = orthonormal_pair(&axis);
    let phi = rng.gen_range(0.0..2.0 * PI);
    for i in 0..3 {
        y[i] = c[i]
            + big_r * (cos_t * axis[i] + sin_t * (phi.cos() * e1[i] + phi.sin() * e2[i]));
    }
}

fn orthonormal_pair(a: &[f64]) -> ([f64; 3], [f64; 3]) {
    let t = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let dot = t[0] * a[0] + t[1] * a[1] + t[2] * a[2];
    let mut e1 = [t[0] - dot * a[0], t[1] - dot * a[1], t[2] - dot * a[2]];
    let n = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    e1.iter_mut().for_each(|v| *v /= n);
    let e2 = [
        a[1] * e1[2] - a[2] * e1[1],
        a[2] * e1[0] - a[0] * e1[2],
        a[0] * e1[1] - a[1] * e1[0],
    ];
    (e1, e2)
}

/// Whether one Brownian path from `z` ever comes within `shell` of `obs`.
pub fn bm_hits<O: Obstacle + ?Sized>(obs: &O, z: &[f64], shell: f64, rng: &mut ChaCha8Rng) -> bool {
    let (c, rb) = obs.bounding_ball();
    let big_r = rb + shell;
    let mut y = z.to_vec();
    let mut dir = vec![0.0; y.len()];
    loop {
        let r = y.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if r > big_r {
            if rng.gen::<f64>() >= big_r / r {
                return false;
            }
            exterior_harmonic_point(&mut y, &c, big_r, rng);
        }
        let dist = obs.distance(&y);
        if dist <= shell {
            return true;
        }
        uniform_direction(rng, &mut dir);
        for i in 0..y.len() {
            y[i] += dist * dir[i];
        }
    }
}

/// One path tested against two obstacles: whether it ever comes within
/// `shell` of `a`, and of `b`. Each step is bounded by the distance to every
/// obstacle not yet reached, so both marginals are walk-on-spheres chains of
/// the same Brownian path; if `a ⊆ b` then hitting `a` implies hitting `b`.
pub fn bm_hits_pair<A: Obstacle + ?Sized, B: Obstacle + ?Sized>(
    a: &A,
    b: &B,
    z: &[f64],
    shell: f64,
    rng: &mut ChaCha8Rng,
) -> (bool, bool) {
    let (c, ra) = a.bounding_ball();
    let (cb, rb) = b.bounding_ball();
    let gap = c.iter().zip(&cb).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    let big_r = ra.max(gap + rb) + shell;
    let mut y = z.to_vec();
    let mut dir = vec![0.0; y.len()];
    let mut hit = (false, false);
    loop {
        let r = y.iter().zip(&c).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
        if r > big_r {
            if rng.gen::<f64>() >= big_r / r {
                return hit;
            }
            exterior_harmonic_point(&mut y, &c, big_r, rng);
        }
        let da = if hit.0 { f64::INFINITY } else { a.distance(&y) };
        let db = if hit.1 { f64::INFINITY } else { b.distance(&y) };
        hit.0 |= da <= shell;
        hit.1 |= db <= shell;
        if hit.0 && hit.1 {
            return hit;
        }
        let step = match hit {
            (true, _) => db,
            (_, true) => da,
            _ => da.min(db),
        };
        uniform_direction(rng, &mut dir);
        for i in 0..y.len() {
            y[i] += step * dir[i];
        }
    }
}

/// Monte Carlo `W_z[H < ∞]`.
pub fn bm_hitting_estimate<O: Obstacle + ?Sized>(obs: &O, z: &[f64], cfg: &BmConfig) -> Result<Estimate> {
    cfg.check(obs, z.len())?;
    if obs.distance(z) == 0.0 {
        return Ok(Estimate::exact(1.0));
    }
    let hits: u64 = par_blocks(cfg.seed, cfg.walkers, |rng, m| {
        (0..m).filter(|_| bm_hits(obs, z, cfg.shell, rng)).count() as u64
    })
    .into_iter()
    .sum();
    Ok(binomial_estimate(hits, cfg.walkers as u64))
}

/// Whether a path from `z` reaches `obs` before leaving `B_∞(z, range)`.
pub fn bm_hits_before_range<O: Obstacle + ?Sized>(
    obs: &O,
    z: &[f64],
    range: f64,
    shell: f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    let mut y = z.to_vec();
    let mut dir = vec![0.0; y.len()];
    loop {
        let dist = obs.distance(&y);
        if dist <= shell {
            return true;
        }
        let to_exit = (0..y.len()).map(|i| range - (y[i] - z[i]).abs()).fold(f64::INFINITY, f64::min);
        if to_exit <= shell {
            return false;
        }
        let r = dist.min(to_exit);
        uniform_direction(rng, &mut dir);
        for i in 0..y.len() {
            y[i] += r * dir[i];
        }
    }
}

/// Monte Carlo `W_z[H_Σ < τ_ε]` with `τ_ε` the exit time of `B_∞(z, ε)`.
pub fn bm_hit_before_range<O: Obstacle + ?Sized>(
    obs: &O,
    z: &[f64],
    range: f64,
    cfg: &BmConfig,
) -> Result<Estimate> {
    cfg.check(obs, z.len())?;
    if !(range > 0.0) {
        return Err(LabError::invalid("range must be positive"));
    }
    if obs.distance(z) == 0.0 {
        return Ok(Estimate::exact(1.0));
    }
    let reach = (0..z.len()).map(|_| range).fold(0.0, |a: f64, b| a + b * b).sqrt();
    if obs.distance(z) > reach {
        return Ok(Estimate::exact(0.0));
    }
    if 10.0 * cfg.shell > range {
        return Err(LabError::Numerical("shell is not 10x below the range".into()));
    }
    let hits: u64 = par_blocks(cfg.seed, cfg.walkers, |rng, m| {
        (0..m).filter(|_| bm_hits_before_range(obs, z, range, cfg.shell, rng)).count() as u64
    })
    .into_iter()
    .sum();
    Ok(binomial_estimate(hits, cfg.walkers as u64))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum CapacityMethod {
    /// Lattice capacity of the blow-up at meshes `mesh` and `2·mesh`,
    /// Richardson-extrapolated.
    FineLattice { mesh: u32 },
    /// Mean hitting probability over a sphere enclosing the shape.
    McSphere { walkers: usize, shell: f64, seed: u64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CapacityEstimate {
    pub value: f64,
    pub error: f64,
    /// Raw per-mesh values `(mesh, d·cap_Z / mesh^{d-2})` for the lattice method.
    pub meshes: Vec<(u32, f64)>,
}

/// Rescaled lattice capacity `d · cap_{Z^d}((L·shape) ∩ Z^d) / L^{d-2}`.
pub fn lattice_capacity_at(gt: &GreenTable, shape: &ShapeSpec, mesh: u32) -> Result<f64> {
    let set = blow_up(shape, mesh)?;
    let d = shape.dim();
    Ok(d as f64 * equilibrium_measure(gt, &set)?.capacity() / (mesh as f64).powi(d as i32 - 2))
}

/// Brownian capacity `cap(B) = E(h_B, h_B)` of a shape.
pub fn brownian_capacity(gt: &GreenTable, shape: &ShapeSpec, method: CapacityMethod) -> Result<CapacityEstimate> {
    shape.validate()?;
    match method {
        CapacityMethod::FineLattice { mesh } => {
            if mesh == 0 {
                return Err(LabError::invalid("mesh must be positive"));
            }
            let c1 = lattice_capacity_at(gt, shape, mesh)?;
            let c2 = lattice_capacity_at(gt, shape, 2 * mesh)?;
            if (c1 - c2).abs() > 0.1 * c2.abs() {
                return Err(LabError::Numerical(format!(
                    "lattice capacities {c1} and {c2} at meshes {mesh}, {} differ by more than 10%",
                    2 * mesh
                )));
            }
            let extrapolated = 2.0 * c2 - c1;
            Ok(CapacityEstimate {
                value: extrapolated,
                error: (extrapolated - c2).abs(),
                meshes: vec![(mesh, c1), (2 * mesh, c2)],
            })
        }
        CapacityMethod::McSphere { walkers, shell, seed } => {
            let cfg = BmConfig::new(shell, walkers, seed);
            let e = mc_sphere_capacity(shape, &cfg)?;
            Ok(CapacityEstimate { value: e.value, error: e.se, meshes: Vec::new() })
        }
    }
}

/// `cap = 2πρ · mean_{|y-c|=ρ} W_y[H < ∞]`, exact in expectation because the
/// spherical mean of `1/(2π|y - x|)` is `1/(2πρ)` for every `x` inside.
pub fn mc_sphere_capacity<O: Obstacle + ?Sized>(obs: &O, cfg: &BmConfig) -> Result<Estimate> {
    let (c, rb) = obs.bounding_ball();
    cfg.check(obs, c.len())?;
    let rho = 1.05 * rb + cfg.shell;
    let hits: u64 = par_blocks(cfg.seed, cfg.walkers, |rng, m| {
        let mut dir = vec![0.0; 3];
        let mut count = 0u64;
        for _ in 0..m {
            uniform_direction(rng, &mut dir);
            let z: Vec<f64> = (0..3).map(|i| c[i] + rho * dir[i]).collect();
            if bm_hits(obs, &z, cfg.shell, rng) {
                count += 1;
            }
        }
        count
    })
    .into_iter()
    .sum();
    let p = binomial_estimate(hits, cfg.walkers as u64);
    Ok(Estimate { value: 2.0 * PI * rho * p.value, se: 2.0 * PI * rho * p.se })
}

/// Brownian hitting potential of a shape approximated by the lattice
/// potential of its blow-up at mesh `L`: `h(x) ≈ P_{Lx}[H_{A_L} < ∞]`,
/// multilinearly interpolated between lattice points.
#[derive(Clone, Debug)]
pub struct FineLatticePotential {
    mesh: u32,
    measure: EquilibriumMeasure,
}

impl FineLatticePotential {
    pub fn new(gt: &GreenTable, shape: &ShapeSpec, mesh: u32) -> Result<Self> {
        let set = blow_up(shape, mesh)?;
        Ok(FineLatticePotential { mesh, measure: equilibrium_measure(gt, &set)? })
    }

    pub fn mesh(&self) -> u32 {
        self.mesh
    }

    pub fn measure(&self) -> &EquilibriumMeasure {
        &self.measure
    }

    /// `d · cap_Z / L^{d-2}`.
    pub fn capacity(&self) -> f64 {
        let d = self.measure.support().dim().unwrap_or(3);
        d as f64 * self.measure.capacity() / (self.mesh as f64).powi(d as i32 - 2)
    }

    pub fn eval(&self, gt: &GreenTable, x: &[f64]) -> f64 {
        let d = x.len();
        let l = self.mesh as f64;
        let base: Vec<i32> = x.iter().map(|v| (v * l).floor() as i32).collect();
        let frac: Vec<f64> = x.iter().zip(&base).map(|(v, b)| v * l - *b as f64).collect();
        let mut total = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut c = base.clone();
            for i in 0..d {
                if corner >> i & 1 == 1 {
                    c[i] += 1;
                    w *= frac[i];
                } else {
                    w *= 1.0 - frac[i];
                }
            }
            if w == 0.0 {
                continue;
            }
            let p = crate::lattice::Point::new(&c).expect("grid point in range");
            total += w * self.measure.potential(gt, &p);
        }
        total
    }
}
