//! Quadratic energies: the Brownian energy `E(η) = ∫∫ η(x) g_BM(x-y) η(y)`
//! of a test function and the Dirichlet energy `½∫|∇f|²` of a grid field.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use std::f64::consts::PI;

use crate::error::{LabError, Result};
use crate::fftn::cyclic_convolve;
use crate::testfn::{composite_gl, gl_nodes, sphere_area, RealGrid, TestFunction, TestSpec};

const ENERGY_TOL: f64 = 0.01;

/// Constant `k_d` of the kernel `g_BM(x) = k_d |x|^{2-d}`.
pub fn kernel_constant(d: usize) -> f64 {
    let dh = d as f64 / 2.0;
    gamma(dh - 1.0) / (2.0 * PI.powf(dh))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub value: f64,
    /// Difference to the estimate at half resolution.
    pub error: f64,
}

/// Energy of a radial profile `η(|x|)` supported in `[0, reach]`.
///
/// Newton's theorem gives the potential of a uniform shell, so
/// `E = 2 k_d |S^{d-1}|² ∫ r η(r) M(r) dr` with `M(r) = ∫_0^r s^{d-1} η(s) ds`.
pub fn energy_radial(
    d: usize,
    profile: impl Fn(f64) -> f64,
    reach: f64,
    breakpoints: &[f64],
    panels: usize,
) -> f64 {
    let mut edges: Vec<f64> = vec![0.0, reach];
    edges.extend(breakpoints.iter().copied().filter(|b| *b > 0.0 && *b < reach));
    for k in 1..panels {
        edges.push(reach * k as f64 / panels as f64);
    }
    edges.sort_by(f64::total_cmp);
    edges.dedup_by(|a, b| (*a - *b).abs() < 1e-14 * reach.max(1.0));
    let order = 12;
    let base = gl_nodes(order, 0.0, 1.0);
    let di = d as i32;
    let mut m_start = 0.0;
    let mut total = 0.0;
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let h = b - a;
        for &(t, wt) in &base {
            let r = a + t * h;
            // M(r) = M(a) + ∫_a^r s^{d-1} η(s) ds
            let inner: f64 = base
                .iter()
                .map(|&(u, wu)| {
                    let s = a + u * (r - a);
                    wu * (r - a) * s.powi(di - 1) * profile(s)
                })
                .sum();
            total += wt * h * r * profile(r) * (m_start + inner);
        }
        m_start += base.iter().map(|&(u, wu)| wu * h * (a + u * h).powi(di - 1) * profile(a + u * h)).sum::<f64>();
    }
    let area = sphere_area(d);
    2.0 * kernel_constant(d) * area * area * total
}

/// `E(η) = ∫∫ η(x) g_BM(x - y) η(y) dx dy`.
///
/// Radial kinds use the one-dimensional shell formula. Grid kinds (d = 3) are
/// exact quadratic forms `h^{d+2} Σ_{j,k} η_j η_k w(j - k)` in the grid values,
/// with `w(m) = ∫ g_BM(m + u) B(u) du` and `B` the autocorrelation of the
/// multilinear hat; `w` is tabulated near the origin and equals `g_BM(m)` to
/// fifth order beyond.
pub fn energy_e(eta: &TestFunction) -> Result<EnergyEstimate> {
    let d = eta.dim();
    if let Some((_, profile, reach, bps)) = eta.radial() {
        let fine = energy_radial(d, &profile, reach, &bps, 64);
        let coarse = energy_radial(d, &profile, reach, &bps, 32);
        return finish(fine, coarse);
    }
    let TestSpec::ExplicitGrid { grid } = eta.spec() else {
        unreachable!("non-grid kinds are radial")
    };
    if d != 3 {
        return Err(LabError::invalid("grid energies are implemented for d = 3"));
    }
    let (fine, coarse) = hat_weights();
    finish(grid_energy(grid, fine), grid_energy(grid, coarse))
}

fn finish(fine: f64, coarse: f64) -> Result<EnergyEstimate> {
    let error = (fine - coarse).abs();
    if error > ENERGY_TOL * fine.abs() {
        return Err(LabError::Numerical(format!(
            "energy quadrature error {error:e} exceeds 1% of {fine:e}"
        )));
    }
    Ok(EnergyEstimate { value: fine, error })
}

/// Offsets with `|m|_∞ ≤ NEAR` use tabulated hat weights.
const NEAR: i32 = 6;

/// Cubic B-spline on `[-2, 2]`, the autocorrelation of the unit hat.
fn bspline(u: f64) -> f64 {
    let a = u.abs();
    if a >= 2.0 {
        0.0
    } else if a >= 1.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    }
}

/// `w(m) = k_3 ∫_{S^2} ∫_0^∞ r B(r u - m) dr dσ(u)`; along a ray the
/// integrand is a polynomial of degree 10 between lattice-plane crossings,
/// so six Gauss nodes per piece are exact and only the angular rule errs.
fn hat_weight(m: [i32; 3], n_theta: usize) -> f64 {
    let n_phi = 2 * n_theta;
    let base = gl_nodes(6, 0.0, 1.0);
    let mut s = 0.0;
    let mut cuts: Vec<f64> = Vec::with_capacity(16);
    for &(ct, wt) in &gl_nodes(n_theta, -1.0, 1.0) {
        let st = (1.0 - ct * ct).sqrt();
        for k in 0..n_phi {
            let phi = 2.0 * PI * (k as f64 + 0.5) / n_phi as f64;
            let u = [st * phi.cos(), st * phi.sin(), ct];
            cuts.clear();
            cuts.push(0.0);
            let mut r_max = f64::INFINITY;
            for i in 0..3 {
                if u[i].abs() < 1e-15 {
                    if (m[i] as f64).abs() >= 2.0 {
                        r_max = 0.0;
                    }
                    continue;
                }
                for j in -2..=2 {
                    let r = (m[i] + j) as f64 / u[i];
                    if r > 0.0 {
                        cuts.push(r);
                    }
                }
                r_max = r_max.min(((m[i] as f64 + 2.0 * u[i].signum()) / u[i]).max(0.0));
            }
            if r_max <= 0.0 {
                continue;
            }
            cuts.push(r_max);
            cuts.retain(|r| *r <= r_max);
            cuts.sort_by(f64::total_cmp);
            let mut ray = 0.0;
            for w in cuts.windows(2) {
                let h = w[1] - w[0];
                if h <= 0.0 {
                    continue;
                }
                for &(t, wn) in &base {
                    let r = w[0] + t * h;
                    let b: f64 = (0..3).map(|i| bspline(r * u[i] - m[i] as f64)).product();
                    ray += wn * h * r * b;
                }
            }
            s += wt * 2.0 * PI / n_phi as f64 * ray;
        }
    }
    kernel_constant(3) * s
}

type WeightTable = std::collections::HashMap<[i32; 3], f64>;

/// Hat weights on canonical offsets at two angular resolutions.
fn hat_weights() -> (&'static WeightTable, &'static WeightTable) {
    use rayon::prelude::*;
    use std::sync::OnceLock;
    static TABLES: OnceLock<(WeightTable, WeightTable)> = OnceLock::new();
    let t = TABLES.get_or_init(|| {
        let mut keys = Vec::new();
        for a in 0..=NEAR {
            for b in a..=NEAR {
                for c in b..=NEAR {
                    keys.push([a, b, c]);
                }
            }
        }
        let build = |n: usize| -> WeightTable {
            keys.par_iter().map(|m| (*m, hat_weight(*m, n))).collect()
        };
        (build(96), build(48))
    });
    (&t.0, &t.1)
}

fn weight_at(table: &WeightTable, m: [i32; 3]) -> f64 {
    let mut c = [m[0].abs(), m[1].abs(), m[2].abs()];
    c.sort_unstable();
    if c[2] <= NEAR {
        return table[&c];
    }
    let r = ((c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) as f64).sqrt();
    kernel_constant(3) / r
}

fn grid_energy(grid: &RealGrid, table: &WeightTable) -> f64 {
    let n = &grid.dims;
    let dims: Vec<usize> = n.iter().map(|k| 2 * k).collect();
    let total: usize = dims.iter().product();
    let mut a = vec![0.0; total];
    let mut w = vec![0.0; total];
    for idx in 0..grid.len() {
        let (i, j, k) = (idx / (n[1] * n[2]), idx / n[2] % n[1], idx % n[2]);
        a[(i * dims[1] + j) * dims[2] + k] = grid.values[idx];
    }
    let wrap = |p: usize, len: usize| if p < len / 2 { p as i32 } else { p as i32 - len as i32 };
    for p in 0..dims[0] {
        for q in 0..dims[1] {
            for r in 0..dims[2] {
                let m = [wrap(p, dims[0]), wrap(q, dims[1]), wrap(r, dims[2])];
                w[(p * dims[1] + q) * dims[2] + r] = weight_at(table, m);
            }
        }
    }
    let conv = cyclic_convolve(&a, &w, &dims);
    let quad: f64 = a.iter().zip(&conv).map(|(x, y)| x * y).sum();
    grid.spacing.powi(5) * quad
}

/// Result of [`dirichlet_energy`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletEnergy {
    /// Interior part plus tail.
    pub value: f64,
    /// `½ Σ_edges (Δf)² h^{d-2}` over grid edges.
    pub interior: f64,
    /// Energy outside the grid of the monopole `q |x - c|^{2-d}` fitted on
    /// the grid border.
    pub tail: f64,
    pub monopole: f64,
}

/// `½ ∫ |∇f|²` for `f` sampled on a uniform grid.
///
/// Gradients are midpoint differences along grid edges. The field outside
/// the grid is taken to be the harmonic monopole fitted to the border values;
/// fields that do not look like one there (spread of `f·|x - c|^{d-2}` over
/// the border above 25%, or a tail above 25% of the total) are rejected.
pub fn dirichlet_energy(f: &RealGrid) -> Result<DirichletEnergy> {
    let d = f.dim();
    if d != 3 {
        return Err(LabError::invalid("grid Dirichlet energies are implemented for d = 3"));
    }
    let h = f.spacing;
    let mut sum = 0.0;
    for i in 0..d {
        let st = f.stride(i);
        for idx in 0..f.len() {
            let k = (idx / st) % f.dims[i];
            if k + 1 < f.dims[i] {
                let diff = f.values[idx + st] - f.values[idx];
                sum += diff * diff;
            }
        }
    }
    let interior = 0.5 * sum * h.powi(d as i32 - 2);
    let b = f.bounds();
    let c: Vec<f64> = b.lo.iter().zip(&b.hi).map(|(l, u)| 0.5 * (l + u)).collect();
    let mut qs = Vec::new();
    let mut max_abs: f64 = 0.0;
    for idx in 0..f.len() {
        max_abs = max_abs.max(f.values[idx].abs());
        if f.is_boundary(idx) {
            let x = f.point(idx);
            let r = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            qs.push(f.values[idx] * r.powi(d as i32 - 2));
        }
    }
    let q = qs.iter().sum::<f64>() / qs.len() as f64;
    let spread = qs.iter().map(|v| (v - q).abs()).fold(0.0, f64::max);
    let border_max = qs.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if border_max > 1e-12 * max_abs.max(1e-300) && spread > 0.25 * q.abs().max(border_max) {
        return Err(LabError::Numerical(format!(
            "field varies along the grid border (monopole spread {spread:e} vs {q:e})"
        )));
    }
    // ½ ∫_{outside box} |∇(q r^{2-d})|² = ½ q² (d-2) ∫_{S^{d-1}} ρ(u)^{2-d} dσ(u),
    // ρ(u) the distance from c to the box border along u.
    let half: Vec<f64> = b.lo.iter().zip(&b.hi).map(|(l, u)| 0.5 * (u - l)).collect();
    let tail = 0.5 * q * q * (d as f64 - 2.0) * border_integral(&half);
    if tail > 0.25 * (interior + tail) {
        return Err(LabError::Numerical(format!(
            "truncation tail {tail:e} is too large against the interior energy {interior:e}"
        )));
    }
    Ok(DirichletEnergy { value: interior + tail, interior, tail, monopole: q })
}

/// `∫_{S^{d-1}} ρ(u)^{2-d} dσ(u)` with `ρ(u) = min_i half_i / |u_i|`.
fn border_integral(half: &[f64]) -> f64 {
    let thetas = gl_nodes(64, -1.0, 1.0);
    let n_phi = 256;
    let mut s = 0.0;
    for &(ct, wt) in &thetas {
        let st = (1.0 - ct * ct).sqrt();
        for k in 0..n_phi {
            let phi = 2.0 * PI * (k as f64 + 0.5) / n_phi as f64;
            let u = [st * phi.cos(), st * phi.sin(), ct];
            let inv_rho = (0..3).map(|i| u[i].abs() / half[i]).fold(0.0, f64::max);
            s += wt * 2.0 * PI / n_phi as f64 * inv_rho;
        }
    }
    s
}

/// `∫ f g` for a radial test function `f` and a radial function `g`
/// sharing its centre.
pub fn radial_pairing(eta: &TestFunction, g: impl Fn(f64) -> f64) -> Result<f64> {
    let (_, p, reach, bps) = eta
        .radial()
        .ok_or_else(|| LabError::invalid("radial pairing needs a radial test function"))?;
    let d = eta.dim() as i32;
    let area = sphere_area(eta.dim());
    let mut edges = vec![0.0];
    edges.extend(bps.into_iter().filter(|b| *b > 0.0 && *b < reach));
    edges.push(reach);
    Ok(edges
        .windows(2)
        .map(|w| composite_gl(|r| area * r.powi(d - 1) * p(r) * g(r), w[0], w[1], 16, 16))
        .sum())
}
