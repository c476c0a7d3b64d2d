//! Compactly supported test functions on `R^d` and the bump mollifier.

use std::f64::consts::PI;

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::gamma;

use crate::error::{LabError, Result};
use crate::lattice::RealBox;

/// Surface area of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0)
}

/// Gauss–Legendre nodes and weights mapped to `[a, b]`.
pub(crate) fn gl_nodes(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let gl = GaussLegendre::new(n.max(1).try_into().unwrap());
    let h = 0.5 * (b - a);
    gl.iter().map(|(t, w)| (a + h * (t + 1.0), h * w)).collect()
}

/// `∫_a^b f` by composite Gauss–Legendre on `panels` equal panels.
pub(crate) fn composite_gl(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize, order: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let base = gl_nodes(order, 0.0, 1.0);
    let h = (b - a) / panels as f64;
    let mut s = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for &(t, w) in &base {
            s += w * h * f(lo + t * h);
        }
    }
    s
}

fn bump(r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r2)).exp()
    }
}

/// `χ(x) ∝ exp(-1/(1-|x|²))` on the unit ball, normalized to unit mass, and
/// its rescalings `χ_ε(x) = ε^{-d} χ(x/ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mollifier {
    pub dim: usize,
    pub eps: f64,
    norm: f64,
    /// `max_r |d/dr χ|` for `ε = 1`.
    slope: f64,
}

impl Mollifier {
    pub fn new(dim: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(LabError::invalid("mollifier scale must be positive"));
        }
        let area = sphere_area(dim);
        let mass = composite_gl(|r| area * r.powi(dim as i32 - 1) * bump(r * r), 0.0, 1.0, 16, 24);
        let norm = 1.0 / mass;
        // d/dr exp(-1/(1-r²)) = -2r/(1-r²)² · exp(-1/(1-r²)); maximize on a grid
        // and refine by golden section.
        let deriv = |r: f64| {
            let q = 1.0 - r * r;
            if q <= 0.0 {
                0.0
            } else {
                2.0 * r / (q * q) * (-1.0 / q).exp()
            }
        };
        let (mut best, mut best_r) = (0.0, 0.0);
        for i in 1..2000 {
            let r = i as f64 / 2000.0;
            if deriv(r) > best {
                best = deriv(r);
                best_r = r;
            }
        }
        let (mut a, mut b) = (best_r - 1e-3, (best_r + 1e-3).min(1.0));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..80 {
            let c = b - g * (b - a);
            let e = a + g * (b - a);
            if deriv(c) > deriv(e) {
                b = e;
            } else {
                a = c;
            }
        }
        let slope = norm * deriv(0.5 * (a + b));
        Ok(Mollifier { dim, eps, norm, slope })
    }

    /// `χ_ε` as a function of the radius.
    pub fn profile(&self, r: f64) -> f64 {
        let s = r / self.eps;
        self.norm * bump(s * s) / self.eps.powi(self.dim as i32)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        self.profile(r2.sqrt())
    }

    pub fn sup_norm(&self) -> f64 {
        self.norm * (-1.0f64).exp() / self.eps.powi(self.dim as i32)
    }

    pub fn lipschitz(&self) -> f64 {
        self.slope / self.eps.powi(self.dim as i32 + 1)
    }

    /// `‖χ_ε‖_BL = ‖χ_ε‖_∞ + Lip(χ_ε)`.
    pub fn bl_norm(&self) -> f64 {
        self.sup_norm() + self.lipschitz()
    }

    /// Numerical `∫ χ_ε`.
    pub fn mass(&self) -> f64 {
        let area = sphere_area(self.dim);
        composite_gl(|r| area * r.powi(self.dim as i32 - 1) * self.profile(r), 0.0, self.eps, 16, 24)
    }
}

/// Values on a uniform grid of points `origin + spacing * k`,
/// `0 ≤ k_i < dims[i]`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealGrid {
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl RealGrid {
    pub fn from_fn(origin: Vec<f64>, spacing: f64, dims: Vec<usize>, f: impl Fn(&[f64]) -> f64) -> Self {
        let total: usize = dims.iter().product();
        let d = dims.len();
        let mut values = Vec::with_capacity(total);
        let mut x = vec![0.0; d];
        for idx in 0..total {
            let mut rem = idx;
            for i in (0..d).rev() {
                x[i] = origin[i] + spacing * (rem % dims[i]) as f64;
                rem /= dims[i];
            }
            values.push(f(&x));
        }
        RealGrid { origin, spacing, dims, values }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.dims[axis + 1..].iter().product()
    }

    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        let d = self.dim();
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            x[i] = self.origin[i] + self.spacing * (idx % self.dims[i]) as f64;
            idx /= self.dims[i];
        }
        x
    }

    pub fn bounds(&self) -> RealBox {
        RealBox {
            lo: self.origin.clone(),
            hi: self
                .origin
                .iter()
                .zip(&self.dims)
                .map(|(o, n)| o + self.spacing * (*n as f64 - 1.0))
                .collect(),
        }
    }

    pub fn is_boundary(&self, mut idx: usize) -> bool {
        for i in (0..self.dim()).rev() {
            let k = idx % self.dims[i];
            idx /= self.dims[i];
            if k == 0 || k + 1 == self.dims[i] {
                return true;
            }
        }
        false
    }

    /// Multilinear interpolation; zero outside the grid.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut base = [0usize; 4];
        let mut frac = [0.0f64; 4];
        for i in 0..d {
            let t = (x[i] - self.origin[i]) / self.spacing;
            let n = self.dims[i];
            if !(t >= 0.0) || t > (n - 1) as f64 {
                return 0.0;
            }
            let k = (t.floor() as usize).min(n.saturating_sub(2));
            base[i] = k;
            frac[i] = t - k as f64;
        }
        let mut total = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for i in 0..d {
                let bit = corner >> i & 1;
                let k = (base[i] + bit).min(self.dims[i] - 1);
                w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
                idx = idx * self.dims[i] + k;
            }
            if w != 0.0 {
                total += w * self.values[idx];
            }
        }
        total
    }
}

/// Serializable description of a test function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestSpec {
    /// `1_{B(center, radius)} * χ_ε`.
    MollifiedBallIndicator { center: Vec<f64>, radius: f64, eps: f64 },
    /// `(1 - |x - center|/radius)^+`.
    Tent { center: Vec<f64>, radius: f64 },
    /// `χ_ε(x - center)`.
    Bump { center: Vec<f64>, eps: f64 },
    /// Multilinear interpolation of grid values vanishing on the grid border.
    ExplicitGrid { grid: RealGrid },
}

/// A test function with recorded support box and bounded-Lipschitz norm.
#[derive(Clone, Debug)]
pub struct TestFunction {
    spec: TestSpec,
    dim: usize,
    support: RealBox,
    sup_norm: f64,
    lipschitz: f64,
    radial: Option<RadialProfile>,
}

/// A radial profile `η(x) = p(|x - center|)` supported in `|x - center| ≤ reach`.
#[derive(Clone, Debug)]
struct RadialProfile {
    center: Vec<f64>,
    reach: f64,
    kind: RadialKind,
}

#[derive(Clone, Debug)]
enum RadialKind {
    Tent { radius: f64 },
    Bump(Mollifier),
    /// Tabulated transition on `[lo, hi]`, equal to 1 below and 0 above.
    Table { lo: f64, hi: f64, values: Vec<f64> },
}

const TABLE_SIZE: usize = 4096;

impl RadialProfile {
    fn eval(&self, r: f64) -> f64 {
        if r >= self.reach {
            return 0.0;
        }
        match &self.kind {
            RadialKind::Tent { radius } => (1.0 - r / radius).max(0.0),
            RadialKind::Bump(m) => m.profile(r),
            RadialKind::Table { lo, hi, values } => {
                if r <= *lo {
                    return 1.0;
                }
                if r >= *hi {
                    return 0.0;
                }
                let n = values.len() - 1;
                let t = (r - lo) / (hi - lo) * n as f64;
                let k = (t.floor() as usize).clamp(1, n - 2);
                let u = t - k as f64;
                // Cubic Lagrange through nodes k-1..k+2.
                let (p0, p1, p2, p3) = (values[k - 1], values[k], values[k + 1], values[k + 2]);
                let a = -u * (u - 1.0) * (u - 2.0) / 6.0;
                let b = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
                let c = -(u + 1.0) * u * (u - 2.0) / 2.0;
                let e = (u + 1.0) * u * (u - 1.0) / 6.0;
                a * p0 + b * p1 + c * p2 + e * p3
            }
        }
    }

    /// Radii where the profile is not smooth, inside `[0, reach]`.
    fn breakpoints(&self) -> Vec<f64> {
        match &self.kind {
            RadialKind::Tent { radius } => vec![*radius],
            RadialKind::Bump(_) => vec![],
            RadialKind::Table { lo, hi, .. } => vec![*lo, *hi],
        }
    }
}

/// Fraction of the sphere of radius `s` centred at distance `rho` from the
/// centre of a ball of radius `big_r` that lies inside the ball.
fn sphere_fraction_inside(d: usize, s: f64, rho: f64, big_r: f64) -> f64 {
    if s + rho <= big_r {
        return 1.0;
    }
    if s >= rho + big_r || rho >= big_r + s {
        return 0.0;
    }
    let c0 = ((rho * rho + s * s - big_r * big_r) / (2.0 * rho * s)).clamp(-1.0, 1.0);
    let a = (d as f64 - 1.0) / 2.0;
    let tail = 0.5 * beta_reg(a, 0.5, 1.0 - c0 * c0);
    if c0 >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

fn check_center(center: &[f64]) -> Result<()> {
    crate::lattice::check_dim(center.len())
}

impl TestFunction {
    pub fn from_spec(spec: TestSpec) -> Result<Self> {
        match spec {
            TestSpec::MollifiedBallIndicator { center, radius, eps } => {
                check_center(&center)?;
                if !(radius > 0.0) || !(eps > 0.0) {
                    return Err(LabError::invalid("radius and eps must be positive"));
                }
                let d = center.len();
                let m = Mollifier::new(d, eps)?;
                let lo = (radius - eps).max(0.0);
                let hi = radius + eps;
                let area = sphere_area(d);
                let values: Vec<f64> = (0..=TABLE_SIZE)
                    .map(|i| {
                        let rho = lo + (hi - lo) * i as f64 / TABLE_SIZE as f64;
                        let kink = (radius - rho).abs().min(eps);
                        let f = |s: f64| {
                            area * s.powi(d as i32 - 1) * m.profile(s)
                                * sphere_fraction_inside(d, s, rho, radius)
                        };
                        (composite_gl(f, 0.0, kink, 2, 24) + composite_gl(f, kink, eps, 4, 24)).clamp(0.0, 1.0)
                    })
                    .collect();
                let step = (hi - lo) / TABLE_SIZE as f64;
                let lipschitz = values
                    .windows(2)
                    .map(|w| (w[0] - w[1]).abs() / step)
                    .fold(0.0, f64::max);
                let sup_norm = if radius >= eps { 1.0 } else { values.iter().copied().fold(0.0, f64::max) };
                let radial = RadialProfile {
                    center: center.clone(),
                    reach: hi,
                    kind: RadialKind::Table { lo, hi, values },
                };
                Ok(TestFunction {
                    support: RealBox::cube(&center, hi),
                    dim: d,
                    sup_norm,
                    lipschitz,
                    radial: Some(radial),
                    spec: TestSpec::MollifiedBallIndicator { center, radius, eps },
                })
            }
            TestSpec::Tent { center, radius } => {
                check_center(&center)?;
                if !(radius > 0.0) {
                    return Err(LabError::invalid("tent radius must be positive"));
                }
                Ok(TestFunction {
                    support: RealBox::cube(&center, radius),
                    dim: center.len(),
                    sup_norm: 1.0,
                    lipschitz: 1.0 / radius,
                    radial: Some(RadialProfile {
                        center: center.clone(),
                        reach: radius,
                        kind: RadialKind::Tent { radius },
                    }),
                    spec: TestSpec::Tent { center, radius },
                })
            }
            TestSpec::Bump { center, eps } => {
                check_center(&center)?;
                let m = Mollifier::new(center.len(), eps)?;
                Ok(TestFunction {
                    support: RealBox::cube(&center, eps),
                    dim: center.len(),
                    sup_norm: m.sup_norm(),
                    lipschitz: m.lipschitz(),
                    radial: Some(RadialProfile {
                        center: center.clone(),
                        reach: eps,
                        kind: RadialKind::Bump(m),
                    }),
                    spec: TestSpec::Bump { center, eps },
                })
            }
            TestSpec::ExplicitGrid { grid } => {
                let d = grid.dim();
                crate::lattice::check_dim(d)?;
                if grid.dims.iter().any(|n| *n < 3) || !(grid.spacing > 0.0) {
                    return Err(LabError::invalid("grid needs at least 3 points per axis"));
                }
                if grid.values.len() != grid.dims.iter().product::<usize>() {
                    return Err(LabError::invalid("grid value count does not match dims"));
                }
                if (0..grid.len()).any(|i| grid.is_boundary(i) && grid.values[i] != 0.0) {
                    return Err(LabError::invalid("explicit grid must vanish on its border"));
                }
                let sup_norm = grid.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
                // Per cell the gradient of a multilinear function has i-th
                // component bounded by the largest edge difference along i.
                let mut lip2 = 0.0;
                for i in 0..d {
                    let st = grid.stride(i);
                    let mut m: f64 = 0.0;
                    for idx in 0..grid.len() {
                        let k = (idx / st) % grid.dims[i];
                        if k + 1 < grid.dims[i] {
                            m = m.max((grid.values[idx + st] - grid.values[idx]).abs());
                        }
                    }
                    lip2 += (m / grid.spacing).powi(2);
                }
                Ok(TestFunction {
                    support: grid.bounds(),
                    dim: d,
                    sup_norm,
                    lipschitz: lip2.sqrt(),
                    radial: None,
                    spec: TestSpec::ExplicitGrid { grid },
                })
            }
        }
    }

    pub fn mollified_ball(center: Vec<f64>, radius: f64, eps: f64) -> Result<Self> {
        Self::from_spec(TestSpec::MollifiedBallIndicator { center, radius, eps })
    }

    pub fn tent(center: Vec<f64>, radius: f64) -> Result<Self> {
        Self::from_spec(TestSpec::Tent { center, radius })
    }

    pub fn bump(center: Vec<f64>, eps: f64) -> Result<Self> {
        Self::from_spec(TestSpec::Bump { center, eps })
    }

    pub fn explicit_grid(grid: RealGrid) -> Result<Self> {
        Self::from_spec(TestSpec::ExplicitGrid { grid })
    }

    pub fn spec(&self) -> &TestSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support_box(&self) -> &RealBox {
        &self.support
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// `‖η‖_BL = ‖η‖_∞ + Lip(η)`.
    pub fn bl_norm(&self) -> f64 {
        self.sup_norm + self.lipschitz
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.radial {
            Some(rp) => {
                let r2: f64 = x.iter().zip(&rp.center).map(|(a, c)| (a - c) * (a - c)).sum();
                rp.eval(r2.sqrt())
            }
            None => match &self.spec {
                TestSpec::ExplicitGrid { grid } => grid.interpolate(x),
                _ => unreachable!("non-grid kinds are radial"),
            },
        }
    }

    /// `η(x/λ)`.
    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        let sc = |c: &Vec<f64>| c.iter().map(|v| v * lambda).collect::<Vec<f64>>();
        let spec = match &self.spec {
            TestSpec::MollifiedBallIndicator { center, radius, eps } => {
                TestSpec::MollifiedBallIndicator { center: sc(center), radius: radius * lambda, eps: eps * lambda }
            }
            TestSpec::Tent { center, radius } => TestSpec::Tent { center: sc(center), radius: radius * lambda },
            // The bump keeps unit mass: this yields λ^{-d} η(x/λ).
            TestSpec::Bump { center, eps } => TestSpec::Bump { center: sc(center), eps: eps * lambda },
            TestSpec::ExplicitGrid { grid } => TestSpec::ExplicitGrid {
                grid: RealGrid {
                    origin: sc(&grid.origin),
                    spacing: grid.spacing * lambda,
                    dims: grid.dims.clone(),
                    values: grid.values.clone(),
                },
            },
        };
        Self::from_spec(spec)
    }

    /// The same function moved by `shift`.
    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        let mv = |c: &Vec<f64>| c.iter().zip(shift).map(|(a, b)| a + b).collect::<Vec<f64>>();
        let spec = match &self.spec {
            TestSpec::MollifiedBallIndicator { center, radius, eps } => {
                TestSpec::MollifiedBallIndicator { center: mv(center), radius: *radius, eps: *eps }
            }
            TestSpec::Tent { center, radius } => TestSpec::Tent { center: mv(center), radius: *radius },
            TestSpec::Bump { center, eps } => TestSpec::Bump { center: mv(center), eps: *eps },
            TestSpec::ExplicitGrid { grid } => TestSpec::ExplicitGrid {
                grid: RealGrid { origin: mv(&grid.origin), ..grid.clone() },
            },
        };
        Self::from_spec(spec)
    }

    /// Radial description `(center, profile, reach, breakpoints)` for radial kinds.
    pub fn radial(&self) -> Option<(&[f64], impl Fn(f64) -> f64 + '_, f64, Vec<f64>)> {
        self.radial
            .as_ref()
            .map(|rp| (rp.center.as_slice(), move |r: f64| rp.eval(r), rp.reach, rp.breakpoints()))
    }

    /// `∫ η`.
    pub fn integral(&self) -> f64 {
        if let Some((_, p, reach, bps)) = self.radial() {
            let area = sphere_area(self.dim);
            let d = self.dim as i32;
            let mut edges = vec![0.0];
            edges.extend(bps.into_iter().filter(|b| *b > 0.0 && *b < reach));
            edges.push(reach);
            return edges
                .windows(2)
                .map(|w| composite_gl(|r| area * r.powi(d - 1) * p(r), w[0], w[1], 8, 16))
                .sum();
        }
        match &self.spec {
            TestSpec::ExplicitGrid { grid } => {
                // Multilinear interpolation integrates like the trapezoidal rule.
                grid.values.iter().sum::<f64>() * grid.spacing.powi(grid.dim() as i32)
            }
            _ => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mollifier_has_unit_mass() {
        for (d, eps) in [(3, 1.0), (3, 0.1), (4, 0.5)] {
            let m = Mollifier::new(d, eps).unwrap();
            assert!((m.mass() - 1.0).abs() < 1e-10, "{d} {eps}: {}", m.mass());
            assert_eq!(m.eval(&vec![eps; d]), 0.0);
        }
    }

    #[test]
    fn mollifier_lipschitz_bounds_differences() {
        let m = Mollifier::new(3, 0.3).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..3000 {
            let a = 0.3 * i as f64 / 3000.0;
            let b = a + 1e-6;
            worst = worst.max((m.profile(a) - m.profile(b)).abs() / 1e-6);
        }
        assert!(worst <= m.lipschitz() * (1.0 + 1e-6));
        assert!(worst >= 0.999 * m.lipschitz());
    }

    #[test]
    fn sphere_fraction_matches_three_dimensional_formula() {
        for (s, rho, r) in [(0.2, 1.0, 1.0), (0.5, 0.8, 1.0), (0.3, 1.1, 1.0)] {
            let f = sphere_fraction_inside(3, s, rho, r);
            let want = (r * r - (rho - s) * (rho - s)) / (4.0 * rho * s);
            assert!((f - want).abs() < 1e-12, "{f} vs {want}");
        }
    }

    #[test]
    fn mollified_ball_profile() {
        let eta = TestFunction::mollified_ball(vec![0.0; 3], 1.0, 0.25).unwrap();
        assert_eq!(eta.eval(&[0.5, 0.0, 0.0]), 1.0);
        assert_eq!(eta.eval(&[1.3, 0.0, 0.0]), 0.0);
        // Convolution preserves mass: ∫η = vol(B_1).
        assert!((eta.integral() - 4.0 * PI / 3.0).abs() < 1e-6);
        assert!((eta.sup_norm() - 1.0).abs() < 1e-12);
        let mid = eta.eval(&[1.0, 0.0, 0.0]);
        assert!(mid > 0.4 && mid < 0.5, "{mid}");
    }

    #[test]
    fn grid_kind_requires_zero_border() {
        let g = RealGrid::from_fn(vec![-1.0; 3], 0.5, vec![5; 3], |_| 1.0);
        assert!(TestFunction::explicit_grid(g).is_err());
        let g = RealGrid::from_fn(vec![-1.0; 3], 0.5, vec![5; 3], |x| {
            x.iter().map(|v| (1.0 - v.abs()).max(0.0)).product()
        });
        let eta = TestFunction::explicit_grid(g).unwrap();
        assert!((eta.eval(&[0.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((eta.eval(&[0.25, 0.0, 0.0]) - 0.75).abs() < 1e-15);
        assert!((eta.integral() - 1.0).abs() < 1e-12);
        assert!((eta.lipschitz() - 3f64.sqrt()).abs() < 1e-12);
    }
}
