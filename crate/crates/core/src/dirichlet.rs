//! The operator `I - P_U` of simple random walk killed outside a finite set
//! `U`, with a conjugate-gradient solver. Used for killed Green functions
//! and harmonic extensions.

use crate::error::{LabError, Result};
use crate::lattice::{Point, SiteSet};

const NONE: u32 = u32::MAX;

/// Sparse `I - P_U` on the sites of `U` (symmetric positive definite).
#[derive(Clone, Debug)]
pub struct KilledOperator {
    domain: SiteSet,
    dim: usize,
    nbrs: Vec<u32>,
}

impl KilledOperator {
    pub fn new(domain: &SiteSet) -> Self {
        let dim = domain.dim().unwrap_or(3);
        let deg = 2 * dim;
        let mut nbrs = vec![NONE; domain.len() * deg];
        for (i, p) in domain.iter().enumerate() {
            for (k, q) in p.neighbors().enumerate() {
                if let Some(j) = domain.position(&q) {
                    nbrs[i * deg + k] = j as u32;
                }
            }
        }
        KilledOperator { domain: domain.clone(), dim, nbrs }
    }

    pub fn domain(&self) -> &SiteSet {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain.is_empty()
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let deg = 2 * self.dim;
        let inv = 1.0 / deg as f64;
        for i in 0..v.len() {
            let mut s = 0.0;
            for &j in &self.nbrs[i * deg..(i + 1) * deg] {
                if j != NONE {
                    s += v[j as usize];
                }
            }
            out[i] = v[i] - inv * s;
        }
    }

    /// Solves `(I - P_U) x = b` by conjugate gradients to relative residual `tol`.
    pub fn solve(&self, b: &[f64], tol: f64) -> Result<Vec<f64>> {
        let n = b.len();
        let mut x = vec![0.0; n];
        let bnorm = norm(b);
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rr = dot(&r, &r);
        let max_iter = 20 * n + 1000;
        for _ in 0..max_iter {
            self.apply(&p, &mut ap);
            let alpha = rr / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rr_new = dot(&r, &r);
            if rr_new.sqrt() <= tol * bnorm {
                return Ok(x);
            }
            let beta = rr_new / rr;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rr = rr_new;
        }
        Err(LabError::Solver("conjugate gradients did not converge".into()))
    }

    /// Column `g_U(·, y)` of the killed Green function.
    pub fn green_column(&self, y: &Point) -> Result<Vec<f64>> {
        let j = self
            .domain
            .position(y)
            .ok_or_else(|| LabError::OutsideDomain(y.to_string()))?;
        let mut b = vec![0.0; self.len()];
        b[j] = 1.0;
        self.solve(&b, 1e-14)
    }

    /// Harmonic extension into `U` of boundary data `outside(q)` given on the
    /// outer boundary of `U`: solves `(I - P_U) h = (1/2d) Σ_{q ∉ U} outside(q)`.
    pub fn harmonic_extension(&self, mut outside: impl FnMut(&Point) -> f64) -> Result<Vec<f64>> {
        let deg = 2 * self.dim;
        let inv = 1.0 / deg as f64;
        let mut b = vec![0.0; self.len()];
        for (i, p) in self.domain.iter().enumerate() {
            for (k, q) in p.neighbors().enumerate() {
                if self.nbrs[i * deg + k] == NONE {
                    b[i] += inv * outside(&q);
                }
            }
        }
        self.solve(&b, 1e-14)
    }
}

/// `g_U(x, y)`, the Green function of the walk killed on leaving `U`.
pub fn green_killed(domain: &SiteSet, x: &Point, y: &Point) -> Result<f64> {
    let op = KilledOperator::new(domain);
    let i = domain
        .position(x)
        .ok_or_else(|| LabError::OutsideDomain(x.to_string()))?;
    Ok(op.green_column(y)?[i])
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
