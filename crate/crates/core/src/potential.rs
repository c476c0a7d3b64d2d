//! Equilibrium measures, capacities and hitting probabilities of finite
//! subsets of `Z^d`.
//!
//! The equilibrium measure is supported on the inner boundary of `K` and
//! solves `Σ_{x'} g(x, x') e_K(x') = 1` there. When `K` has lattice
//! symmetries (reflections and axis permutations about the centre of its
//! bounding box), the system is reduced to one unknown per orbit: with `P`
//! the orbit indicator matrix the reduced system `PᵀGP w = Pᵀ1` is again
//! symmetric positive definite.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::green::GreenTable;
use crate::lattice::{Point, SiteSet, MAX_DIM};

/// Largest linear system (after symmetry reduction) the dense solver accepts.
pub const SOLVER_CAP: usize = 4000;

const NEGATIVE_WEIGHT_TOL: f64 = 1e-10;
const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquilibriumMeasure {
    support: SiteSet,
    weights: Vec<f64>,
    capacity: f64,
    max_residual: f64,
    reduced_size: usize,
}

impl EquilibriumMeasure {
    /// The set `K` itself; interior sites carry zero weight.
    pub fn support(&self) -> &SiteSet {
        &self.support
    }

    /// Weights aligned with `support().sites()`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, x: &Point) -> f64 {
        self.support.position(x).map(|i| self.weights[i]).unwrap_or(0.0)
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    /// Largest `|Σ g(x,x')w(x') - 1|` over the boundary orbit representatives.
    pub fn max_residual(&self) -> f64 {
        self.max_residual
    }

    /// Number of unknowns in the linear system that was solved.
    pub fn reduced_size(&self) -> usize {
        self.reduced_size
    }

    /// Sites with positive weight and their weights.
    pub fn charged(&self) -> impl Iterator<Item = (&Point, f64)> {
        self.support.iter().zip(self.weights.iter().copied()).filter(|(_, w)| *w > 0.0)
    }

    /// `P_x[H_K < ∞] = Σ g(x, x') e_K(x')`, equal to 1 on `K`.
    pub fn potential(&self, gt: &GreenTable, x: &Point) -> f64 {
        if self.support.contains(x) {
            return 1.0;
        }
        let s: f64 = self.charged().map(|(y, w)| gt.g_between(x, y) * w).sum();
        s.clamp(0.0, 1.0)
    }

    /// Unclamped `Σ g(x, x') e_K(x')` for every `x` in `sites`.
    pub fn potential_raw(&self, gt: &GreenTable, sites: &[Point]) -> Vec<f64> {
        let charged: Vec<(Point, f64)> = self.charged().map(|(p, w)| (*p, w)).collect();
        sites
            .par_iter()
            .map(|x| charged.iter().map(|(y, w)| gt.g_between(x, y) * w).sum())
            .collect()
    }

    /// CSV with columns `x0,..,x{d-1},weight`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_site_csv(w, self.support.sites(), &self.weights, "weight")
    }
}

/// CSV dump of per-site values.
pub fn write_site_csv<W: Write>(mut w: W, sites: &[Point], values: &[f64], name: &str) -> Result<()> {
    let d = sites.first().map(|p| p.dim()).unwrap_or(0);
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    writeln!(w, "{},{name}", header.join(","))?;
    for (p, v) in sites.iter().zip(values) {
        let coords: Vec<String> = p.coords().iter().map(|c| c.to_string()).collect();
        writeln!(w, "{},{v:.17e}", coords.join(","))?;
    }
    Ok(())
}

/// Symmetries of a site set: signed axis permutations about the centre of
/// its bounding box that map the set to itself.
#[derive(Clone, Debug)]
pub struct SymmetryGroup {
    /// Twice the centre, so that reflections stay in integers.
    twice_center: [i64; MAX_DIM],
    dim: usize,
    elements: Vec<([usize; MAX_DIM], [i64; MAX_DIM])>,
}

impl SymmetryGroup {
    pub fn of(set: &SiteSet) -> Self {
        let dim = set.dim().unwrap_or(3);
        let mut twice_center = [0i64; MAX_DIM];
        if let Some(bb) = set.bounding_box() {
            for i in 0..dim {
                twice_center[i] = bb.lo.coord(i) as i64 + bb.hi.coord(i) as i64;
            }
        }
        let mut g = SymmetryGroup { twice_center, dim, elements: Vec::new() };
        let mut perm: Vec<usize> = (0..dim).collect();
        let mut perms = Vec::new();
        permutations(&mut perm, 0, &mut perms);
        for pm in perms {
            for mask in 0..(1u32 << dim) {
                let mut pa = [0usize; MAX_DIM];
                let mut sg = [1i64; MAX_DIM];
                for i in 0..dim {
                    pa[i] = pm[i];
                    if mask >> i & 1 == 1 {
                        sg[i] = -1;
                    }
                }
                let candidate = (pa, sg);
                if set.iter().all(|p| g.apply_one(&candidate, p).is_some_and(|q| set.contains(&q))) {
                    g.elements.push(candidate);
                }
            }
        }
        g
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    fn apply_one(&self, e: &([usize; MAX_DIM], [i64; MAX_DIM]), p: &Point) -> Option<Point> {
        let mut c = [0i32; MAX_DIM];
        for i in 0..self.dim {
            let j = e.0[i];
            let xj = 2 * p.coord(j) as i64 - self.twice_center[j];
            let yi = e.1[i] * xj + self.twice_center[i];
            if yi.rem_euclid(2) != 0 {
                return None;
            }
            c[i] = (yi / 2) as i32;
        }
        Some(Point::new(&c[..self.dim]).ok()?)
    }

    /// Orbit label of every site of `set` (labels are dense, in order of
    /// first appearance) and the number of orbits.
    pub fn orbits(&self, set: &SiteSet) -> (Vec<usize>, usize) {
        let mut label = vec![usize::MAX; set.len()];
        let mut count = 0;
        for i in 0..set.len() {
            if label[i] != usize::MAX {
                continue;
            }
            let p = set.sites()[i];
            for e in &self.elements {
                if let Some(q) = self.apply_one(e, &p) {
                    if let Some(j) = set.position(&q) {
                        label[j] = count;
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }
}

fn permutations(v: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == v.len() {
        out.push(v.clone());
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, out);
        v.swap(k, i);
    }
}

/// Equilibrium measure and capacity of a finite non-empty `K`.
pub fn equilibrium_measure(gt: &GreenTable, k: &SiteSet) -> Result<EquilibriumMeasure> {
    if k.is_empty() {
        return Err(LabError::invalid("equilibrium measure of an empty set"));
    }
    if k.dim() != Some(gt.dim()) {
        return Err(LabError::DimensionMismatch { expected: gt.dim(), got: k.dim().unwrap_or(0) });
    }
    let boundary = k.inner_boundary();
    let group = SymmetryGroup::of(&boundary);
    let (label, r) = group.orbits(&boundary);
    if r > SOLVER_CAP {
        return Err(LabError::TooLarge { size: r, cap: SOLVER_CAP });
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); r];
    for (i, &l) in label.iter().enumerate() {
        members[l].push(i);
    }
    let sites = boundary.sites();
    // row a of M: Σ_{y ∈ O_b} g(rep_a, y); the symmetric matrix is |O_a| M_ab.
    let rows: Vec<Vec<f64>> = (0..r)
        .into_par_iter()
        .map(|a| {
            let rep = sites[members[a][0]];
            let mut row = vec![0.0; r];
            for (j, y) in sites.iter().enumerate() {
                row[label[j]] += gt.g_between(&rep, y);
            }
            row
        })
        .collect();
    let mut s = DMatrix::<f64>::zeros(r, r);
    for a in 0..r {
        let na = members[a].len() as f64;
        for b in 0..r {
            s[(a, b)] = na * rows[a][b];
        }
    }
    // Symmetrize away rounding differences before factorizing.
    let s = (&s + s.transpose()) * 0.5;
    let rhs = DVector::from_iterator(r, members.iter().map(|m| m.len() as f64));
    let chol = s.cholesky().ok_or_else(|| {
        LabError::Solver("Green matrix is not numerically positive definite".into())
    })?;
    let w = chol.solve(&rhs);
    let mut max_residual: f64 = 0.0;
    for a in 0..r {
        let v: f64 = (0..r).map(|b| rows[a][b] * w[b]).sum();
        max_residual = max_residual.max((v - 1.0).abs());
    }
    if max_residual > RESIDUAL_TOL {
        return Err(LabError::Numerical(format!(
            "equilibrium residual {max_residual:e} exceeds {RESIDUAL_TOL:e}"
        )));
    }
    let mut orbit_w = vec![0.0; r];
    for a in 0..r {
        if w[a] < -NEGATIVE_WEIGHT_TOL {
            return Err(LabError::Numerical(format!("negative equilibrium weight {}", w[a])));
        }
        orbit_w[a] = w[a].max(0.0);
    }
    let mut weights = vec![0.0; k.len()];
    for (j, y) in sites.iter().enumerate() {
        weights[k.position(y).expect("boundary lies in K")] = orbit_w[label[j]];
    }
    let capacity = weights.iter().sum();
    Ok(EquilibriumMeasure { support: k.clone(), weights, capacity, max_residual, reduced_size: r })
}

/// `P_x[H_K < ∞]`.
pub fn hitting_probability(gt: &GreenTable, k: &SiteSet, x: &Point) -> Result<f64> {
    Ok(equilibrium_measure(gt, k)?.potential(gt, x))
}
