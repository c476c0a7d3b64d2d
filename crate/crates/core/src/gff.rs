//! Exact sampling of the lattice Gaussian free field on finite windows,
//! the domain Markov decomposition, shifted laws with Cameron–Martin
//! weights, and the Gaussian second-moment tail inequality.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::KilledOperator;
use crate::error::{LabError, Result};
use crate::green::GreenTable;
use crate::lattice::{Point, SiteSet};
use crate::mc::{par_blocks, stream_rng};
use crate::potential::{EquilibriumMeasure, SOLVER_CAP};

/// One realization of the field on a window, possibly under a shifted law.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub window: Arc<SiteSet>,
    pub values: Vec<f64>,
    pub seed: u64,
    pub replica: u64,
    /// `log dP/dP^f` at this sample; 0 for unshifted draws.
    pub log_weight: f64,
}

impl FieldSample {
    /// A deterministic field, for constructed configurations.
    pub fn from_values(window: Arc<SiteSet>, values: Vec<f64>) -> Result<Self> {
        if values.len() != window.len() {
            return Err(LabError::invalid("field length does not match its window"));
        }
        Ok(FieldSample { window, values, seed: 0, replica: 0, log_weight: 0.0 })
    }

    pub fn from_fn(window: Arc<SiteSet>, f: impl Fn(&Point) -> f64) -> Self {
        let values = window.iter().map(&f).collect();
        FieldSample { window, values, seed: 0, replica: 0, log_weight: 0.0 }
    }

    pub fn value(&self, x: &Point) -> Option<f64> {
        self.window.position(x).map(|i| self.values[i])
    }

    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

/// Green matrix of a window with its Cholesky factor, shared across draws.
pub struct GffSampler {
    window: Arc<SiteSet>,
    chol: Cholesky<f64, Dyn>,
    lower: DMatrix<f64>,
}

impl GffSampler {
    pub fn new(gt: &GreenTable, window: &SiteSet) -> Result<Self> {
        let n = window.len();
        if n == 0 {
            return Err(LabError::invalid("empty sampling window"));
        }
        if n > SOLVER_CAP {
            return Err(LabError::TooLarge { size: n, cap: SOLVER_CAP });
        }
        if window.dim() != Some(gt.dim()) {
            return Err(LabError::DimensionMismatch { expected: gt.dim(), got: window.dim().unwrap_or(0) });
        }
        let sites = window.sites();
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| (0..n).map(|i| gt.g_between(&sites[i], &sites[j])).collect())
            .collect();
        let g = DMatrix::from_fn(n, n, |i, j| cols[j][i]);
        let chol = g.cholesky().ok_or_else(|| {
            LabError::Solver("Green matrix of the window is not positive definite (corrupt Green cache?)".into())
        })?;
        let lower = chol.l();
        Ok(GffSampler { window: Arc::new(window.clone()), chol, lower })
    }

    pub fn window(&self) -> &Arc<SiteSet> {
        &self.window
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// `φ = L z` with `z` standard normal.
    pub fn draw_values(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.len();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.lower * z).data.into()
    }

    /// `n` independent samples; replica `i` draws from stream `i` of `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<FieldSample> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, i);
                FieldSample {
                    window: self.window.clone(),
                    values: self.draw_values(&mut rng),
                    seed,
                    replica: i,
                    log_weight: 0.0,
                }
            })
            .collect()
    }

    /// Replicas `first..first + count` of `seed` as the columns of one matrix;
    /// column `j` uses the normals of stream `first + j`, as in [`GffSampler::sample`].
    pub fn draw_block(&self, seed: u64, first: u64, count: usize) -> DMatrix<f64> {
        let n = self.len();
        let mut z = DMatrix::zeros(n, count);
        for j in 0..count {
            let mut rng = stream_rng(seed, first + j as u64);
            for v in z.column_mut(j).iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        &self.lower * z
    }

    /// `G^{-1} f` on the window.
    pub fn preimage(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.len() {
            return Err(LabError::invalid("shift length does not match the window"));
        }
        Ok(self.chol.solve(&DVector::from_column_slice(f)).data.into())
    }

    /// A tilt by an arbitrary deterministic field on the window.
    pub fn tilt(&self, f: Vec<f64>) -> Result<Tilt> {
        let lambda = self.preimage(&f)?;
        Ok(Tilt::new(f, lambda))
    }

    /// Samples of `φ + f`, `φ ~ P`, with weights `dP/dP^f`.
    pub fn sample_shifted(&self, tilt: &Tilt, n: usize, seed: u64) -> Result<Vec<FieldSample>> {
        if tilt.f.len() != self.len() {
            return Err(LabError::invalid("shift is not defined on the sampling window"));
        }
        let mut out = self.sample(n, seed);
        for s in &mut out {
            tilt.apply(s);
        }
        Ok(out)
    }
}

/// A deterministic shift `f` and its Green preimage `λ = G^{-1} f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tilt {
    pub f: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `½ ⟨λ, f⟩`.
    pub half_norm: f64,
}

impl Tilt {
    pub fn new(f: Vec<f64>, lambda: Vec<f64>) -> Self {
        let half_norm = 0.5 * f.iter().zip(&lambda).map(|(a, b)| a * b).sum::<f64>();
        Tilt { f, lambda, half_norm }
    }

    /// `f = s · P_·[H_A < ∞]` on the window. Since `G e_A = 1` on `A`, the
    /// preimage is `λ = s e_A` and `½⟨λ, f⟩ = ½ s² cap(A)`; requires `A` inside
    /// the window.
    pub fn from_equilibrium(gt: &GreenTable, em: &EquilibriumMeasure, window: &SiteSet, s: f64) -> Result<Self> {
        if !em.support().is_subset_of(window) {
            return Err(LabError::OutsideDomain("tilt set leaves the sampling window".into()));
        }
        let f: Vec<f64> = em.potential_raw(gt, window.sites()).into_iter().map(|v| s * v).collect();
        let mut lambda = vec![0.0; window.len()];
        for (x, w) in em.charged() {
            lambda[window.position(x).expect("checked subset")] = s * w;
        }
        Ok(Tilt::new(f, lambda))
    }

    /// `log dP/dP^f (φ) = -⟨λ, φ⟩ + ½⟨λ, f⟩`.
    pub fn log_weight(&self, phi: &[f64]) -> f64 {
        -phi.iter().zip(&self.lambda).map(|(a, b)| a * b).sum::<f64>() + self.half_norm
    }

    /// Shifts an unshifted sample and records its weight.
    pub fn apply(&self, s: &mut FieldSample) {
        for (v, f) in s.values.iter_mut().zip(&self.f) {
            *v += f;
        }
        s.log_weight = self.log_weight(&s.values);
    }
}

/// `φ = ψ^U + h^U` with `h^U` harmonic in `U` and equal to `φ` outside.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub psi: Vec<f64>,
    pub h: Vec<f64>,
}

/// Reusable harmonic-extension machinery for a fixed `U` inside a window.
pub struct Decomposer {
    window: Arc<SiteSet>,
    op: KilledOperator,
    /// Window index of each site of `U`.
    inner: Vec<usize>,
}

impl Decomposer {
    pub fn new(window: Arc<SiteSet>, u: &SiteSet) -> Result<Self> {
        if !u.is_subset_of(&window) || !u.outer_boundary().is_subset_of(&window) {
            return Err(LabError::OutsideDomain("U or its outer boundary leaves the window".into()));
        }
        let inner = u.iter().map(|x| window.position(x).expect("checked subset")).collect();
        Ok(Decomposer { window, op: KilledOperator::new(u), inner })
    }

    pub fn domain(&self) -> &SiteSet {
        self.op.domain()
    }

    pub fn window(&self) -> &Arc<SiteSet> {
        &self.window
    }

    pub fn decompose(&self, phi: &FieldSample) -> Result<Decomposition> {
        if !Arc::ptr_eq(&phi.window, &self.window) && *phi.window != *self.window {
            return Err(LabError::invalid("sample lives on a different window"));
        }
        let mut h = phi.values.clone();
        let mut psi = vec![0.0; h.len()];
        if self.op.is_empty() {
            return Ok(Decomposition { psi, h });
        }
        let w = &self.window;
        let ext = self.op.harmonic_extension(|q| phi.values[w.position(q).expect("outer boundary in window")])?;
        for (k, &i) in self.inner.iter().enumerate() {
            h[i] = ext[k];
            psi[i] = phi.values[i] - ext[k];
        }
        Ok(Decomposition { psi, h })
    }
}

/// One-shot [`Decomposer::decompose`].
pub fn decompose(phi: &FieldSample, u: &SiteSet) -> Result<Decomposition> {
    Decomposer::new(phi.window.clone(), u)?.decompose(phi)
}

/// Row of [`gaussian_tail_check`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub t: f64,
    pub empirical: f64,
    pub se: f64,
    pub bound: f64,
}

/// Empirical `Q[Σ Y_i² ≥ tr G + t]` for `Y ~ N(0, G)` against
/// `exp(-min(t/Ḡ, t²/tr G²)/8)` with `Ḡ = max_i Σ_j |G_ij|`.
pub fn gaussian_tail_check(g: &DMatrix<f64>, ts: &[f64], draws: usize, seed: u64) -> Result<Vec<TailRow>> {
    let m = g.nrows();
    if m == 0 || g.ncols() != m {
        return Err(LabError::invalid("covariance must be a non-empty square matrix"));
    }
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| LabError::Solver("covariance is not positive definite".into()))?;
    let lower = chol.l();
    let trace = g.trace();
    let trace_sq = (g * g).trace();
    let gbar = (0..m).map(|i| g.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let counts = par_blocks(seed, draws, |rng, n| {
        let mut c = vec![0u64; ts.len()];
        for _ in 0..n {
            let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let y = &lower * z;
            let s = y.norm_squared() - trace;
            for (k, t) in ts.iter().enumerate() {
                if s >= *t {
                    c[k] += 1;
                }
            }
        }
        c
    });
    Ok(ts
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let hits: u64 = counts.iter().map(|c| c[k]).sum();
            let e = crate::mc::binomial_estimate(hits, draws as u64);
            let bound = (-(t / gbar).min(t * t / trace_sq) / 8.0).exp();
            TailRow { t, empirical: e.value, se: e.se, bound }
        })
        .collect())
}

/// Green matrix `(g(x, y))_{x, y ∈ window}`.
pub fn green_matrix(gt: &GreenTable, window: &SiteSet) -> DMatrix<f64> {
    let s = window.sites();
    DMatrix::from_fn(s.len(), s.len(), |i, j| gt.g_between(&s[i], &s[j]))
}

/// Long-format CSV `sample,x0,..,value`.
pub fn write_samples_csv<W: Write>(mut w: W, samples: &[FieldSample]) -> Result<()> {
    let Some(first) = samples.first() else {
        writeln!(w, "sample,value")?;
        return Ok(());
    };
    let d = first.window.dim().unwrap_or(0);
    let cols: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    writeln!(w, "sample,{},value", cols.join(","))?;
    for s in samples {
        for (p, v) in s.window.iter().zip(&s.values) {
            let c: Vec<String> = p.coords().iter().map(|c| c.to_string()).collect();
            writeln!(w, "{},{},{}", s.replica, c.join(","), v)?;
        }
    }
    Ok(())
}

/// 64-bit FNV-1a digest as 16 hex digits.
pub fn fnv_hex(bytes: impl IntoIterator<Item = u8>) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

pub fn window_hash(window: &SiteSet) -> String {
    fnv_hex(window.iter().flat_map(|p| p.coords().iter().flat_map(|c| c.to_le_bytes()).collect::<Vec<u8>>()))
}

pub fn field_hash(values: &[f64]) -> String {
    fnv_hex(values.iter().flat_map(|v| v.to_bits().to_le_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::IntBox;
    use crate::mc::Moments;
    use crate::potential::equilibrium_measure;
    use std::sync::OnceLock;

    fn table() -> &'static GreenTable {
        static T: OnceLock<GreenTable> = OnceLock::new();
        T.get_or_init(|| GreenTable::new(3).unwrap())
    }

    fn cube(r: i32) -> SiteSet {
        SiteSet::from_box(&IntBox::ball(Point::origin(3), r))
    }

    #[test]
    fn variance_and_neighbour_covariance() {
        let w = cube(1);
        let s = GffSampler::new(table(), &w).unwrap();
        let o = w.position(&Point::origin(3)).unwrap();
        let e = w.position(&Point::unit(3, 0, 1)).unwrap();
        let samples = s.sample(10_000, 5);
        let var: Moments = samples.iter().map(|f| f.values[o] * f.values[o]).collect();
        let cov: Moments = samples.iter().map(|f| f.values[o] * f.values[e]).collect();
        let g0 = table().g0();
        assert!(var.estimate().z_exact(g0) < 3.0);
        assert!(cov.estimate().z_exact(g0 - 1.0) < 3.0);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let s = GffSampler::new(table(), &cube(1)).unwrap();
        let a = s.sample(20, 9);
        let b = s.sample(20, 9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values, y.values);
        }
        assert_ne!(a[0].values, s.sample(1, 10)[0].values);
    }

    #[test]
    fn oversized_window_rejected() {
        let w = cube(8);
        assert!(matches!(GffSampler::new(table(), &w), Err(LabError::TooLarge { .. })));
    }

    #[test]
    fn decomposition_of_constant_and_empty_domain() {
        let w = Arc::new(cube(3));
        let phi = FieldSample::from_fn(w.clone(), |_| 2.5);
        let u = cube(2);
        let d = decompose(&phi, &u).unwrap();
        assert!(d.h.iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert!(d.psi.iter().all(|v| v.abs() < 1e-12));
        let empty = SiteSet::from_points(vec![]).unwrap();
        let d = decompose(&phi, &empty).unwrap();
        assert_eq!(d.h, phi.values);
        assert!(d.psi.iter().all(|v| *v == 0.0));
        assert!(decompose(&phi, &cube(3)).is_err());
    }

    #[test]
    fn psi_variance_is_killed_green_function() {
        let w = cube(2);
        let s = GffSampler::new(table(), &w).unwrap();
        let u = cube(1);
        let dec = Decomposer::new(s.window().clone(), &u).unwrap();
        let o = w.position(&Point::origin(3)).unwrap();
        let m: Moments = s
            .sample(10_000, 3)
            .iter()
            .map(|f| dec.decompose(f).unwrap().psi[o].powi(2))
            .collect();
        let want = crate::dirichlet::green_killed(&u, &Point::origin(3), &Point::origin(3)).unwrap();
        assert!(m.estimate().z_exact(want) < 3.0, "{:?} vs {want}", m.estimate());
    }

    #[test]
    fn equilibrium_tilt_has_the_solved_preimage() {
        let w = cube(3);
        let s = GffSampler::new(table(), &w).unwrap();
        let a = cube(1);
        let em = equilibrium_measure(table(), &a).unwrap();
        let t = Tilt::from_equilibrium(table(), &em, &w, 0.7).unwrap();
        let solved = s.preimage(&t.f).unwrap();
        for (x, y) in solved.iter().zip(&t.lambda) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
        // G λ = s on A.
        let g = green_matrix(table(), &w);
        let gl = &g * DVector::from_column_slice(&t.lambda);
        for x in a.iter() {
            assert!((gl[w.position(x).unwrap()] - 0.7).abs() < 1e-8);
        }
        assert!((t.half_norm - 0.5 * 0.49 * em.capacity()).abs() < 1e-10);
    }

    #[test]
    fn zero_shift_has_unit_weights() {
        let s = GffSampler::new(table(), &cube(1)).unwrap();
        let t = s.tilt(vec![0.0; 27]).unwrap();
        for f in s.sample_shifted(&t, 10, 1).unwrap() {
            assert_eq!(f.weight(), 1.0);
        }
    }

    #[test]
    fn tilted_estimate_is_unbiased() {
        let w = cube(1);
        let s = GffSampler::new(table(), &w).unwrap();
        let o = w.position(&Point::origin(3)).unwrap();
        let f: Vec<f64> = w.iter().map(|x| -0.5 * (1.0 - 0.2 * x.norm1() as f64)).collect();
        let t = s.tilt(f).unwrap();
        let m: Moments = s
            .sample_shifted(&t, 20_000, 2)
            .unwrap()
            .iter()
            .map(|x| if x.values[o] > 0.0 { x.weight() } else { 0.0 })
            .collect();
        assert!(m.estimate().z_exact(0.5) < 3.0, "{:?}", m.estimate());
    }

    #[test]
    fn tail_bound_for_identity() {
        let g = DMatrix::<f64>::identity(10, 10);
        let rows = gaussian_tail_check(&g, &[0.0, 5.0, 20.0], 5000, 1).unwrap();
        assert_eq!(rows[0].bound, 1.0);
        for r in rows {
            assert!(r.empirical <= r.bound);
        }
    }

    #[test]
    fn csv_and_hashes() {
        let s = GffSampler::new(table(), &cube(1)).unwrap();
        let samples = s.sample(2, 1);
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample,x0,x1,x2,value\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 27);
        assert_eq!(window_hash(&cube(1)), window_hash(&cube(1)));
        assert_ne!(window_hash(&cube(1)), window_hash(&cube(2)));
        assert_ne!(field_hash(&samples[0].values), field_hash(&samples[1].values));
    }
}
