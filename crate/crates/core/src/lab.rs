//! Experiment configuration, conditional Monte Carlo on the disconnection
//! event `D^α_N`, the experiment runners behind the command-line tool, and
//! result emission (`results.csv`, `manifest.json`, `fields/*.csv`).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::{BmConfig, CapacityMethod};
use crate::coarse::{gamma_n, GammaRule};
use crate::error::{LabError, Result};
use crate::gff::{field_hash, window_hash, FieldSample, GffSampler, Tilt};
use crate::green::GreenTable;
use crate::lattice::{blow_up, boundary_shell, shell_radius, IntBox, Point, RealBox, ShapeSpec, SiteSet};
use crate::mc::{derive_seed, Estimate, Moments};
use crate::observables::{
    phi_pair, x_pair, y_pair, HittingPotential, LocalFunctional, PercolationLevels, ZPairing,
};
use crate::percolation::{Disconnection, WindowGraph};
use crate::potential::{equilibrium_measure, EquilibriumMeasure};
use crate::solidify::{
    box_union_shape, capacity_ratio, dirichlet_gap, escape_gap, perforated_shell, porous_shell, probe_grid, srw_vs_bm_compare,
    SandwichConfig,
};
use crate::testfn::{Mollifier, TestFunction, TestSpec};

/// The free levels `α < δ < γ < h̄`, with `a = δ - α` unless given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Levels {
    pub alpha: f64,
    pub delta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub a: Option<f64>,
    pub h_bar_est: f64,
}

impl Levels {
    pub fn a(&self) -> f64 {
        self.a.unwrap_or(self.delta - self.alpha)
    }

    pub fn percolation(&self) -> PercolationLevels {
        PercolationLevels { alpha: self.alpha, h_bar_estimate: self.h_bar_est }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Rejection,
    #[default]
    Tilted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    /// Field samples per estimate.
    pub samples: usize,
    /// Inner Gaussian draws for `Φ` and `Z_N` pairings.
    pub inner: usize,
    /// Conditional runs abort below this effective sample size.
    pub min_ess: f64,
    pub bm_walkers: usize,
    pub srw_walkers: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets { samples: 10_000, inner: 200, min_ess: 100.0, bm_walkers: 20_000, srw_walkers: 20_000 }
    }
}

/// Geometry of the solidification and coupling sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolidifySettings {
    /// `A = [-a, a]^3`.
    pub a_half: f64,
    pub shell_half: f64,
    pub shell_thickness: f64,
    /// Hole half-widths in the top face, coarse to fine; 0 closes the shell.
    pub holes: Vec<f64>,
    pub mesh: u32,
    /// Hole pitches of the perforated shell on the faces of `A`, coarse to fine.
    pub pitches: Vec<f64>,
    /// Open fraction of each pitch cell side.
    pub open: f64,
    pub perforation_mesh: u32,
    pub bm_shell: f64,
    /// Box sides of the random walk / Brownian comparison.
    pub sandwich_l: Vec<i32>,
}

impl Default for SolidifySettings {
    fn default() -> Self {
        SolidifySettings {
            a_half: 0.5,
            shell_half: 0.75,
            shell_thickness: 0.25,
            holes: vec![0.5, 0.25, 0.125],
            mesh: 8,
            pitches: vec![0.5, 0.25, 0.125],
            open: 0.75,
            perforation_mesh: 32,
            bm_shell: 0.02,
            sandwich_l: vec![8, 16, 32],
        }
    }
}

fn default_k() -> u32 {
    100
}

fn default_gamma_rule() -> GammaRule {
    GammaRule::Default
}

fn default_margin() -> f64 {
    0.05
}

fn default_mesh() -> u32 {
    4
}

/// One experiment description, read from a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub n: u32,
    pub m: f64,
    pub shape: ShapeSpec,
    pub levels: Levels,
    #[serde(default = "default_k")]
    pub k: u32,
    #[serde(default = "default_gamma_rule")]
    pub gamma_rule: GammaRule,
    pub eps: f64,
    pub test_functions: Vec<TestSpec>,
    #[serde(default)]
    pub functionals: Vec<LocalFunctional>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub estimator: EstimatorKind,
    /// Skip the conditioning (control runs).
    #[serde(default)]
    pub unconditioned: bool,
    #[serde(default)]
    pub n_grid: Vec<u32>,
    #[serde(default)]
    pub h_bar_grid: Vec<f64>,
    /// Shift levels `s` of the profile curve `Φ(-s h_A)`.
    #[serde(default)]
    pub s_grid: Vec<f64>,
    /// `Δ` in the exceedance event `⟨X_N, η⟩ ≥ ⟨H, η⟩ + Δ`.
    #[serde(default = "default_margin")]
    pub pairing_margin: f64,
    /// Half-width of the box `J` of the `d_J` statistic; defaults to `⌊MN⌋/N`.
    #[serde(default)]
    pub j_half: Option<f64>,
    /// Mesh of the fine-lattice potential `h_A` for non-ball shapes.
    #[serde(default = "default_mesh")]
    pub potential_mesh: u32,
    #[serde(default)]
    pub dump_fields: bool,
    #[serde(default)]
    pub solidify: SolidifySettings,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.dim() != self.dim {
            return Err(LabError::DimensionMismatch { expected: self.dim, got: self.shape.dim() });
        }
        let l = &self.levels;
        if !(l.alpha < l.delta && l.delta < l.gamma) {
            return Err(LabError::invalid("levels must satisfy α < δ < γ"));
        }
        if !(l.alpha < l.h_bar_est) {
            return Err(LabError::invalid("levels must satisfy α < h̄_est"));
        }
        if !(l.a() > 0.0) {
            return Err(LabError::invalid("a must be positive"));
        }
        let bb = self.shape.bounding_box();
        let extent = bb.lo.iter().chain(&bb.hi).map(|v| v.abs()).fold(0.0, f64::max);
        if !(extent < self.m) {
            return Err(LabError::invalid(format!("A reaches l^inf radius {extent}, outside the M-box of radius {}", self.m)));
        }
        for n in self.n_grid.iter().chain([&self.n]) {
            shell_radius(self.m, *n)?;
        }
        if self.k == 0 || !(self.eps > 0.0) {
            return Err(LabError::invalid("K and ε must be positive"));
        }
        let b = &self.budgets;
        if b.samples == 0 || b.inner < 2 || !(b.min_ess > 0.0) || b.bm_walkers == 0 || b.srw_walkers == 0 {
            return Err(LabError::invalid("budgets must be positive"));
        }
        if self.test_functions.is_empty() {
            return Err(LabError::invalid("at least one test function is required"));
        }
        for spec in &self.test_functions {
            if TestFunction::from_spec(spec.clone())?.dim() != self.dim {
                return Err(LabError::invalid("test function dimension differs from d"));
            }
        }
        if self.h_bar_grid.iter().any(|h| !(*h > l.alpha)) {
            return Err(LabError::invalid("every h̄_est in the grid must exceed α"));
        }
        gamma_n(self.dim, self.n, self.gamma_rule)?;
        Ok(())
    }

    /// Fills defaulted grids and validates.
    pub fn resolved(mut self) -> Result<Self> {
        if self.n_grid.is_empty() {
            self.n_grid = vec![self.n];
        }
        if self.h_bar_grid.is_empty() {
            self.h_bar_grid = vec![self.levels.h_bar_est];
        }
        if self.s_grid.is_empty() {
            let gap = self.levels.h_bar_est - self.levels.alpha;
            self.s_grid = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5].iter().map(|c| c * gap).collect();
        }
        self.levels.a = Some(self.levels.a());
        self.validate()?;
        Ok(self)
    }

    pub fn test_functions(&self) -> Result<Vec<TestFunction>> {
        self.test_functions.iter().map(|s| TestFunction::from_spec(s.clone())).collect()
    }
}

/// Window `B_∞(0, ⌊MN⌋)`, its sampler, `A_N` and `S_N`.
pub struct Setup<'g> {
    pub gt: &'g GreenTable,
    pub n: u32,
    pub alpha: f64,
    pub window: Arc<SiteSet>,
    pub sampler: GffSampler,
    pub graph: WindowGraph,
    pub a_n: SiteSet,
    pub shell: SiteSet,
}

impl<'g> Setup<'g> {
    pub fn new(gt: &'g GreenTable, cfg: &ExperimentConfig, n: u32) -> Result<Self> {
        let r = shell_radius(cfg.m, n)?;
        let window = SiteSet::from_box(&IntBox::ball(Point::origin(cfg.dim), r));
        let sampler = GffSampler::new(gt, &window)?;
        let window = sampler.window().clone();
        let a_n = blow_up(&cfg.shape, n)?;
        if a_n.is_empty() {
            return Err(LabError::invalid("A_N has no lattice points"));
        }
        let shell = boundary_shell(cfg.m, n, cfg.dim)?;
        if a_n.intersects(&shell) {
            return Err(LabError::invalid("A_N touches S_N"));
        }
        let graph = WindowGraph::new(window.clone());
        Ok(Setup { gt, n, alpha: cfg.levels.alpha, window, sampler, graph, a_n, shell })
    }

    pub fn equilibrium(&self) -> Result<EquilibriumMeasure> {
        equilibrium_measure(self.gt, &self.a_n)
    }

    /// Shift `-s P_x[H_{A_N} < ∞]` on the window.
    pub fn tilt(&self, em: &EquilibriumMeasure, s: f64) -> Result<Tilt> {
        Tilt::from_equilibrium(self.gt, em, &self.window, -s)
    }
}

/// Additive sums for weighted estimates of `P[D]`, `E[X | D]` and `E[X]`
/// from samples `(w, 1_D, X)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightedSums {
    pub n: u64,
    pub hits: u64,
    sw: f64,
    sw2: f64,
    sd: f64,
    sd2: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    ua: Vec<f64>,
    uc: Vec<f64>,
}

impl WeightedSums {
    pub fn new(n_obs: usize) -> Self {
        WeightedSums {
            a: vec![0.0; n_obs],
            b: vec![0.0; n_obs],
            c: vec![0.0; n_obs],
            ua: vec![0.0; n_obs],
            uc: vec![0.0; n_obs],
            ..Default::default()
        }
    }

    pub fn observables(&self) -> usize {
        self.a.len()
    }

    pub fn push(&mut self, w: f64, in_d: bool, obs: &[f64]) {
        self.n += 1;
        self.sw += w;
        self.sw2 += w * w;
        for (k, x) in obs.iter().enumerate() {
            self.ua[k] += w * x;
            self.uc[k] += w * w * x * x;
        }
        if in_d {
            self.hits += 1;
            self.sd += w;
            self.sd2 += w * w;
            for (k, x) in obs.iter().enumerate() {
                self.a[k] += w * x;
                self.b[k] += w * w * x;
                self.c[k] += w * w * x * x;
            }
        }
    }

    pub fn merge(&mut self, o: &WeightedSums) {
        self.n += o.n;
        self.hits += o.hits;
        self.sw += o.sw;
        self.sw2 += o.sw2;
        self.sd += o.sd;
        self.sd2 += o.sd2;
        for (dst, src) in [(&mut self.a, &o.a), (&mut self.b, &o.b), (&mut self.c, &o.c), (&mut self.ua, &o.ua), (&mut self.uc, &o.uc)] {
            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
        }
    }

    fn mean_of(&self, sum: f64, sum_sq: f64) -> Estimate {
        Moments { n: self.n, sum, sum_sq }.estimate()
    }

    /// `E[w 1_D]`.
    pub fn probability(&self) -> Estimate {
        self.mean_of(self.sd, self.sd2)
    }

    /// `E[w]`, which is 1 for a correctly weighted law.
    pub fn weight_mean(&self) -> Estimate {
        self.mean_of(self.sw, self.sw2)
    }

    /// `E[w X_k]`.
    pub fn unconditional(&self, k: usize) -> Estimate {
        self.mean_of(self.ua[k], self.uc[k])
    }

    /// `E[w 1_D X_k]`.
    pub fn joint(&self, k: usize) -> Estimate {
        self.mean_of(self.a[k], self.c[k])
    }

    /// Self-normalized `E[X_k | D]` with the delta-method error bar.
    pub fn conditional(&self, k: usize) -> Estimate {
        if self.sd <= 0.0 {
            return Estimate { value: f64::NAN, se: f64::NAN };
        }
        let r = self.a[k] / self.sd;
        let var = (self.c[k] - 2.0 * r * self.b[k] + r * r * self.sd2).max(0.0);
        Estimate { value: r, se: var.sqrt() / self.sd }
    }

    /// `(Σ w 1_D)² / Σ w² 1_D`.
    pub fn ess(&self) -> f64 {
        if self.sd2 > 0.0 {
            self.sd * self.sd / self.sd2
        } else {
            0.0
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.hits as f64 / self.n.max(1) as f64
    }
}

/// Replicas per sampling block; the blocking fixes the summation order.
const ENSEMBLE_BLOCK: usize = 64;

/// Draws `samples` fields (shifted by `tilt` when given), tests `D^α_N` and
/// accumulates `obs(φ, 1_D)`. With `condition = false` every sample counts as in `D`.
pub fn run_ensemble<F>(
    setup: &Setup,
    tilt: Option<&Tilt>,
    condition: bool,
    samples: usize,
    seed: u64,
    n_obs: usize,
    obs: F,
) -> Result<WeightedSums>
where
    F: Fn(&FieldSample, bool) -> Vec<f64> + Sync,
{
    let disc = Disconnection::new(&setup.graph, &setup.a_n, &setup.shell)?;
    let blocks = samples.div_ceil(ENSEMBLE_BLOCK);
    let parts: Vec<WeightedSums> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let first = b * ENSEMBLE_BLOCK;
            let count = ENSEMBLE_BLOCK.min(samples - first);
            let draws = setup.sampler.draw_block(seed, first as u64, count);
            let mut acc = WeightedSums::new(n_obs);
            let mut mask = vec![false; setup.window.len()];
            for j in 0..count {
                let mut sample = FieldSample {
                    window: setup.window.clone(),
                    values: draws.column(j).iter().copied().collect(),
                    seed,
                    replica: (first + j) as u64,
                    log_weight: 0.0,
                };
                if let Some(t) = tilt {
                    t.apply(&mut sample);
                }
                let in_d = !condition || {
                    mask.iter_mut().zip(&sample.values).for_each(|(m, v)| *m = *v >= setup.alpha);
                    disc.check_mask(&mask)
                };
                let x = obs(&sample, in_d);
                acc.push(sample.weight(), in_d, &x);
            }
            acc
        })
        .collect();
    let mut total = WeightedSums::new(n_obs);
    parts.iter().for_each(|p| total.merge(p));
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEstimate {
    pub kind: EstimatorKind,
    pub value: f64,
    pub se: f64,
    pub acceptance_rate: f64,
    pub ess: f64,
    pub samples: usize,
}

/// `P[D^α_N]` by rejection or by sampling under the shift `-s h_{A_N}`.
pub fn estimate_disconnection(
    gt: &GreenTable,
    cfg: &ExperimentConfig,
    n: u32,
    kind: EstimatorKind,
    s: f64,
) -> Result<ConditionalEstimate> {
    let setup = Setup::new(gt, cfg, n)?;
    let tilt = match kind {
        EstimatorKind::Rejection => None,
        EstimatorKind::Tilted => Some(setup.tilt(&setup.equilibrium()?, s)?),
    };
    let seed = derive_seed(cfg.seed, &format!("disconnect/{n}/{kind:?}/{s}"));
    let sums = run_ensemble(&setup, tilt.as_ref(), true, cfg.budgets.samples, seed, 0, |_, _| Vec::new())?;
    if sums.hits == 0 {
        return Err(LabError::Budget(format!("no disconnected sample among {} draws ({kind:?})", sums.n)));
    }
    let p = sums.probability();
    Ok(ConditionalEstimate {
        kind,
        value: p.value,
        se: p.se,
        acceptance_rate: sums.acceptance_rate(),
        ess: sums.ess(),
        samples: cfg.budgets.samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub key: String,
    pub value: f64,
    pub se: f64,
}

/// Rows, raw field dumps and manifest entries of one experiment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub experiment: String,
    pub rows: Vec<ResultRow>,
    /// `(file stem, CSV text)` written under `fields/`.
    pub fields: Vec<(String, String)>,
    pub meta: BTreeMap<String, String>,
}

impl Report {
    pub fn new(experiment: &str) -> Self {
        Report { experiment: experiment.to_string(), ..Default::default() }
    }

    pub fn push(&mut self, key: impl Into<String>, e: Estimate) {
        self.rows.push(ResultRow { experiment: self.experiment.clone(), key: key.into(), value: e.value, se: e.se });
    }

    pub fn push_exact(&mut self, key: impl Into<String>, value: f64) {
        self.push(key, Estimate::exact(value));
    }

    pub fn get(&self, key: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    pub fn estimate(&self, key: &str) -> Result<Estimate> {
        self.get(key)
            .map(|r| Estimate { value: r.value, se: r.se })
            .ok_or_else(|| LabError::invalid(format!("report {} has no row {key}", self.experiment)))
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// `∫ h_A η`, midpoint rule with `cells` per axis on the support of `η`.
fn potential_pairing(gt: &GreenTable, h: &HittingPotential, eta: &TestFunction, cells: usize) -> f64 {
    let b = eta.support_box();
    let d = b.dim();
    let widths: Vec<f64> = (0..d).map(|i| (b.hi[i] - b.lo[i]) / cells as f64).collect();
    let vol: f64 = widths.iter().product();
    (0..cells.pow(d as u32))
        .into_par_iter()
        .map(|mut k| {
            let x: Vec<f64> = (0..d)
                .map(|i| {
                    let c = k % cells;
                    k /= cells;
                    b.lo[i] + (c as f64 + 0.5) * widths[i]
                })
                .collect();
            let e = eta.eval(&x);
            if e == 0.0 {
                0.0
            } else {
                e * h.eval(gt, &x) * vol
            }
        })
        .sum()
}

fn site_csv(sites: &[Point], columns: &[(&str, &[f64])]) -> String {
    let d = sites.first().map(|p| p.dim()).unwrap_or(0);
    let mut out = String::new();
    let head: Vec<String> = (0..d).map(|i| format!("x{i}")).chain(columns.iter().map(|c| c.0.to_string())).collect();
    out.push_str(&head.join(","));
    out.push('\n');
    for (i, p) in sites.iter().enumerate() {
        let row: Vec<String> = p
            .coords()
            .iter()
            .map(|c| c.to_string())
            .chain(columns.iter().map(|c| format!("{:e}", c.1[i])))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn fail_ess(sums: &WeightedSums, min_ess: f64, what: &str) -> Result<()> {
    if sums.ess() < min_ess {
        return Err(LabError::Budget(format!(
            "{what}: effective sample size {:.1} below {min_ess} (acceptance rate {:.3e})",
            sums.ess(),
            sums.acceptance_rate()
        )));
    }
    Ok(())
}

fn sampling_tilt(setup: &Setup, cfg: &ExperimentConfig, em: &EquilibriumMeasure, h_bar: f64) -> Result<Option<Tilt>> {
    match cfg.estimator {
        EstimatorKind::Rejection => Ok(None),
        EstimatorKind::Tilted if cfg.unconditioned => Ok(None),
        EstimatorKind::Tilted => setup.tilt(em, h_bar - cfg.levels.alpha).map(Some),
    }
}

fn record_meta(report: &mut Report, setup: &Setup, tilt: Option<&Tilt>, tag: &str) {
    report.meta.insert(format!("{tag}/window_hash"), window_hash(&setup.window));
    if let Some(t) = tilt {
        report.meta.insert(format!("{tag}/shift_hash"), field_hash(&t.f));
    }
}

/// Conditional means of `⟨X_N, η⟩`, exceedance frequencies over the target
/// pairing, and the conditional mean profile against `-h_A(x/N)`, across the
/// `N` and `h̄_est` grids. The sampling tilt uses `s = h̄_est - α`.
pub fn run_pushdown(gt: &GreenTable, cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new("pushdown");
    let etas = cfg.test_functions()?;
    let h = HittingPotential::for_shape(gt, &cfg.shape, cfg.potential_mesh)?;
    let h_pairs: Vec<f64> = etas.iter().map(|e| potential_pairing(gt, &h, e, 32)).collect();
    let t = etas.len();
    for &n in &cfg.n_grid {
        let setup = Setup::new(gt, cfg, n)?;
        let em = setup.equilibrium()?;
        let neg_h: Vec<f64> = setup.window.iter().map(|x| -h.eval(gt, &x.to_real(1.0 / n as f64))).collect();
        for &h_bar in &cfg.h_bar_grid {
            let tag = format!("N={n}/hbar={h_bar}");
            let tilt = sampling_tilt(&setup, cfg, &em, h_bar)?;
            let targets: Vec<f64> = h_pairs.iter().map(|p| -(h_bar - cfg.levels.alpha) * p).collect();
            let seed = derive_seed(cfg.seed, &format!("pushdown/{tag}"));
            let sums = run_ensemble(&setup, tilt.as_ref(), !cfg.unconditioned, cfg.budgets.samples, seed, 2 * t + setup.window.len(), |phi, _| {
                let mut v = Vec::with_capacity(2 * t + phi.values.len());
                for (k, eta) in etas.iter().enumerate() {
                    let x = x_pair(phi, eta, n).expect("test function checked against the window");
                    v.push(x);
                    v.push((x >= targets[k] + cfg.pairing_margin) as u8 as f64);
                }
                v.extend_from_slice(&phi.values);
                v
            })?;
            fail_ess(&sums, cfg.budgets.min_ess, &tag)?;
            report.push(format!("{tag}/p_disconnect"), sums.probability());
            report.push_exact(format!("{tag}/ess"), sums.ess());
            report.push_exact(format!("{tag}/acceptance_rate"), sums.acceptance_rate());
            report.push(format!("{tag}/weight_mean"), sums.weight_mean());
            for k in 0..t {
                report.push(format!("{tag}/eta{k}/cond_mean"), sums.conditional(2 * k));
                report.push(format!("{tag}/eta{k}/exceedance"), sums.conditional(2 * k + 1));
                report.push(format!("{tag}/eta{k}/uncond_mean"), sums.unconditional(2 * k));
                report.push_exact(format!("{tag}/eta{k}/target"), targets[k]);
            }
            let profile: Vec<Estimate> = (0..setup.window.len()).map(|i| sums.conditional(2 * t + i)).collect();
            let means: Vec<f64> = profile.iter().map(|e| e.value).collect();
            report.push_exact(format!("{tag}/profile_correlation"), pearson(&means, &neg_h));
            if cfg.dump_fields {
                let ses: Vec<f64> = profile.iter().map(|e| e.se).collect();
                report.fields.push((
                    format!("pushdown_profile_N{n}_hbar{h_bar}"),
                    site_csv(setup.window.sites(), &[("cond_mean", &means), ("se", &ses), ("neg_h", &neg_h)]),
                ));
            }
            record_meta(&mut report, &setup, tilt.as_ref(), &tag);
        }
    }
    Ok(report)
}

/// Location points `y` with `B(y, ε) ⊆ J`, spaced at most `ε/4`.
fn location_grid(j_half: f64, eps: f64, dim: usize) -> (Vec<Vec<f64>>, f64) {
    let reach = j_half - eps;
    if reach < 0.0 {
        return (Vec::new(), eps / 4.0);
    }
    let per = ((2.0 * reach) / (eps / 4.0)).ceil().max(1.0) as usize;
    let spacing = 2.0 * reach / per as f64;
    let axis: Vec<f64> = (0..=per).map(|k| -reach + k as f64 * spacing).collect();
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                axis.iter().map(move |a| {
                    let mut q = p.clone();
                    q.push(*a);
                    q
                })
            })
            .collect();
    }
    (out, spacing)
}

/// Conditional law of the location statistic
/// `sup_y |⟨X_N - H, χ_ε(· - y)⟩| / ‖χ_ε‖_BL` against the target profile
/// `H = -(h̄ - α) h_A` for each `h̄` in the grid, and the minimizing `h̄`.
pub fn run_pinning(gt: &GreenTable, cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new("pinning");
    let moll = Mollifier::new(cfg.dim, cfg.eps)?;
    let h = HittingPotential::for_shape(gt, &cfg.shape, cfg.potential_mesh)?;
    let gaps: Vec<f64> = cfg.h_bar_grid.iter().map(|hb| hb - cfg.levels.alpha).collect();
    for &n in &cfg.n_grid {
        let setup = Setup::new(gt, cfg, n)?;
        let r = shell_radius(cfg.m, n)?;
        let j_half = cfg.j_half.unwrap_or(r as f64 / n as f64);
        let (ys, spacing) = location_grid(j_half, cfg.eps, cfg.dim);
        if ys.is_empty() {
            return Err(LabError::invalid("J is narrower than the mollifier"));
        }
        // ⟨h_A, χ_ε(· - y)⟩ at each location.
        let bumps: Vec<TestFunction> = ys.iter().map(|y| TestFunction::bump(y.clone(), cfg.eps)).collect::<Result<_>>()?;
        let smoothed: Vec<f64> = bumps.iter().map(|b| potential_pairing(gt, &h, b, 12)).collect();
        let em = setup.equilibrium()?;
        let tilt = sampling_tilt(&setup, cfg, &em, cfg.levels.h_bar_est)?;
        let tag = format!("N={n}");
        let seed = derive_seed(cfg.seed, &format!("pinning/{tag}"));
        let bl = moll.bl_norm();
        let sums = run_ensemble(&setup, tilt.as_ref(), !cfg.unconditioned, cfg.budgets.samples, seed, gaps.len(), |phi, in_d| {
            if !in_d {
                return vec![0.0; gaps.len()];
            }
            let field: Vec<f64> = bumps.iter().map(|b| x_pair(phi, b, n).expect("J inside the window")).collect();
            gaps.iter()
                .map(|g| field.iter().zip(&smoothed).map(|(m, c)| (m + g * c).abs()).fold(0.0, f64::max) / bl)
                .collect()
        })?;
        fail_ess(&sums, cfg.budgets.min_ess, &tag)?;
        report.push_exact(format!("{tag}/ess"), sums.ess());
        report.push_exact(format!("{tag}/y_spacing"), spacing);
        let mut best = (f64::INFINITY, f64::NAN);
        for (k, hb) in cfg.h_bar_grid.iter().enumerate() {
            let e = sums.conditional(k);
            report.push(format!("{tag}/hbar={hb}/statistic"), e);
            if e.value < best.0 {
                best = (e.value, *hb);
            }
        }
        report.push_exact(format!("{tag}/pinned_hbar"), best.1);
        record_meta(&mut report, &setup, tilt.as_ref(), &tag);
    }
    Ok(report)
}

/// Conditional `⟨Y_N, η ⊗ F⟩` against the curve `s ↦ ⟨Φ(-s h_A), η ⊗ F⟩`,
/// plus the unconditioned `Y_N`/`Z_N` closeness, for the first test function.
pub fn run_profile(gt: &GreenTable, cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new("profile");
    if cfg.functionals.is_empty() {
        return Err(LabError::invalid("profile runs need at least one local functional"));
    }
    let eta = &cfg.test_functions()?[0];
    let h = HittingPotential::for_shape(gt, &cfg.shape, cfg.potential_mesh)?;
    let nf = cfg.functionals.len();
    for (k, f) in cfg.functionals.iter().enumerate() {
        for s in &cfg.s_grid {
            let phi = phi_pair(gt, |x| -s * h.eval(gt, x), eta, f, 12, cfg.budgets.inner, derive_seed(cfg.seed, &format!("phi/{k}")))?;
            report.push(format!("F{k}/s={s}/phi"), phi);
        }
    }
    for &n in &cfg.n_grid {
        let setup = Setup::new(gt, cfg, n)?;
        let em = setup.equilibrium()?;
        let tilt = sampling_tilt(&setup, cfg, &em, cfg.levels.h_bar_est)?;
        let tag = format!("N={n}");
        let seed = derive_seed(cfg.seed, &format!("profile/{tag}"));
        let sums = run_ensemble(&setup, tilt.as_ref(), !cfg.unconditioned, cfg.budgets.samples, seed, nf, |phi, _| {
            cfg.functionals.iter().map(|f| y_pair(phi, eta, f, n).expect("functional support inside the window")).collect()
        })?;
        fail_ess(&sums, cfg.budgets.min_ess, &tag)?;
        report.push_exact(format!("{tag}/ess"), sums.ess());
        for k in 0..nf {
            let y = sums.conditional(k);
            report.push(format!("{tag}/F{k}/y"), y);
            let mut best = (f64::INFINITY, f64::NAN);
            for s in &cfg.s_grid {
                let phi = report.estimate(&format!("F{k}/s={s}/phi"))?;
                let gap = Estimate { value: (y.value - phi.value).abs(), se: y.se.hypot(phi.se) };
                report.push(format!("{tag}/F{k}/s={s}/gap"), gap);
                if gap.value < best.0 {
                    best = (gap.value, *s);
                }
            }
            report.push_exact(format!("{tag}/F{k}/best_s"), best.1);
        }
        // Unconditioned Y_N / Z_N closeness on fresh samples.
        let fresh = setup.sampler.sample(cfg.budgets.samples.min(50), derive_seed(cfg.seed, &format!("yz/{tag}")));
        for (k, f) in cfg.functionals.iter().enumerate() {
            let zp = ZPairing::new(setup.window.clone(), eta, f, n)?;
            let mut gap = Moments::default();
            for (i, phi) in fresh.iter().enumerate() {
                let z = zp.pair(phi, cfg.budgets.inner, derive_seed(cfg.seed, &format!("z/{tag}/{k}/{i}")))?;
                gap.push((y_pair(phi, eta, f, n)? - z.value).abs());
            }
            report.push(format!("{tag}/F{k}/yz_abs_gap"), gap.estimate());
        }
        record_meta(&mut report, &setup, tilt.as_ref(), &tag);
    }
    Ok(report)
}

/// `P[D^α_N]` by the configured estimator over the `N` grid, the rate proxy
/// `-log P / N^{d-2}` next to `(h̄_est - α)² cap(A) / (2d)`, and the
/// rejection/tilted calibration when the estimator is tilted.
pub fn run_disconnect_prob(gt: &GreenTable, cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new("disconnect-prob");
    let d = cfg.dim as i32;
    let gap = cfg.levels.h_bar_est - cfg.levels.alpha;
    for &n in &cfg.n_grid {
        let tag = format!("N={n}");
        let setup = Setup::new(gt, cfg, n)?;
        let em = setup.equilibrium()?;
        // Brownian units: d cap(A_N) / N^{d-2}.
        let cap_a = cfg.dim as f64 * em.capacity() / (n as f64).powi(d - 2);
        let p = estimate_disconnection(gt, cfg, n, cfg.estimator, gap)?;
        report.push(format!("{tag}/p_disconnect"), Estimate { value: p.value, se: p.se });
        report.push_exact(format!("{tag}/ess"), p.ess);
        report.push_exact(format!("{tag}/acceptance_rate"), p.acceptance_rate);
        report.push(format!("{tag}/rate_proxy"), Estimate { value: -p.value.ln() / (n as f64).powi(d - 2), se: p.se / p.value / (n as f64).powi(d - 2) });
        report.push_exact(format!("{tag}/rate_reference"), gap * gap * cap_a / (2.0 * cfg.dim as f64));
        if cfg.estimator == EstimatorKind::Tilted {
            let cal = calibrate_tilt(gt, cfg, n, gap)?;
            for row in cal.rows {
                report.push(format!("{tag}/calibration/{}", row.key), Estimate { value: row.value, se: row.se });
            }
        }
        record_meta(&mut report, &setup, None, &tag);
    }
    Ok(report)
}

/// Rejection against tilted estimates of three functionals of the same run
/// configuration: `P[D]`, `E[⟨X_N, η⟩; D]` and `E[φ_0; D]`, plus the tilted
/// means of `w` (which is 1) and of `w ⟨X_N, η⟩` (which is 0).
pub fn calibrate_tilt(gt: &GreenTable, cfg: &ExperimentConfig, n: u32, s: f64) -> Result<Report> {
    let mut report = Report::new("calibration");
    let setup = Setup::new(gt, cfg, n)?;
    let em = setup.equilibrium()?;
    let eta = &cfg.test_functions()?[0];
    let origin = setup.window.position(&Point::origin(cfg.dim)).expect("origin in the window");
    let obs = |phi: &FieldSample, _: bool| vec![1.0, x_pair(phi, eta, n).expect("test function in the window"), phi.values[origin]];
    let tilt = setup.tilt(&em, s)?;
    let seed = derive_seed(cfg.seed, &format!("calibration/{n}/{s}"));
    let rej = run_ensemble(&setup, None, true, cfg.budgets.samples, derive_seed(seed, "rejection"), 3, obs)?;
    let til = run_ensemble(&setup, Some(&tilt), true, cfg.budgets.samples, derive_seed(seed, "tilted"), 3, obs)?;
    let mut worst: f64 = 0.0;
    for (k, name) in ["p_disconnect", "joint_x_eta", "joint_phi0"].iter().enumerate() {
        let (a, b) = (rej.joint(k), til.joint(k));
        report.push(format!("{name}/rejection"), a);
        report.push(format!("{name}/tilted"), b);
        let z = a.z_against(&b);
        report.push_exact(format!("{name}/z"), z);
        worst = worst.max(z.abs());
    }
    let w = til.weight_mean();
    report.push("weight_mean", w);
    report.push("tilted_x_eta_mean", til.unconditional(1));
    report.push_exact("max_abs_z", worst);
    report.push_exact("rejection_hits", rej.hits as f64);
    report.push_exact("tilted_ess", til.ess());
    Ok(report)
}

/// Degenerate `Σ = A` gaps, Dirichlet gaps and capacity ratios of porous
/// shells with shrinking holes around `A = [-a, a]^3`.
pub fn run_solidification_sweep(gt: &GreenTable, cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new("solidify");
    let st = &cfg.solidify;
    let m = st.shell_half + st.shell_thickness + 1.0;
    let a_box = RealBox::cube(&[0.0; 3], st.a_half);
    let a = ShapeSpec::box_union(vec![a_box.clone()], m)?;
    let bm = BmConfig::new(st.bm_shell, cfg.budgets.bm_walkers, derive_seed(cfg.seed, "solidify/bm"));
    let probes = probe_grid(&a, 3);
    let esc = escape_gap(&a, &crate::lattice::BoxUnion::new(vec![a_box]), &probes, &bm)?;
    report.push("degenerate/escape_gap", esc.max_gap);
    let dg = dirichlet_gap(gt, &a, &a, st.mesh)?;
    report.push_exact("degenerate/dirichlet_gap", dg.gap);
    for (i, w) in st.holes.iter().enumerate() {
        let sigma = box_union_shape(&porous_shell(st.shell_half, st.shell_thickness, *w))?;
        let g = dirichlet_gap(gt, &a, &sigma, st.mesh)?;
        report.push_exact(format!("hole={w}/dirichlet_gap"), g.gap);
        report.push_exact(format!("hole={w}/identity_error"), g.identity_error());
        report.push_exact(format!("hole={w}/index"), i as f64);
    }
    // Zero-thickness plates are not valid boxes; 1e-6 keeps one lattice layer.
    let method = CapacityMethod::FineLattice { mesh: st.perforation_mesh };
    for (i, p) in st.pitches.iter().enumerate() {
        let sigma = box_union_shape(&perforated_shell(st.a_half, 1e-6, *p, st.open)?)?;
        report.push(format!("pitch={p}/capacity_ratio"), capacity_ratio(gt, &a, &sigma, method)?);
        report.push_exact(format!("pitch={p}/index"), i as f64);
    }
    Ok(report)
}

/// Corners of an L-shaped union of three boxes of side `l`.
pub fn three_box_corners(l: i32) -> Vec<Point> {
    [[0, 0, 0], [l, 0, 0], [0, l, 0]].iter().map(|c| Point::new(c).expect("corner")).collect()
}

/// Starting points at fixed multiples of `l`, so the panel scales with the boxes.
pub fn sandwich_panel(l: i32) -> Vec<Point> {
    let at = |c: [f64; 3]| Point::new(&c.map(|v| (v * l as f64).round() as i32)).expect("panel point");
    vec![at([0.5, 0.5, 0.5]), at([2.5, 0.5, 0.5]), at([0.5, 0.5, 2.0]), at([-1.5, -1.5, 0.5]), at([3.0, 3.0, 3.0])]
}

/// Random walk vs Brownian hitting sandwich over the box sides in the settings.
pub fn run_coupling_compare(gt: &GreenTable, cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new("couple");
    for &l in &cfg.solidify.sandwich_l {
        let sc = SandwichConfig {
            bm: BmConfig::new(cfg.solidify.bm_shell * l as f64, cfg.budgets.bm_walkers, derive_seed(cfg.seed, &format!("couple/{l}"))),
            srw_walkers: cfg.budgets.srw_walkers,
        };
        let t = srw_vs_bm_compare(gt, &three_box_corners(l), l, &sandwich_panel(l), &sc)?;
        for (i, r) in t.rows.iter().enumerate() {
            report.push(format!("L={l}/x{i}/srw"), r.srw);
            report.push(format!("L={l}/x{i}/bm_inner"), r.bm_inner);
            report.push(format!("L={l}/x{i}/bm_outer"), r.bm_outer);
        }
        report.push_exact(format!("L={l}/lower_margin"), t.lower_margin);
        report.push_exact(format!("L={l}/upper_margin"), t.upper_margin);
        report.push_exact(format!("L={l}/worst_margin"), t.worst_margin());
        report.push_exact(format!("L={l}/max_violation"), t.max_violation());
    }
    Ok(report)
}

/// Green function, capacity oracles and the equilibrium measure of `A_N`.
pub fn run_potential(gt: &GreenTable, cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new("potential");
    let d = cfg.dim;
    let g0 = gt.g0();
    report.push_exact("g0", g0);
    for r in [1, 2, 4, 8, 16, 32, 64] {
        let x = Point::new(&(0..d).map(|i| if i == 0 { r } else { 0 }).collect::<Vec<_>>())?;
        report.push_exact(format!("g/e0*{r}"), gt.g(&x));
        report.push_exact(format!("g_ratio/e0*{r}"), gt.g(&x) * (r as f64).powi(d as i32 - 2) / gt.c_d());
    }
    let origin = SiteSet::from_points(vec![Point::origin(d)])?;
    report.push_exact("cap/origin", equilibrium_measure(gt, &origin)?.capacity());
    let pair = SiteSet::from_points(vec![Point::origin(d), Point::unit(d, 0, 1)])?;
    report.push_exact("cap/pair", equilibrium_measure(gt, &pair)?.capacity());
    for l in [2, 4, 8] {
        let b = SiteSet::from_box(&IntBox::ball(Point::origin(d), l));
        report.push_exact(format!("cap/ball{l}_over_L"), equilibrium_measure(gt, &b)?.capacity() / (l as f64).powi(d as i32 - 2));
    }
    let a_n = blow_up(&cfg.shape, cfg.n)?;
    let em = equilibrium_measure(gt, &a_n)?;
    report.push_exact(format!("N={}/cap_A_N", cfg.n), em.capacity());
    if cfg.dump_fields {
        let mut buf = Vec::new();
        em.write_csv(&mut buf)?;
        report.fields.push((format!("equilibrium_N{}", cfg.n), String::from_utf8(buf).expect("ASCII CSV")));
    }
    Ok(report)
}

/// The experiments reachable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Pushdown,
    Pinning,
    Profile,
    DisconnectProb,
    Solidify,
    Couple,
    Potential,
}

impl Experiment {
    pub fn run(self, gt: &GreenTable, cfg: &ExperimentConfig) -> Result<Report> {
        match self {
            Experiment::Pushdown => run_pushdown(gt, cfg),
            Experiment::Pinning => run_pinning(gt, cfg),
            Experiment::Profile => run_profile(gt, cfg),
            Experiment::DisconnectProb => run_disconnect_prob(gt, cfg),
            Experiment::Solidify => run_solidification_sweep(gt, cfg),
            Experiment::Couple => run_coupling_compare(gt, cfg),
            Experiment::Potential => run_potential(gt, cfg),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub experiments: Vec<String>,
    pub meta: BTreeMap<String, String>,
}

pub const RESULTS_HEADER: &str = "experiment,key,value,se";

/// Writes `results.csv`, `manifest.json` and `fields/*.csv` under `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, reports: &[Report]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = fs::File::create(dir.join("results.csv"))?;
    writeln!(csv, "{RESULTS_HEADER}")?;
    for r in reports.iter().flat_map(|r| &r.rows) {
        writeln!(csv, "{},{},{:e},{:e}", r.experiment, r.key, r.value, r.se)?;
    }
    let mut meta = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.meta {
            meta.insert(format!("{}/{k}", r.experiment), v.clone());
        }
        if !r.fields.is_empty() {
            fs::create_dir_all(dir.join("fields"))?;
            for (name, text) in &r.fields {
                fs::write(dir.join("fields").join(format!("{name}.csv")), text)?;
            }
        }
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        experiments: reports.iter().map(|r| r.experiment.clone()).collect(),
        meta,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Parses a `results.csv` written by [`write_outputs`].
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(LabError::invalid("results file lacks the expected header"));
    }
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(LabError::invalid(format!("malformed results row: {line}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| LabError::invalid(format!("bad number {s}")));
            Ok(ResultRow { experiment: cols[0].into(), key: cols[1].into(), value: num(cols[2])?, se: num(cols[3])? })
        })
        .collect()
}
