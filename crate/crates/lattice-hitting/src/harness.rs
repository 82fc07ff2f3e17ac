//! Scenario configuration, task orchestration, consistency checks and report artifacts.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::asymptotics::RegimeSpec;
use crate::base::{BaseSystem, ErgodicityReport, HeavyTailSpec, SiteConfig, StructureOptions, StructureReport, DEFAULT_MAX_ESCAPE};
use crate::error::{Error, Result};
use crate::exactpotential::{
    absorbing_oracle, potential_gram_iid, potential_gram_markov, reconstruct_transition_matrix, resolvent_series_extrapolated,
    Extrapolation, GramTable, QuadratureGrid, RhoSchedule, Site, SERIES_SQRT_SCHEDULE,
};
use crate::lmatrix::{fmt17, PotentialMatrix, StochasticMatrix, ZeroSumBasis};
use crate::montecarlo::{estimate_decay_curve, DecayCurve, Estimate, SimConfig};

const NORM: &str = "max-entry";
const SERIES_TAIL_TOL: f64 = 1e-12;
/// Site spread, in standard deviations of one step, up to which the default series schedule is used as is.
const SERIES_SPREAD: f64 = 8.0;
/// Smallest schedule shrink factor attempted (the series length grows like its inverse square).
const SERIES_MIN_SHRINK: f64 = 0.5;
const DEFAULT_ORACLE_RADIUS: i64 = 64;
/// Relative discrepancies this close are treated as equal when checking for a decrease.
const MONOTONE_SLACK: f64 = 1e-12;

/// Work items of a scenario, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Exact,
    Oracle,
    Simulate,
    Predict,
    Mainthm,
    Structure,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Exact => "exact",
            Task::Oracle => "oracle",
            Task::Simulate => "simulate",
            Task::Predict => "predict",
            Task::Mainthm => "mainthm",
            Task::Structure => "structure",
        }
    }
}

/// The walk: exactly one of `jump` (one vector per state), `steps` (i.i.d. step law) or `heavy_tail`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub d: usize,
    #[serde(default)]
    pub states: Vec<String>,
    #[serde(default)]
    pub trans: Vec<Vec<f64>>,
    #[serde(default)]
    pub jump: Option<Vec<Vec<i64>>>,
    #[serde(default)]
    pub steps: Option<Vec<(Vec<i64>, f64)>>,
    #[serde(default)]
    pub heavy_tail: Option<HeavyTailSpec>,
}

impl BaseConfig {
    pub fn build(&self) -> Result<BaseSystem> {
        let given = [self.jump.is_some(), self.steps.is_some(), self.heavy_tail.is_some()];
        if given.iter().filter(|g| **g).count() != 1 {
            return Err(Error::Config("base: give exactly one of jump, steps, heavy_tail".into()));
        }
        if let Some(steps) = &self.steps {
            if !self.states.is_empty() || !self.trans.is_empty() {
                return Err(Error::Config("base: states and trans are implied by steps".into()));
            }
            return BaseSystem::iid(self.d, steps);
        }
        if let Some(spec) = &self.heavy_tail {
            if self.d != 1 {
                return Err(Error::Config("base.heavy_tail: only supported for d = 1".into()));
            }
            let (states, trans) = if self.states.is_empty() && self.trans.is_empty() {
                (vec!["x".to_string()], vec![vec![1.0]])
            } else {
                (self.states.clone(), self.trans.clone())
            };
            return BaseSystem::heavy_tailed(states, trans, spec.clone());
        }
        let jump = self.jump.clone().unwrap_or_default();
        BaseSystem::new(self.d, self.states.clone(), self.trans.clone(), jump)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Points per axis (default 4096 for d = 1, 1024 for d = 2).
    #[serde(default)]
    pub points_per_dim: Option<usize>,
    #[serde(default)]
    pub richardson: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    #[serde(default)]
    pub radius: Option<i64>,
    #[serde(default = "default_max_escape")]
    pub max_escape: f64,
}

fn default_max_escape() -> f64 {
    DEFAULT_MAX_ESCAPE
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self { radius: None, max_escape: DEFAULT_MAX_ESCAPE }
    }
}

/// JSON configuration shared by every subcommand. Unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub base: BaseConfig,
    pub sites: SiteConfig,
    #[serde(default)]
    pub tasks: Vec<Task>,
    /// Zero-sum basis vectors (rows); the pivot basis `1_k − 1_0` when absent.
    #[serde(default)]
    pub basis: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub grid: GridConfig,
    /// Increasing `ρ` values for the twisted-operator route; automatic when absent.
    #[serde(default)]
    pub rho_schedule: Option<Vec<f64>>,
    #[serde(default)]
    pub oracle_radius: Option<i64>,
    #[serde(default)]
    pub simulation: Option<SimConfig>,
    #[serde(default)]
    pub predict: Option<RegimeSpec>,
    #[serde(default)]
    pub structure: StructureConfig,
    /// Output directory for artifacts.
    #[serde(default)]
    pub output: Option<String>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// A validated configuration, ready to run.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub base: BaseSystem,
    pub sites: SiteConfig,
    /// Site lists at each `t`, in the order of `sites.t_values`.
    pub site_lists: Vec<Vec<Site>>,
    pub tasks: Vec<Task>,
    pub basis: ZeroSumBasis,
    pub grid: QuadratureGrid,
    pub rho_schedule: RhoSchedule,
    pub oracle_radius: i64,
    pub simulation: SimConfig,
    pub predict: Option<RegimeSpec>,
    pub structure: StructureConfig,
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl Scenario {
    pub fn from_config(cfg: &ScenarioConfig) -> Result<Self> {
        if cfg.tasks.is_empty() {
            return Err(Error::Config("tasks: must list at least one of exact, oracle, simulate, predict, mainthm, structure".into()));
        }
        let mut tasks = cfg.tasks.clone();
        tasks.sort();
        tasks.dedup();
        let base = cfg.base.build().map_err(as_config)?;
        cfg.sites.validate()?;
        if cfg.sites.d() != base.d() {
            return Err(Error::Config(format!("sites: dimension {} does not match base dimension {}", cfg.sites.d(), base.d())));
        }
        let site_lists = cfg.sites.t_values.iter().map(|&t| cfg.sites.sites_at(t)).collect::<Result<Vec<_>>>()?;
        let n = cfg.sites.len();
        let basis = match &cfg.basis {
            None => ZeroSumBasis::pivot(n),
            Some(rows) => {
                let b = ZeroSumBasis::from_rows(rows).map_err(as_config)?;
                if b.n() != n {
                    return Err(Error::Config(format!("basis: vectors have length {} but there are {n} sites", b.n())));
                }
                b
            }
        };
        let default_grid = QuadratureGrid::default_for(base.d());
        let points = cfg.grid.points_per_dim.unwrap_or(default_grid.points_per_dim);
        let extrapolation = if cfg.grid.richardson { Extrapolation::Richardson } else { Extrapolation::None };
        let grid = QuadratureGrid::new(base.d(), points, true, extrapolation).map_err(as_config)?;
        let rho_schedule = match &cfg.rho_schedule {
            None => RhoSchedule::Auto,
            Some(r) => RhoSchedule::explicit(r.clone()).map_err(as_config)?,
        };
        let oracle_radius = cfg.oracle_radius.unwrap_or(DEFAULT_ORACLE_RADIUS);
        if oracle_radius < 1 {
            return Err(Error::Config("oracle_radius: must be positive".into()));
        }
        if tasks.contains(&Task::Oracle) && base.d() != 1 {
            return Err(Error::Config("tasks: the oracle needs a walk on Z (d = 1)".into()));
        }
        let simulation = cfg.simulation.clone().unwrap_or_default();
        simulation.validate()?;
        if let Some(p) = &cfg.predict {
            p.validate().map_err(as_config)?;
            if p.dimension() != base.d() {
                return Err(Error::Config(format!(
                    "predict: regime is {}-dimensional but the walk is {}-dimensional",
                    p.dimension(),
                    base.d()
                )));
            }
        } else if tasks.contains(&Task::Predict) {
            return Err(Error::Config("predict: regime parameters are required for the predict task".into()));
        }
        if let Some(r) = cfg.structure.radius {
            if r < 1 {
                return Err(Error::Config("structure.radius: must be positive".into()));
            }
        }
        if !(cfg.structure.max_escape > 0.0 && cfg.structure.max_escape <= 1.0) {
            return Err(Error::Config("structure.max_escape: must lie in (0, 1]".into()));
        }
        Ok(Self {
            base,
            sites: cfg.sites.clone(),
            site_lists,
            tasks,
            basis,
            grid,
            rho_schedule,
            oracle_radius,
            simulation,
            predict: cfg.predict.clone(),
            structure: cfg.structure.clone(),
        })
    }

    pub fn has(&self, task: Task) -> bool {
        self.tasks.contains(&task)
    }
}

/// `‖Q − (Id−P)₀⁻¹‖ / ‖Q‖` in the max-entry norm on the basis of `Q`.
///
/// `(Id−P)₀` is `Id − P` restricted to zero-sum vectors and projected along constants.
pub fn consistency_main_theorem(p: &StochasticMatrix, q: &PotentialMatrix) -> Result<f64> {
    let inv = restricted_inverse(p, q.basis())?;
    let qx = q.operator();
    let scale = qx.amax();
    if !(scale > 0.0) {
        return Err(Error::Invalid("potential matrix is zero".into()));
    }
    Ok((qx - inv).amax() / scale)
}

/// Operator matrix of `(Id−P)₀⁻¹` on `basis`.
fn restricted_inverse(p: &StochasticMatrix, basis: &ZeroSumBasis) -> Result<DMatrix<f64>> {
    let n = p.n();
    if basis.n() != n {
        return Err(Error::Invalid(format!("P is {n}x{n} but the basis lives in dimension {}", basis.n())));
    }
    if n < 2 {
        return Err(Error::Invalid("need at least two sites".into()));
    }
    let l = DMatrix::identity(n, n) - p.matrix().to_dmatrix();
    let x = basis.pseudo_inverse() * l * basis.matrix();
    let sv = x.clone().singular_values();
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &s| (l.min(s), h.max(s)));
    if !(hi > 0.0) || lo <= 1e-13 * hi {
        return Err(Error::Singular("(Id − P)₀".into()));
    }
    x.try_inverse().ok_or_else(|| Error::Singular("(Id − P)₀".into()))
}

/// Largest absolute entry difference between two matrices of the same shape.
fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Number of steps along a sequence that go up by more than rounding noise.
fn increases(values: impl Iterator<Item = f64>) -> usize {
    let v: Vec<f64> = values.collect();
    v.windows(2).filter(|w| w[1] > w[0] + MONOTONE_SLACK).count()
}

fn max_abs(a: &[Vec<f64>]) -> f64 {
    a.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
}

/// Site-geometry spread of one Monte Carlo estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeometrySpread {
    pub t: f64,
    /// Largest `|a − b| / (3·√(se_a² + se_b²) + 0.2·max(a, b))` over pairs of off-diagonal entries.
    pub worst_ratio: f64,
    pub pass: bool,
}

/// Decay of the off-diagonal mass against `1/ln t` in dimension 2.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct D2Shape {
    pub spread: Vec<GeometrySpread>,
    /// `(t, 1/ln t, mean off-diagonal entry, its standard error)`.
    pub points: Vec<(f64, f64, f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `π √det(Cov) / |I|`.
    pub predicted_slope: f64,
    pub slope_rel_error: f64,
}

/// Geometry independence and the `1/ln t` fit for a planar decay curve.
pub fn d2_shape(curve: &DecayCurve, cov: [[f64; 2]; 2]) -> Result<D2Shape> {
    if curve.estimates.len() < 3 {
        return Err(Error::Invalid("the 1/ln t fit needs at least three scales".into()));
    }
    if curve.estimates.iter().any(|(t, _)| *t <= 1.0) {
        return Err(Error::Invalid("the 1/ln t fit needs scales above 1".into()));
    }
    let n = curve.estimates[0].1.n();
    if n < 2 {
        return Err(Error::Invalid("need at least two sites".into()));
    }
    let mut spread = Vec::new();
    for (t, e) in &curve.estimates {
        let mut off = Vec::new();
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    off.push((e.phat.get(p, q), e.se[p][q]));
                }
            }
        }
        let mut worst: f64 = 0.0;
        for a in 0..off.len() {
            for b in a + 1..off.len() {
                let (x, sx) = off[a];
                let (y, sy) = off[b];
                let allowed = 3.0 * (sx * sx + sy * sy).sqrt() + 0.2 * x.abs().max(y.abs());
                let gap = (x - y).abs();
                let ratio = if allowed > 0.0 {
                    gap / allowed
                } else if gap > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                worst = worst.max(ratio);
            }
        }
        spread.push(GeometrySpread { t: *t, worst_ratio: worst, pass: worst <= 1.0 });
    }
    let points: Vec<(f64, f64, f64, f64)> = curve.mean_off_diagonal().into_iter().map(|(t, m, se)| (t, 1.0 / t.ln(), m, se)).collect();
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.1).sum::<f64>() / k;
    let my = points.iter().map(|p| p.2).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.1 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.1 - mx) * (p.2 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.2 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 0.0 };
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    if !(det > 0.0) {
        return Err(Error::Invalid("covariance is not positive definite".into()));
    }
    let predicted_slope = std::f64::consts::PI * det.sqrt() / n as f64;
    Ok(D2Shape {
        spread,
        points,
        slope,
        intercept,
        r_squared,
        predicted_slope,
        slope_rel_error: (slope - predicted_slope).abs() / predicted_slope,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaseSummary {
    pub d: usize,
    pub n_states: usize,
    pub iid: bool,
    pub stationary: Vec<f64>,
    pub ergodicity: ErgodicityReport,
    pub variance: Option<f64>,
    pub covariance: Option<[[f64; 2]; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExactResult {
    pub gram: GramTable,
    pub p: Option<Vec<Vec<f64>>>,
    /// Gram entries from the extrapolated resolvent series (Markov bases on `Z`).
    pub series_gram: Option<Vec<Vec<f64>>>,
    pub series_note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleSummary {
    pub p: Vec<Vec<f64>>,
    pub radius: i64,
    pub change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionSummary {
    pub p: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MainTheoremResult {
    /// Where `P` came from.
    pub p_source: String,
    /// Where `Q` came from.
    pub q_source: String,
    pub value: f64,
}

/// Everything computed at one scale `t`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleResult {
    pub t: f64,
    pub sites: Vec<Site>,
    pub exact: Option<ExactResult>,
    pub oracle: Option<OracleSummary>,
    pub simulation: Option<Estimate>,
    pub prediction: Option<PredictionSummary>,
    pub mainthm: Option<MainTheoremResult>,
}

/// A distance between two computed quantities.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Discrepancy {
    pub t: Option<f64>,
    pub left: String,
    pub right: String,
    pub norm: String,
    pub relative: bool,
    pub value: f64,
}

/// Pass/fail of one acceptance criterion on this scenario.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub criterion: u32,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskError {
    pub task: Task,
    pub t: Option<f64>,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StructureSummary {
    pub report: StructureReport,
    pub doubled: StructureReport,
    pub stable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub tasks: Vec<Task>,
    pub labels: Vec<String>,
    pub base: BaseSummary,
    pub scales: Vec<ScaleResult>,
    pub structure: Option<StructureSummary>,
    pub d2_shape: Option<D2Shape>,
    pub discrepancies: Vec<Discrepancy>,
    pub checks: Vec<Check>,
    pub errors: Vec<TaskError>,
    /// False when some task failed.
    pub complete: bool,
    /// Wall-clock time; kept out of `report.json` so identical runs give identical bytes.
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// 0 when everything passed, 2 on a failed criterion, 3 or 4 when a task failed.
    pub fn exit_code(&self) -> i32 {
        if let Some(code) = self.errors.iter().map(|e| e.exit_code).max() {
            return code;
        }
        if self.all_pass() {
            0
        } else {
            2
        }
    }

    fn check(&mut self, criterion: u32, name: String, value: f64, threshold: f64) {
        let pass = value <= threshold;
        self.checks.push(Check { criterion, name, value, threshold, pass });
    }

    fn discrepancy(&mut self, t: Option<f64>, left: &str, right: &str, relative: bool, value: f64) {
        self.discrepancies.push(Discrepancy { t, left: left.into(), right: right.into(), norm: NORM.into(), relative, value });
    }

    fn fail(&mut self, task: Task, t: Option<f64>, e: &Error) {
        self.errors.push(TaskError { task, t, message: e.to_string(), exit_code: e.exit_code() });
    }
}

fn summarize_base(base: &BaseSystem) -> BaseSummary {
    BaseSummary {
        d: base.d(),
        n_states: base.n_states(),
        iid: base.is_iid(),
        stationary: base.stationary().to_vec(),
        ergodicity: base.check_extension_ergodic(),
        variance: if base.d() == 1 { base.green_kubo_variance().ok() } else { None },
        covariance: if base.d() == 2 { base.green_kubo_covariance().ok() } else { None },
    }
}

fn basis_gram(s: &Scenario, sites: &[Site]) -> Result<GramTable> {
    if s.base.is_iid() {
        potential_gram_iid(&s.base, sites, &s.basis, &s.grid)
    } else {
        potential_gram_markov(&s.base, sites, &s.basis, &s.grid, &s.rho_schedule)
    }
}

/// `√(1−ρ)` schedule for the series cross-check, shrunk so that `√(1−ρ)·spread/σ` stays in the range
/// where the default schedule extrapolates well; `None` when the series would be too long to compute.
fn series_schedule(base: &BaseSystem, sites: &[Site]) -> Option<Vec<f64>> {
    let sd = base.green_kubo_variance().ok()?.sqrt();
    let lo = sites.iter().map(|x| x[0]).min()?;
    let hi = sites.iter().map(|x| x[0]).max()?;
    let spread = (hi - lo) as f64 / sd;
    let shrink = (SERIES_SPREAD / spread).min(1.0);
    (shrink >= SERIES_MIN_SHRINK).then(|| SERIES_SQRT_SCHEDULE.iter().map(|x| x * shrink).collect())
}

fn run_exact(s: &Scenario, sites: &[Site]) -> Result<ExactResult> {
    let gram = basis_gram(s, sites)?;
    let p = reconstruct_transition_matrix(&gram)?.matrix().rows();
    let mut series_gram = None;
    let mut series_note = None;
    if !s.base.is_iid() && s.base.d() == 1 && s.base.lattice_jumps().is_ok() {
        match series_schedule(&s.base, sites) {
            Some(schedule) => {
                let vs = s.basis.vectors();
                let mut g = vec![vec![0.0; vs.len()]; vs.len()];
                for (i, f) in vs.iter().enumerate() {
                    for (j, h) in vs.iter().enumerate() {
                        g[i][j] = resolvent_series_extrapolated(&s.base, sites, f, h, &schedule, SERIES_TAIL_TOL)?.limit;
                    }
                }
                series_gram = Some(g);
            }
            None => series_note = Some("resolvent-series cross-check skipped: sites too far apart for an affordable series length".into()),
        }
    }
    Ok(ExactResult { gram, p: Some(p), series_gram, series_note })
}

fn stochastic(rows: &[Vec<f64>]) -> Result<StochasticMatrix> {
    StochasticMatrix::new(crate::lmatrix::SquareMatrix::from_rows(rows)?, false, 1e-6)
}

/// Executes the tasks of `s` in dependency order. Task failures are recorded in the report.
pub fn run_scenario(s: &Scenario) -> Result<VerificationReport> {
    let start = Instant::now();
    let mut rep = VerificationReport {
        tasks: s.tasks.clone(),
        labels: s.sites.labels.clone(),
        base: summarize_base(&s.base),
        scales: s
            .sites
            .t_values
            .iter()
            .zip(&s.site_lists)
            .map(|(&t, sites)| ScaleResult {
                t,
                sites: sites.clone(),
                exact: None,
                oracle: None,
                simulation: None,
                prediction: None,
                mainthm: None,
            })
            .collect(),
        structure: None,
        d2_shape: None,
        discrepancies: Vec::new(),
        checks: Vec::new(),
        errors: Vec::new(),
        complete: true,
        runtime_seconds: 0.0,
    };
    let iid = s.base.is_iid();
    for &task in &s.tasks {
        match task {
            Task::Exact => {
                for k in 0..rep.scales.len() {
                    let t = rep.scales[k].t;
                    match run_exact(s, &s.site_lists[k]) {
                        Ok(ex) => {
                            if let Some(series) = &ex.series_gram {
                                let gap = max_diff(&ex.gram.entries, series);
                                rep.discrepancy(Some(t), "twisted-operator Gram", "resolvent-series Gram", false, gap);
                                rep.check(10, format!("twisted-operator vs resolvent-series Gram at t={t}"), gap, 1e-4);
                            }
                            rep.scales[k].exact = Some(ex);
                        }
                        Err(e) => rep.fail(task, Some(t), &e),
                    }
                }
            }
            Task::Oracle => {
                for k in 0..rep.scales.len() {
                    let t = rep.scales[k].t;
                    match absorbing_oracle(&s.base, &s.site_lists[k], s.oracle_radius) {
                        Ok(o) => {
                            let p = o.p.matrix().rows();
                            if let Some(ep) = rep.scales[k].exact.as_ref().and_then(|e| e.p.clone()) {
                                let gap = max_diff(&ep, &p);
                                rep.discrepancy(Some(t), "exact P (quadrature)", "oracle P", false, gap);
                                if iid {
                                    rep.check(3, format!("quadrature P vs oracle P at t={t}"), gap, 1e-4);
                                }
                            }
                            rep.scales[k].oracle = Some(OracleSummary { p, radius: o.radius, change: o.change });
                        }
                        Err(e) => rep.fail(task, Some(t), &e),
                    }
                }
            }
            Task::Simulate => match estimate_decay_curve(&s.base, &s.sites, &s.simulation) {
                Ok(curve) => {
                    for (k, (_, est)) in curve.estimates.iter().enumerate() {
                        let t = rep.scales[k].t;
                        let reference = rep.scales[k].oracle.as_ref().map(|o| ("oracle P", o.p.clone())).or_else(|| {
                            rep.scales[k].exact.as_ref().filter(|_| iid).and_then(|e| e.p.clone()).map(|p| ("exact P (quadrature)", p))
                        });
                        if let Some((name, p)) = reference {
                            let n = est.n();
                            let mut worst: f64 = 0.0;
                            for i in 0..n {
                                for j in 0..n {
                                    let gap = (est.phat.get(i, j) - p[i][j]).abs();
                                    let se = est.se[i][j];
                                    let z = if se > 0.0 {
                                        gap / se
                                    } else if gap > 1e-12 {
                                        f64::INFINITY
                                    } else {
                                        0.0
                                    };
                                    worst = worst.max(z);
                                }
                            }
                            let gap = max_diff(&est.phat.matrix().rows(), &p);
                            rep.discrepancy(Some(t), "Monte Carlo P", name, false, gap);
                            rep.check(3, format!("Monte Carlo P within 3 SE of {name} at t={t} (largest |z|)"), worst, 3.0);
                        }
                        rep.scales[k].simulation = Some(est.clone());
                    }
                    if s.base.d() == 2 && curve.estimates.len() >= 3 && s.sites.len() >= 2 {
                        match s.base.green_kubo_covariance().and_then(|cov| d2_shape(&curve, cov)) {
                            Ok(shape) => {
                                for sp in &shape.spread {
                                    rep.check(
                                        7,
                                        format!("off-diagonal entries agree across site pairs at t={}", sp.t),
                                        sp.worst_ratio,
                                        1.0,
                                    );
                                }
                                rep.check(7, "1 − R² of off-diagonal mass against 1/ln t".into(), 1.0 - shape.r_squared, 0.1);
                                rep.check(7, "relative error of fitted slope against π√det(Cov)/|I|".into(), shape.slope_rel_error, 0.35);
                                rep.d2_shape = Some(shape);
                            }
                            Err(e) => rep.fail(task, None, &e),
                        }
                    }
                }
                Err(e) => rep.fail(task, None, &e),
            },
            Task::Predict => {
                let regime = s.predict.as_ref().expect("validated");
                let mut rel = Vec::new();
                for k in 0..rep.scales.len() {
                    let t = rep.scales[k].t;
                    match regime.predict(&s.sites.sigma, t) {
                        Ok(pred) => {
                            let p = pred.p.matrix().rows();
                            let r = pred.r.matrix().rows();
                            let sc = &rep.scales[k];
                            let reference = sc
                                .oracle
                                .as_ref()
                                .map(|o| ("oracle P", o.p.clone()))
                                .or_else(|| {
                                    sc.exact.as_ref().filter(|_| iid).and_then(|e| e.p.clone()).map(|p| ("exact P (quadrature)", p))
                                })
                                .or_else(|| sc.simulation.as_ref().map(|e| ("Monte Carlo P", e.phat.matrix().rows())));
                            if let Some((name, pref)) = reference {
                                let n = p.len();
                                let mut gap: f64 = 0.0;
                                for i in 0..n {
                                    for j in 0..n {
                                        let id = if i == j { 1.0 } else { 0.0 };
                                        gap = gap.max((id - pref[i][j] - pred.scale * r[i][j]).abs());
                                    }
                                }
                                let value = gap / (pred.scale * max_abs(&r));
                                rep.discrepancy(Some(t), &format!("Id − {name}"), "predicted scale·R", true, value);
                                rel.push((t, value));
                            }
                            rep.scales[k].prediction = Some(PredictionSummary { p, r, scale: pred.scale });
                        }
                        Err(e) => rep.fail(task, Some(t), &e),
                    }
                }
                if matches!(regime, RegimeSpec::D1L2 { .. }) && rel.len() == s.site_lists.len() && !rel.is_empty() {
                    let increases = increases(rel.iter().map(|r| r.1));
                    rep.check(5, "relative gap to the L² prediction decreases along t (number of increases)".into(), increases as f64, 0.0);
                    let (t, last) = rel[rel.len() - 1];
                    rep.check(5, format!("relative gap to the L² prediction at t={t}"), last, 0.1);
                }
            }
            Task::Mainthm => {
                let mut values = Vec::new();
                for k in 0..rep.scales.len() {
                    let t = rep.scales[k].t;
                    match main_theorem_at(s, &mut rep.scales[k], k) {
                        Ok(m) => {
                            rep.discrepancy(
                                Some(t),
                                &format!("Q ({})", m.q_source),
                                &format!("(Id − P)₀⁻¹, P from {}", m.p_source),
                                true,
                                m.value,
                            );
                            if iid {
                                let tol = if s.grid.extrapolation == Extrapolation::Richardson { 1e-5 } else { 1e-3 };
                                rep.check(4, format!("main-theorem identity for an i.i.d. walk at t={t}"), m.value, tol);
                            }
                            values.push(m.value);
                            rep.scales[k].mainthm = Some(m);
                        }
                        Err(e) => rep.fail(task, Some(t), &e),
                    }
                }
                if !iid && values.len() >= 2 && values.len() == rep.scales.len() {
                    let increases = increases(values.iter().copied());
                    rep.check(10, "main-theorem consistency decreases along t (number of increases)".into(), increases as f64, 0.0);
                }
            }
            Task::Structure => match run_structure(s) {
                Ok(st) => {
                    rep.check(8, "structure stable under radius doubling".into(), if st.stable { 0.0 } else { 1.0 }, 0.0);
                    rep.structure = Some(st);
                }
                Err(e) => rep.fail(task, None, &e),
            },
        }
    }
    rep.complete = rep.errors.is_empty();
    rep.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(rep)
}

fn main_theorem_at(s: &Scenario, sc: &mut ScaleResult, k: usize) -> Result<MainTheoremResult> {
    let sites = &s.site_lists[k];
    let iid = s.base.is_iid();
    let q_gram = match sc.exact.as_ref().filter(|e| e.gram.diagnostics.route == "markov") {
        Some(e) => e.gram.clone(),
        None => potential_gram_markov(&s.base, sites, &s.basis, &s.grid, &s.rho_schedule)?,
    };
    let q = q_gram.potential()?;
    let (p_source, p) = if iid {
        let rows = match sc.exact.as_ref().filter(|e| e.gram.diagnostics.route == "iid").and_then(|e| e.p.clone()) {
            Some(p) => p,
            None => reconstruct_transition_matrix(&potential_gram_iid(&s.base, sites, &s.basis, &s.grid)?)?.matrix().rows(),
        };
        ("characteristic-function quadrature", rows)
    } else if let Some(o) = &sc.oracle {
        ("absorbing oracle", o.p.clone())
    } else if s.base.d() == 1 {
        let o = absorbing_oracle(&s.base, sites, s.oracle_radius)?;
        let p = o.p.matrix().rows();
        sc.oracle = Some(OracleSummary { p: p.clone(), radius: o.radius, change: o.change });
        ("absorbing oracle", p)
    } else {
        return Err(Error::Invalid("no independent route to P for a Markov walk on Z² (the oracle needs d = 1)".into()));
    };
    let value = consistency_main_theorem(&stochastic(&p)?, &q)?;
    Ok(MainTheoremResult { p_source: p_source.into(), q_source: "twisted-operator quadrature".into(), value })
}

fn run_structure(s: &Scenario) -> Result<StructureSummary> {
    let radius = match s.structure.radius {
        Some(r) => r,
        None => s.base.default_structure_radius()?,
    };
    let opts = StructureOptions { radius, max_escape: s.structure.max_escape };
    let report = s.base.detect_period_and_colors_with(&opts)?;
    let doubled = s.base.detect_period_and_colors_with(&StructureOptions { radius: 2 * radius, ..opts })?;
    let stable = report.same_structure(&doubled);
    Ok(StructureSummary { report, doubled, stable })
}

fn matrix_rows(out: &mut String, t: f64, source: &str, name: &str, m: &[Vec<f64>]) {
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{},{source},{name},{i},{j},{}", fmt17(t), fmt17(*v));
        }
    }
}

/// Long-format CSV of every matrix in the report: `t,source,matrix,row,col,value`.
pub fn matrices_csv(rep: &VerificationReport) -> String {
    let mut out = String::from("t,source,matrix,row,col,value\n");
    for sc in &rep.scales {
        if let Some(e) = &sc.exact {
            if let Some(p) = &e.p {
                matrix_rows(&mut out, sc.t, "exact", "P", p);
            }
            matrix_rows(&mut out, sc.t, "exact", "gram", &e.gram.entries);
            if let Some(g) = &e.series_gram {
                matrix_rows(&mut out, sc.t, "series", "gram", g);
            }
        }
        if let Some(o) = &sc.oracle {
            matrix_rows(&mut out, sc.t, "oracle", "P", &o.p);
        }
        if let Some(est) = &sc.simulation {
            matrix_rows(&mut out, sc.t, "mc", "P", &est.phat.matrix().rows());
            matrix_rows(&mut out, sc.t, "mc", "se", &est.se);
        }
        if let Some(p) = &sc.prediction {
            matrix_rows(&mut out, sc.t, "pred", "P", &p.p);
            matrix_rows(&mut out, sc.t, "pred", "R", &p.r);
        }
    }
    out
}

/// Off-diagonal entries against `t`: `t,pair,value,source,se`.
///
/// The `exact` rows come from the quadrature route when it ran and from the oracle otherwise.
pub fn decay_csv(rep: &VerificationReport) -> String {
    let mut out = String::from("t,pair,value,source,se\n");
    let labels = &rep.labels;
    let n = labels.len();
    let mut emit = |t: f64, source: &str, p: &[Vec<f64>], se: Option<&[Vec<f64>]>| {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let se = se.map(|s| fmt17(s[i][j])).unwrap_or_default();
                    let _ = writeln!(out, "{},{}->{},{},{source},{se}", fmt17(t), labels[i], labels[j], fmt17(p[i][j]));
                }
            }
        }
    };
    for sc in &rep.scales {
        let exact = sc.exact.as_ref().and_then(|e| e.p.as_ref()).or(sc.oracle.as_ref().map(|o| &o.p));
        if let Some(p) = exact {
            emit(sc.t, "exact", p, None);
        }
        if let Some(est) = &sc.simulation {
            emit(sc.t, "mc", &est.phat.matrix().rows(), Some(&est.se));
        }
        if let Some(p) = &sc.prediction {
            emit(sc.t, "pred", &p.p, None);
        }
    }
    out
}

/// Writes `report.json`, `matrices.csv` and `decay.csv` into `dir`.
pub fn write_artifacts(rep: &VerificationReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(rep)?;
    json.push('\n');
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("matrices.csv"), matrices_csv(rep))?;
    std::fs::write(dir.join("decay.csv"), decay_csv(rep))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmatrix::{potential_from_l, sample_irreducible_bil, SquareMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(text: &str) -> ScenarioConfig {
        ScenarioConfig::from_json(text).unwrap()
    }

    const THREE_SITES: &str = r#"{
        "base": {"d": 2, "steps": [[[1,0],0.25],[[-1,0],0.25],[[0,1],0.25],[[0,-1],0.25]]},
        "sites": {"labels": ["A","B","C"], "sigma": [[0,0],[-1,0],[1,1]], "t_values": [1]},
        "tasks": ["exact"]
    }"#;

    #[test]
    fn synthetic_pair_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..6 {
            let r = sample_irreducible_bil(n, &mut rng);
            let eps = 0.5 / r.matrix().max_abs();
            let n2 = r.n();
            let p: Vec<f64> = (0..n2 * n2).map(|k| (if k / n2 == k % n2 { 1.0 } else { 0.0 }) - eps * r.matrix().entries()[k]).collect();
            let p = StochasticMatrix::new(SquareMatrix::new(n2, p).unwrap(), true, 1e-9).unwrap();
            let s = potential_from_l(&r).unwrap();
            let q = PotentialMatrix::from_operator(s.basis().clone(), &(s.operator() / eps)).unwrap();
            assert!(consistency_main_theorem(&p, &q).unwrap() < 1e-12);
        }
    }

    #[test]
    fn singular_restriction_is_reported() {
        let p = StochasticMatrix::new(SquareMatrix::identity(3), true, 1e-9).unwrap();
        let s = potential_from_l(
            &crate::lmatrix::BiLMatrix::from_rows(&[vec![2.0, -1.0, -1.0], vec![-1.0, 2.0, -1.0], vec![-1.0, -1.0, 2.0]]).unwrap(),
        )
        .unwrap();
        assert!(matches!(consistency_main_theorem(&p, &s), Err(Error::Singular(_))));
    }

    #[test]
    fn empty_tasks_rejected() {
        let mut cfg = config(THREE_SITES);
        cfg.tasks.clear();
        assert!(matches!(Scenario::from_config(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = THREE_SITES.replace("\"tasks\"", "\"taks\": [], \"tasks\"");
        assert!(matches!(ScenarioConfig::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn predict_needs_regime() {
        let mut cfg = config(THREE_SITES);
        cfg.tasks = vec![Task::Predict];
        assert!(matches!(Scenario::from_config(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn exact_on_three_site_example() {
        let s = Scenario::from_config(&config(THREE_SITES)).unwrap();
        let rep = run_scenario(&s).unwrap();
        assert!(rep.complete);
        let p = rep.scales[0].exact.as_ref().unwrap().p.clone().unwrap();
        let pi = std::f64::consts::PI;
        let p_ac = pi / (-pi * pi + 8.0 * pi - 4.0);
        assert!((p[0][2] - p_ac).abs() < 1e-3, "{}", p[0][2]);
        assert_eq!(rep.exit_code(), 0);
    }

    #[test]
    fn structure_on_bichromatic_example() {
        let b = crate::base::bichromatic_example();
        let trans: Vec<Vec<f64>> = b.trans().to_vec();
        let jump = b.lattice_jumps().unwrap().to_vec();
        let cfg = ScenarioConfig {
            base: BaseConfig { d: 1, states: b.states().to_vec(), trans, jump: Some(jump), steps: None, heavy_tail: None },
            sites: SiteConfig::fixed(&[vec![0], vec![1]]).unwrap(),
            tasks: vec![Task::Structure],
            basis: None,
            grid: GridConfig::default(),
            rho_schedule: None,
            oracle_radius: None,
            simulation: None,
            predict: None,
            structure: StructureConfig::default(),
            output: None,
        };
        let rep = run_scenario(&Scenario::from_config(&cfg).unwrap()).unwrap();
        let st = rep.structure.unwrap();
        assert_eq!(st.report.period, 5);
        assert_eq!(st.report.coloring, crate::base::Coloring::Bichromatic { ell_minus: 3, ell_plus: 1 });
        assert!(st.stable);
    }

    #[test]
    fn base_variants_are_exclusive() {
        let mut cfg = config(THREE_SITES);
        cfg.base.jump = Some(vec![vec![1, 0]]);
        assert!(matches!(Scenario::from_config(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn csv_uses_full_precision() {
        let s = Scenario::from_config(&config(THREE_SITES)).unwrap();
        let rep = run_scenario(&s).unwrap();
        let csv = matrices_csv(&rep);
        let line = csv.lines().find(|l| l.contains(",exact,P,0,2,")).unwrap();
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(v, rep.scales[0].exact.as_ref().unwrap().p.as_ref().unwrap()[0][2]);
        assert_eq!(decay_csv(&rep).lines().count(), 1 + 6);
    }

    #[test]
    fn markov_consistency_decreases_along_t() {
        let text = r#"{
            "base": {"d": 1, "states": ["u", "v"], "trans": [[0.7, 0.3], [0.3, 0.7]], "jump": [[1], [-1]]},
            "sites": {"labels": ["a", "b"], "sigma": [[0], [1]], "t_values": [25, 50, 100]},
            "tasks": ["mainthm"]
        }"#;
        let rep = run_scenario(&Scenario::from_config(&config(text)).unwrap()).unwrap();
        assert!(rep.complete, "{:?}", rep.errors);
        let v: Vec<f64> = rep.scales.iter().map(|s| s.mainthm.as_ref().unwrap().value).collect();
        assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
        assert!(rep.checks.iter().any(|c| c.criterion == 10 && c.pass));
    }
}
