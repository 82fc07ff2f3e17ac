//! Seeded simulation of first returns to a site set and empirical transition matrices.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex as FftComplex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::base::{BaseSystem, JumpLaw, SiteConfig};
use crate::error::{Error, Result};
use crate::exactpotential::Site;
use crate::lmatrix::{SquareMatrix, StochasticMatrix};

/// Trajectories simulated from one random stream.
const CHUNK: u64 = 1024;
/// Probability mass dropped from each end of a skip-ahead table.
const TABLE_TAIL: f64 = 1e-17;
/// Largest number of outcomes per start state in a skip-ahead table.
const TABLE_MAX_WIDTH: usize = 1 << 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    /// Trajectories per start site.
    pub n_traj: u64,
    /// Steps after which a trajectory is censored.
    pub max_steps: u64,
    /// Worker threads (0 = all available). Results do not depend on it.
    pub parallel_batches: usize,
    /// Censored fraction (per start site) above which estimation fails.
    pub censor_error: f64,
    /// Censored fraction above which a warning is recorded.
    pub censor_warn: f64,
    /// Exact multi-step jumps far from the sites (d = 1, finite-support jumps).
    pub skip_ahead: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_traj: 10_000,
            max_steps: 100_000_000,
            parallel_batches: 0,
            censor_error: 1e-3,
            censor_warn: 1e-4,
            skip_ahead: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 {
            return Err(Error::Config("simulation.n_traj: must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("simulation.max_steps: must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.censor_error) || !(0.0..=1.0).contains(&self.censor_warn) {
            return Err(Error::Config("simulation: censoring thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Empirical first-return matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub sites: Vec<Site>,
    /// Arrival counts per start site; each row plus its censored count equals `n_traj`.
    pub counts: Vec<Vec<u64>>,
    /// Row frequencies over completed trajectories.
    pub phat: StochasticMatrix,
    /// Binomial standard errors of `phat`.
    pub se: Vec<Vec<f64>>,
    pub censored: Vec<u64>,
    pub n_traj: u64,
    /// Total simulated steps.
    pub steps: u64,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct EstimateView<'a> {
    sites: &'a [Site],
    counts: &'a [Vec<u64>],
    phat: Vec<Vec<f64>>,
    se: &'a [Vec<f64>],
    censored: &'a [u64],
    n_traj: u64,
    steps: u64,
    warnings: &'a [String],
}

impl Serialize for Estimate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EstimateView {
            sites: &self.sites,
            counts: &self.counts,
            phat: self.phat.matrix().rows(),
            se: &self.se,
            censored: &self.censored,
            n_traj: self.n_traj,
            steps: self.steps,
            warnings: &self.warnings,
        }
        .serialize(s)
    }
}

impl Estimate {
    pub fn n(&self) -> usize {
        self.sites.len()
    }

    /// Largest censored fraction over start sites.
    pub fn censored_fraction(&self) -> f64 {
        self.censored.iter().map(|&c| c as f64 / self.n_traj as f64).fold(0.0, f64::max)
    }
}

/// Cumulative probabilities for inverse-CDF sampling on a small finite set.
fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = p
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

fn draw(cum: &[f64], u: f64) -> usize {
    cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1)
}

/// One step: the jump of `state` and the next state.
pub fn sample_step<R: Rng + ?Sized>(base: &BaseSystem, state: usize, rng: &mut R) -> (usize, Vec<i64>) {
    let jump = match base.jump_law() {
        JumpLaw::Lattice(j) => j[state].clone(),
        JumpLaw::HeavyTail(law) => vec![law.quantile(rng.gen::<f64>())],
    };
    let next = draw(&cumulative(&base.trans()[state]), rng.gen::<f64>());
    (next, jump)
}

/// Joint law of (state, displacement) after `2^k` steps from each start state, for `k = 1, 2, …`.
struct SkipTables {
    levels: Vec<SkipLevel>,
}

struct SkipLevel {
    steps: u64,
    /// Largest possible displacement in absolute value (`2^k · max|jump|`).
    reach: i64,
    lo: i64,
    width: usize,
    /// Per start state, cumulative probabilities over `(displacement − lo) · ns + state`.
    cum: Vec<Vec<f64>>,
}

impl SkipTables {
    fn build(base: &BaseSystem, max_steps: u64) -> Result<Self> {
        let jumps: Vec<i64> = base.lattice_jumps()?.iter().map(|j| j[0]).collect();
        let ns = base.n_states();
        let jmax = jumps.iter().map(|j| j.abs()).max().unwrap_or(0).max(1);
        // dist[s][s1]: probabilities over displacement lo..lo+width for `steps` steps.
        let lo0 = *jumps.iter().min().expect("nonempty");
        let hi0 = *jumps.iter().max().expect("nonempty");
        let width0 = (hi0 - lo0 + 1) as usize;
        let mut dist: Vec<Vec<Vec<f64>>> = (0..ns)
            .map(|s| {
                (0..ns)
                    .map(|s1| {
                        let mut v = vec![0.0; width0];
                        v[(jumps[s] - lo0) as usize] = base.trans()[s][s1];
                        v
                    })
                    .collect()
            })
            .collect();
        let mut lo = lo0;
        let mut steps = 1u64;
        let mut levels = Vec::new();
        let mut planner = FftPlanner::<f64>::new();
        while steps.checked_mul(2).is_some_and(|s| s <= max_steps) && levels.len() < 40 {
            let (next, next_lo) = square_law(&dist, lo, &mut planner);
            steps *= 2;
            let (trimmed, trimmed_lo) = trim(next, next_lo);
            dist = trimmed;
            lo = trimmed_lo;
            let width = dist[0][0].len();
            if width * ns > TABLE_MAX_WIDTH {
                break;
            }
            let cum = (0..ns)
                .map(|s| {
                    let mut flat = Vec::with_capacity(width * ns);
                    let mut acc = 0.0;
                    for x in 0..width {
                        for s1 in 0..ns {
                            acc += dist[s][s1][x];
                            flat.push(acc);
                        }
                    }
                    flat
                })
                .collect();
            levels.push(SkipLevel { steps, reach: jmax.saturating_mul(steps as i64), lo, width, cum });
        }
        Ok(Self { levels })
    }
}

/// Two-fold composition of a (state, displacement) kernel.
fn square_law(dist: &[Vec<Vec<f64>>], lo: i64, planner: &mut FftPlanner<f64>) -> (Vec<Vec<Vec<f64>>>, i64) {
    let ns = dist.len();
    let width = dist[0][0].len();
    let out_width = 2 * width - 1;
    let mut out = vec![vec![vec![0.0; out_width]; ns]; ns];
    if width <= 64 {
        for s in 0..ns {
            for s1 in 0..ns {
                for s2 in 0..ns {
                    let (a, b) = (&dist[s][s1], &dist[s1][s2]);
                    let o = &mut out[s][s2];
                    for (i, &x) in a.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        for (j, &y) in b.iter().enumerate() {
                            o[i + j] += x * y;
                        }
                    }
                }
            }
        }
    } else {
        let size = out_width.next_power_of_two();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let spectra: Vec<Vec<Vec<FftComplex<f64>>>> = dist
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| {
                        let mut buf: Vec<FftComplex<f64>> = v.iter().map(|&x| FftComplex::new(x, 0.0)).collect();
                        buf.resize(size, FftComplex::new(0.0, 0.0));
                        fwd.process(&mut buf);
                        buf
                    })
                    .collect()
            })
            .collect();
        for s in 0..ns {
            for s2 in 0..ns {
                let mut acc = vec![FftComplex::new(0.0, 0.0); size];
                for s1 in 0..ns {
                    for (k, a) in acc.iter_mut().enumerate() {
                        *a += spectra[s][s1][k] * spectra[s1][s2][k];
                    }
                }
                inv.process(&mut acc);
                for (x, a) in out[s][s2].iter_mut().zip(acc.iter()) {
                    *x = (a.re / size as f64).max(0.0);
                }
            }
        }
    }
    (out, 2 * lo)
}

/// Drops displacements carrying less than [`TABLE_TAIL`] mass at either end (for every start state).
fn trim(dist: Vec<Vec<Vec<f64>>>, lo: i64) -> (Vec<Vec<Vec<f64>>>, i64) {
    let ns = dist.len();
    let width = dist[0][0].len();
    let mut first = width;
    let mut last = 0;
    for row in &dist {
        let mass: Vec<f64> = (0..width).map(|x| row.iter().map(|v| v[x]).sum()).collect();
        let mut acc = 0.0;
        let mut a = 0;
        while a < width && acc + mass[a] < TABLE_TAIL {
            acc += mass[a];
            a += 1;
        }
        let mut acc = 0.0;
        let mut b = width - 1;
        while b > 0 && acc + mass[b] < TABLE_TAIL {
            acc += mass[b];
            b -= 1;
        }
        first = first.min(a);
        last = last.max(b);
    }
    if first > last {
        return (dist, lo);
    }
    let out = (0..ns).map(|s| (0..ns).map(|s1| dist[s][s1][first..=last].to_vec()).collect()).collect();
    (out, lo + first as i64)
}

/// Everything a worker needs to simulate trajectories.
struct Simulator<'a> {
    base: &'a BaseSystem,
    d: usize,
    sites: &'a [Site],
    /// Sorted positions (d = 1) for distance queries.
    sorted: Vec<i64>,
    pi_cum: Vec<f64>,
    trans_cum: Vec<Vec<f64>>,
    jumps: Option<Vec<Vec<i64>>>,
    skip: Option<Arc<SkipTables>>,
    max_steps: u64,
}

struct ChunkResult {
    counts: Vec<u64>,
    censored: u64,
    steps: u64,
}

impl Simulator<'_> {
    fn site_index(&self, pos: &[i64]) -> Option<usize> {
        self.sites.iter().position(|s| s.as_slice() == pos)
    }

    fn distance_to_sites(&self, x: i64) -> i64 {
        let k = self.sorted.partition_point(|&s| s < x);
        let mut best = i64::MAX;
        if k < self.sorted.len() {
            best = best.min(self.sorted[k] - x);
        }
        if k > 0 {
            best = best.min(x - self.sorted[k - 1]);
        }
        best
    }

    fn run_chunk(&self, start: usize, n: u64, rng: &mut ChaCha8Rng) -> ChunkResult {
        let m = self.sites.len();
        let mut res = ChunkResult { counts: vec![0; m], censored: 0, steps: 0 };
        let mut pos = vec![0i64; self.d];
        for _ in 0..n {
            pos.copy_from_slice(&self.sites[start]);
            let mut state = draw(&self.pi_cum, rng.gen::<f64>());
            let mut steps = 0u64;
            let arrival = loop {
                if steps >= self.max_steps {
                    break None;
                }
                if let Some(skip) = &self.skip {
                    let dist = self.distance_to_sites(pos[0]);
                    let room = self.max_steps - steps;
                    let level = skip.levels.iter().rev().find(|l| l.reach < dist && l.steps <= room);
                    if let Some(l) = level {
                        let cum = &l.cum[state];
                        let u = rng.gen::<f64>() * cum[cum.len() - 1];
                        let idx = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
                        let ns = self.trans_cum.len();
                        pos[0] += l.lo + (idx / ns) as i64;
                        state = idx % ns;
                        steps += l.steps;
                        debug_assert!(idx / ns < l.width);
                        continue;
                    }
                }
                match &self.jumps {
                    Some(j) => {
                        for (p, v) in pos.iter_mut().zip(&j[state]) {
                            *p += v;
                        }
                    }
                    None => {
                        if let JumpLaw::HeavyTail(law) = self.base.jump_law() {
                            pos[0] += law.quantile(rng.gen::<f64>());
                        }
                    }
                }
                state = draw(&self.trans_cum[state], rng.gen::<f64>());
                steps += 1;
                if let Some(q) = self.site_index(&pos) {
                    break Some(q);
                }
            };
            res.steps += steps;
            match arrival {
                Some(q) => res.counts[q] += 1,
                None => res.censored += 1,
            }
        }
        res
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("simulation.parallel_batches: {e}")))?;
    Ok(pool.install(f))
}

/// First-return matrix on `sites` by simulation: from each site, with the internal state drawn from the
/// stationary law, run until the walk is on a site again (after at least one step).
pub fn estimate_transition_matrix(base: &BaseSystem, sites: &[Site], cfg: &SimConfig) -> Result<Estimate> {
    estimate_with_stream(base, sites, cfg, 0, None)
}

fn estimate_with_stream(
    base: &BaseSystem,
    sites: &[Site],
    cfg: &SimConfig,
    stream_prefix: u64,
    skip: Option<Arc<SkipTables>>,
) -> Result<Estimate> {
    cfg.validate()?;
    let d = base.d();
    if sites.is_empty() {
        return Err(Error::Invalid("site list is empty".into()));
    }
    if let Some(s) = sites.iter().find(|s| s.len() != d) {
        return Err(Error::Invalid(format!("site {s:?} does not have {d} coordinates")));
    }
    for i in 0..sites.len() {
        if sites[i + 1..].contains(&sites[i]) {
            return Err(Error::Invalid(format!("duplicate site {:?}", sites[i])));
        }
    }
    let jumps = base.lattice_jumps().ok().map(|j| j.to_vec());
    let skip = match skip {
        Some(s) => Some(s),
        None if cfg.skip_ahead && d == 1 && jumps.is_some() => Some(Arc::new(SkipTables::build(base, cfg.max_steps)?)),
        None => None,
    };
    let mut sorted: Vec<i64> = if d == 1 { sites.iter().map(|s| s[0]).collect() } else { Vec::new() };
    sorted.sort_unstable();
    let sim = Simulator {
        base,
        d,
        sites,
        sorted,
        pi_cum: cumulative(base.stationary()),
        trans_cum: base.trans().iter().map(|r| cumulative(r)).collect(),
        jumps,
        skip,
        max_steps: cfg.max_steps,
    };
    let m = sites.len();
    let chunks_per_site = cfg.n_traj.div_ceil(CHUNK);
    let jobs: Vec<(usize, u64)> = (0..m).flat_map(|p| (0..chunks_per_site).map(move |c| (p, c))).collect();
    let results: Vec<ChunkResult> = with_pool(cfg.parallel_batches, || {
        jobs.par_iter()
            .map(|&(p, c)| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((stream_prefix << 52) | ((p as u64) << 36) | c);
                let n = CHUNK.min(cfg.n_traj - c * CHUNK);
                sim.run_chunk(p, n, &mut rng)
            })
            .collect()
    })?;
    let mut counts = vec![vec![0u64; m]; m];
    let mut censored = vec![0u64; m];
    let mut steps = 0u64;
    for ((p, _), r) in jobs.iter().zip(&results) {
        for q in 0..m {
            counts[*p][q] += r.counts[q];
        }
        censored[*p] += r.censored;
        steps = steps.saturating_add(r.steps);
    }
    let mut warnings = Vec::new();
    for p in 0..m {
        let frac = censored[p] as f64 / cfg.n_traj as f64;
        let completed = cfg.n_traj - censored[p];
        if frac > cfg.censor_error || completed == 0 {
            return Err(Error::Censoring { censored: censored[p], total: cfg.n_traj });
        }
        if frac > cfg.censor_warn {
            warnings.push(format!("site {:?}: {} of {} trajectories censored ({frac:.2e})", sites[p], censored[p], cfg.n_traj));
        }
    }
    let mut phat = vec![0.0; m * m];
    let mut se = vec![vec![0.0; m]; m];
    for p in 0..m {
        let completed = (cfg.n_traj - censored[p]) as f64;
        for q in 0..m {
            let f = counts[p][q] as f64 / completed;
            phat[p * m + q] = f;
            se[p][q] = (f * (1.0 - f) / completed).sqrt();
        }
    }
    let phat = StochasticMatrix::new(SquareMatrix::new(m, phat)?, false, 1e-9)?;
    Ok(Estimate { sites: sites.to_vec(), counts, phat, se, censored, n_traj: cfg.n_traj, steps, warnings })
}

/// One row of a decay table: the estimated `P_t(i → j)` for `i ≠ j`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayRow {
    pub t: f64,
    pub from: String,
    pub to: String,
    pub mass: f64,
    pub se: f64,
    pub censored: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayCurve {
    pub rows: Vec<DecayRow>,
    pub estimates: Vec<(f64, Estimate)>,
}

impl DecayCurve {
    /// Mean off-diagonal entry at each scale, with its standard error.
    pub fn mean_off_diagonal(&self) -> Vec<(f64, f64, f64)> {
        self.estimates
            .iter()
            .map(|(t, e)| {
                let m = e.n();
                let k = (m * (m - 1)).max(1) as f64;
                let mut mean = 0.0;
                let mut var = 0.0;
                for p in 0..m {
                    for q in 0..m {
                        if p != q {
                            mean += e.phat.get(p, q) / k;
                            var += e.se[p][q].powi(2) / (k * k);
                        }
                    }
                }
                (*t, mean, var.sqrt())
            })
            .collect()
    }
}

/// One estimate per scale `t`, each from its own random streams.
pub fn estimate_decay_curve(base: &BaseSystem, sites: &SiteConfig, cfg: &SimConfig) -> Result<DecayCurve> {
    sites.validate()?;
    if sites.d() != base.d() {
        return Err(Error::Config("sites and walk have different dimensions".into()));
    }
    let skip = if cfg.skip_ahead && base.d() == 1 && base.lattice_jumps().is_ok() {
        Some(Arc::new(SkipTables::build(base, cfg.max_steps)?))
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut estimates = Vec::new();
    for (k, &t) in sites.t_values.iter().enumerate() {
        let sigma_t = sites.sites_at(t)?;
        let est = estimate_with_stream(base, &sigma_t, cfg, k as u64 + 1, skip.clone())?;
        for p in 0..sites.len() {
            for q in 0..sites.len() {
                if p != q {
                    rows.push(DecayRow {
                        t,
                        from: sites.labels[p].clone(),
                        to: sites.labels[q].clone(),
                        mass: est.phat.get(p, q),
                        se: est.se[p][q],
                        censored: est.censored[p],
                    });
                }
            }
        }
        estimates.push((t, est));
    }
    Ok(DecayCurve { rows, estimates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{HeavyTailKind, HeavyTailSpec};

    fn cfg(n_traj: u64, seed: u64) -> SimConfig {
        SimConfig { seed, n_traj, max_steps: 100_000_000, ..Default::default() }
    }

    #[test]
    fn deterministic_step() {
        let b = BaseSystem::new(1, vec!["x".into()], vec![vec![1.0]], vec![vec![0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_step(&b, 0, &mut rng), (0, vec![0]));
        let b = BaseSystem::new(1, vec!["u".into(), "v".into()], vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![vec![1], vec![-1]]).unwrap();
        for _ in 0..10 {
            assert_eq!(sample_step(&b, 0, &mut rng), (1, vec![1]));
        }
    }

    #[test]
    fn simple_walk_step_mean() {
        let b = BaseSystem::simple_walk(1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut state = 0;
        let mut total = 0i64;
        for _ in 0..n {
            let (s, j) = sample_step(&b, state, &mut rng);
            total += j[0];
            state = s;
        }
        assert!((total as f64 / n as f64).abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn heavy_tail_sampler_slope() {
        let spec =
            HeavyTailSpec { alpha: 1.5, c_plus: 1.0, c_minus: 0.0, core: (-12..=2).map(|k| (k, 1.0)).collect(), kind: HeavyTailKind::Levy };
        let b = BaseSystem::heavy_tailed(vec!["x".into()], vec![vec![1.0]], spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<i64> = (0..1_000_000).map(|_| sample_step(&b, 0, &mut rng).1[0]).collect();
        let xs = [20.0f64, 40.0, 80.0, 160.0, 320.0, 640.0];
        let pts: Vec<(f64, f64)> = xs
            .iter()
            .map(|&x| {
                let c = samples.iter().filter(|&&k| k as f64 >= x).count() as f64 / samples.len() as f64;
                (x.ln(), c.ln())
            })
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 1.5).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn gambler_estimate() {
        let b = BaseSystem::simple_walk(1);
        let e = estimate_transition_matrix(&b, &[vec![0], vec![10]], &cfg(100_000, 11)).unwrap();
        for (p, q) in [(0, 1), (1, 0)] {
            assert!((e.phat.get(p, q) - 0.05).abs() < 3.0 * e.se[p][q], "{}", e.phat.get(p, q));
        }
        for p in 0..2 {
            assert_eq!(e.counts[p].iter().sum::<u64>() + e.censored[p], 100_000);
        }
    }

    #[test]
    fn single_site_estimate() {
        let b = BaseSystem::simple_walk(1);
        let e = estimate_transition_matrix(&b, &[vec![5]], &cfg(1000, 1)).unwrap();
        assert_eq!(e.phat.get(0, 0), 1.0);
        assert_eq!(e.censored, vec![0]);
    }

    #[test]
    fn skip_ahead_matches_plain_stepping() {
        let b = BaseSystem::new(1, vec!["+".into(), "-".into()], vec![vec![0.7, 0.3], vec![0.3, 0.7]], vec![vec![1], vec![-1]]).unwrap();
        let sites = vec![vec![0], vec![12]];
        let mut c = cfg(40_000, 5);
        let fast = estimate_transition_matrix(&b, &sites, &c).unwrap();
        c.skip_ahead = false;
        c.max_steps = 10_000_000;
        c.censor_error = 1e-2;
        let plain = estimate_transition_matrix(&b, &sites, &c).unwrap();
        // Oracle value for this chain: 0.0875.
        for est in [&fast, &plain] {
            let se = est.se[0][1];
            assert!((est.phat.get(0, 1) - 0.0875).abs() < 3.5 * se, "{} ± {se}", est.phat.get(0, 1));
        }
    }

    #[test]
    fn skip_tables_are_normalized() {
        let b = BaseSystem::iid(1, &[(vec![-2], 0.25), (vec![-1], 0.25), (vec![1], 0.25), (vec![2], 0.25)]).unwrap();
        let t = SkipTables::build(&b, 1 << 20).unwrap();
        assert!(t.levels.len() >= 15);
        for l in &t.levels {
            for c in &l.cum {
                assert!((c[c.len() - 1] - 1.0).abs() < 1e-12);
            }
            assert!(l.lo >= -l.reach && l.lo + l.width as i64 - 1 <= l.reach);
        }
        // Two steps: displacement 0 has probability 4/16 (each jump followed by its negative).
        let l = &t.levels[0];
        let idx = (0 - l.lo) as usize * 4;
        let p0: f64 = (0..4).map(|s| l.cum[0][idx + s] - if idx + s == 0 { 0.0 } else { l.cum[0][idx + s - 1] }).sum();
        assert!((p0 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let b = BaseSystem::simple_walk(2);
        let sites = vec![vec![0, 0], vec![-1, 0], vec![1, 1]];
        let mut c = SimConfig { seed: 9, n_traj: 3000, max_steps: 20_000, censor_error: 1.0, censor_warn: 1.0, ..Default::default() };
        c.parallel_batches = 1;
        let a = estimate_transition_matrix(&b, &sites, &c).unwrap();
        c.parallel_batches = 3;
        let e = estimate_transition_matrix(&b, &sites, &c).unwrap();
        assert_eq!(a.counts, e.counts);
        assert_eq!(a.censored, e.censored);
    }

    #[test]
    fn censoring_error_and_monotonicity() {
        let b = BaseSystem::simple_walk(1);
        let sites = vec![vec![0], vec![50]];
        let c = SimConfig { seed: 2, n_traj: 2000, max_steps: 100, skip_ahead: false, ..Default::default() };
        assert!(matches!(estimate_transition_matrix(&b, &sites, &c), Err(Error::Censoring { .. })));
        let loose = SimConfig { censor_error: 1.0, censor_warn: 1.0, ..c.clone() };
        let short = estimate_transition_matrix(&b, &sites, &loose).unwrap();
        let long = estimate_transition_matrix(&b, &sites, &SimConfig { max_steps: 200, ..loose }).unwrap();
        for p in 0..2 {
            assert!(long.censored[p] <= short.censored[p]);
        }
    }

    #[test]
    fn decay_curve_scales_like_one_over_two_t() {
        let b = BaseSystem::simple_walk(1);
        let sites = SiteConfig::new(vec!["a".into(), "b".into()], vec![vec![0.0], vec![1.0]], vec![4.0, 16.0], 1.0).unwrap();
        let curve = estimate_decay_curve(&b, &sites, &cfg(50_000, 4)).unwrap();
        assert_eq!(curve.rows.len(), 4);
        for r in &curve.rows {
            assert!((r.mass * r.t - 0.5).abs() < 3.0 * r.se * r.t, "{r:?}");
        }
        let one = SiteConfig { t_values: vec![8.0], ..sites };
        assert_eq!(estimate_decay_curve(&b, &one, &cfg(1000, 4)).unwrap().estimates.len(), 1);
    }
}
