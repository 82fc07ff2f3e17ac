//! Potential Gram entries and transition matrices: torus quadrature (i.i.d. and twisted
//! operator routes), damped resolvent series, and an absorbing-chain oracle in dimension one.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base::BaseSystem;
use crate::error::{Error, Result};
use crate::lmatrix::{potential_from_l, BiLMatrix, PotentialMatrix, SquareMatrix, StochasticMatrix, ZeroSumBasis};
use crate::numeric::{neville_at_zero, BandMatrix, CompensatedSum};

/// A lattice site.
pub type Site = Vec<i64>;

/// Tolerance on row and column sums of reconstructed transition matrices.
pub const RECONSTRUCTION_TOL: f64 = 1e-6;
const IMAG_RESIDUE_TOL: f64 = 1e-8;
const ORACLE_AGREEMENT: f64 = 1e-10;
const ORACLE_MAX_DOUBLINGS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extrapolation {
    None,
    Richardson,
}

/// Tensor midpoint grid on `[-π, π)^d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub d: usize,
    pub points_per_dim: usize,
    pub offset: bool,
    pub extrapolation: Extrapolation,
}

impl QuadratureGrid {
    pub fn new(d: usize, points_per_dim: usize, offset: bool, extrapolation: Extrapolation) -> Result<Self> {
        if !(d == 1 || d == 2) {
            return Err(Error::Invalid(format!("grid dimension must be 1 or 2, got {d}")));
        }
        if points_per_dim < 16 || !points_per_dim.is_power_of_two() {
            return Err(Error::Invalid(format!("grid size must be a power of two ≥ 16, got {points_per_dim}")));
        }
        if extrapolation == Extrapolation::Richardson && points_per_dim < 32 {
            return Err(Error::Invalid("Richardson extrapolation needs a grid of at least 32 points".into()));
        }
        Ok(Self { d, points_per_dim, offset, extrapolation })
    }

    /// 4096 points in dimension 1, 1024 per axis in dimension 2, offset, no extrapolation.
    pub fn default_for(d: usize) -> Self {
        let n = if d == 1 { 4096 } else { 1024 };
        Self { d, points_per_dim: n, offset: true, extrapolation: Extrapolation::None }
    }

    pub fn with_richardson(mut self) -> Self {
        self.extrapolation = Extrapolation::Richardson;
        self
    }

    /// Coordinate of node `k` along one axis.
    pub fn node(&self, k: usize) -> f64 {
        let h = 2.0 * std::f64::consts::PI / self.points_per_dim as f64;
        let shift = if self.offset { 0.5 } else { 0.0 };
        -std::f64::consts::PI + (k as f64 + shift) * h
    }

    fn halved(&self) -> Self {
        Self { points_per_dim: self.points_per_dim / 2, ..*self }
    }

    fn check_for(&self, base: &BaseSystem) -> Result<()> {
        if self.d != base.d() {
            return Err(Error::Invalid(format!("grid dimension {} does not match walk dimension {}", self.d, base.d())));
        }
        if !self.offset {
            return Err(Error::Invalid("potential quadrature needs the offset grid (w = 0 is a grid node otherwise)".into()));
        }
        Ok(())
    }
}

/// Entries `G_ij = ⟨e_i, (Id − P_Σ)₀⁻¹ e_j⟩` in a zero-sum basis, with diagnostics of the route that produced them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GramTable {
    pub basis: ZeroSumBasis,
    pub entries: Vec<Vec<f64>>,
    pub diagnostics: GramDiagnostics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GramDiagnostics {
    pub route: String,
    pub grid: Option<usize>,
    pub richardson: bool,
    /// Largest imaginary part discarded from the quadrature sums.
    pub imag_residue: f64,
    /// Largest change between the `N/2` and `N` grids (Richardson only).
    pub grid_change: Option<f64>,
    /// `1 − ρ` values used by the twisted-operator route.
    pub one_minus_rho: Vec<f64>,
    /// Largest gap between the last schedule point and the extrapolated value.
    pub rho_stability: Option<f64>,
}

impl GramTable {
    pub fn new(basis: ZeroSumBasis, entries: Vec<Vec<f64>>, diagnostics: GramDiagnostics) -> Result<Self> {
        let m = basis.dim();
        if entries.len() != m || entries.iter().any(|r| r.len() != m) {
            return Err(Error::Invalid(format!("Gram table must be {m}x{m}")));
        }
        if entries.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite Gram entry".into()));
        }
        Ok(Self { basis, entries, diagnostics })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let m = self.dim();
        DMatrix::from_fn(m, m, |i, j| self.entries[i][j])
    }

    pub fn potential(&self) -> Result<PotentialMatrix> {
        PotentialMatrix::from_gram(self.basis.clone(), &self.matrix())
    }

    pub fn max_abs_diff(&self, other: &GramTable) -> f64 {
        self.entries.iter().flatten().zip(other.entries.iter().flatten()).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// `Ψ(ξ) = E e^{i⟨ξ, X⟩}` for an i.i.d. walk.
pub fn characteristic_function(base: &BaseSystem, xi: &[f64]) -> Result<Complex64> {
    let law = base.step_law()?;
    if xi.len() != base.d() {
        return Err(Error::Invalid(format!("ξ must have {} coordinates", base.d())));
    }
    Ok(law
        .iter()
        .map(|(k, p)| {
            let th: f64 = k.iter().zip(xi).map(|(a, b)| *a as f64 * b).sum();
            Complex64::from_polar(*p, th)
        })
        .sum())
}

/// `1 − e^{iθ}` without cancellation for small `θ`.
fn one_minus_phase(theta: f64) -> Complex64 {
    let h = (0.5 * theta).sin();
    Complex64::new(2.0 * h * h, -theta.sin())
}

fn check_sites(base: &BaseSystem, sites: &[Site], basis: &ZeroSumBasis) -> Result<()> {
    if sites.is_empty() {
        return Err(Error::Invalid("site list is empty".into()));
    }
    if let Some(s) = sites.iter().find(|s| s.len() != base.d()) {
        return Err(Error::Invalid(format!("site {s:?} does not have {} coordinates", base.d())));
    }
    for i in 0..sites.len() {
        if sites[i + 1..].contains(&sites[i]) {
            return Err(Error::Invalid(format!("duplicate site {:?}", sites[i])));
        }
    }
    if basis.n() != sites.len() {
        return Err(Error::Invalid(format!("basis has dimension {} but there are {} sites", basis.n(), sites.len())));
    }
    Ok(())
}

fn check_ergodic(base: &BaseSystem) -> Result<()> {
    let r = base.check_extension_ergodic();
    if !r.ergodic {
        return Err(Error::Invalid(format!("extension is not ergodic: displacements generate {}", r.description)));
    }
    Ok(())
}

/// `F(e_j)(ξ) = Σ_q e_j(q) (e^{−i⟨ξ,σ_q⟩} − 1)` for every basis vector (zero-sum, so the `−1` is free).
fn basis_transforms(sites: &[Site], basis: &ZeroSumBasis, xi: &[f64], site_buf: &mut [Complex64], out: &mut [Complex64]) {
    for (q, s) in sites.iter().enumerate() {
        let th: f64 = s.iter().zip(xi).map(|(a, b)| *a as f64 * b).sum();
        site_buf[q] = -one_minus_phase(-th);
    }
    for (j, v) in basis.vectors().iter().enumerate() {
        out[j] = v.iter().zip(site_buf.iter()).map(|(c, z)| z * *c).sum();
    }
}

/// Sums `weights(ξ) · conj(F e_i)(ξ) F e_j(ξ)` over the grid for every `(i, j)` and every weight channel,
/// divided by the number of nodes. Returns one `m × m` complex table per channel.
fn grid_sum<W>(grid: &QuadratureGrid, sites: &[Site], basis: &ZeroSumBasis, channels: usize, weight: W) -> Result<Vec<Vec<Complex64>>>
where
    W: Fn(&[f64], &mut [Complex64]) -> Result<()> + Sync,
{
    let n = grid.points_per_dim;
    let m = basis.dim();
    let d = grid.d;
    let rows = if d == 1 { n / 16 } else { n };
    let per_row = if d == 1 { 16 } else { n };
    let partials: Vec<Result<Vec<CompensatedSum>>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut acc = vec![CompensatedSum::new(); 2 * channels * m * m];
            let mut site_buf = vec![Complex64::new(0.0, 0.0); sites.len()];
            let mut ft = vec![Complex64::new(0.0, 0.0); m];
            let mut w = vec![Complex64::new(0.0, 0.0); channels];
            let mut xi = vec![0.0; d];
            for c in 0..per_row {
                if d == 1 {
                    xi[0] = grid.node(r * per_row + c);
                } else {
                    xi[0] = grid.node(r);
                    xi[1] = grid.node(c);
                }
                weight(&xi, &mut w)?;
                basis_transforms(sites, basis, &xi, &mut site_buf, &mut ft);
                for i in 0..m {
                    for j in 0..m {
                        let prod = ft[i].conj() * ft[j];
                        for (k, wk) in w.iter().enumerate() {
                            let v = prod * wk;
                            let slot = 2 * ((k * m + i) * m + j);
                            acc[slot].add(v.re);
                            acc[slot + 1].add(v.im);
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![CompensatedSum::new(); 2 * channels * m * m];
    for p in partials {
        for (t, a) in total.iter_mut().zip(p?.iter()) {
            t.merge(a);
        }
    }
    let nodes = (n as f64).powi(d as i32);
    Ok((0..channels)
        .map(|k| {
            (0..m * m)
                .map(|ij| {
                    let slot = 2 * (k * m * m + ij);
                    Complex64::new(total[slot].value(), total[slot + 1].value()) / nodes
                })
                .collect()
        })
        .collect())
}

fn real_table(values: &[Complex64], m: usize, residue: &mut f64) -> Vec<Vec<f64>> {
    for v in values {
        *residue = residue.max(v.im.abs());
    }
    (0..m).map(|i| (0..m).map(|j| values[i * m + j].re).collect()).collect()
}

fn richardson(fine: &[Vec<f64>], coarse: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let mut change: f64 = 0.0;
    let out = fine
        .iter()
        .zip(coarse)
        .map(|(rf, rc)| {
            rf.iter()
                .zip(rc)
                .map(|(a, b)| {
                    change = change.max((a - b).abs());
                    (4.0 * a - b) / 3.0
                })
                .collect()
        })
        .collect();
    (out, change)
}

/// Gram entries of an i.i.d. walk from `(2π)^{−d} ∫ conj(F e_i) F e_j / (1 − Ψ)`.
pub fn potential_gram_iid(base: &BaseSystem, sites: &[Site], basis: &ZeroSumBasis, grid: &QuadratureGrid) -> Result<GramTable> {
    grid.check_for(base)?;
    check_sites(base, sites, basis)?;
    check_ergodic(base)?;
    let law = base.step_law()?;
    let weight = |xi: &[f64], out: &mut [Complex64]| -> Result<()> {
        let mut re = 0.0;
        let mut im = 0.0;
        for (k, p) in &law {
            let th: f64 = k.iter().zip(xi).map(|(a, b)| *a as f64 * b).sum();
            let z = one_minus_phase(th);
            re += p * z.re;
            im += p * z.im;
        }
        let denom = Complex64::new(re, im);
        if !(denom.norm() > 1e-300) {
            return Err(Error::Invalid(format!("1 − Ψ vanishes at grid node {xi:?}: the extension is not ergodic")));
        }
        out[0] = denom.inv();
        Ok(())
    };
    let m = basis.dim();
    let mut residue: f64 = 0.0;
    let fine = real_table(&grid_sum(grid, sites, basis, 1, weight)?[0], m, &mut residue);
    let (entries, grid_change) = if grid.extrapolation == Extrapolation::Richardson {
        let coarse = real_table(&grid_sum(&grid.halved(), sites, basis, 1, weight)?[0], m, &mut residue);
        let (e, c) = richardson(&fine, &coarse);
        (e, Some(c))
    } else {
        (fine, None)
    };
    check_residue(residue)?;
    let diagnostics = GramDiagnostics {
        route: "iid".into(),
        grid: Some(grid.points_per_dim),
        richardson: grid.extrapolation == Extrapolation::Richardson,
        imag_residue: residue,
        grid_change,
        ..Default::default()
    };
    GramTable::new(basis.clone(), entries, diagnostics)
}

fn check_residue(residue: f64) -> Result<()> {
    if residue > IMAG_RESIDUE_TOL {
        return Err(Error::Numerical(format!("imaginary residue {residue:.3e} exceeds {IMAG_RESIDUE_TOL:.0e}")));
    }
    Ok(())
}

/// How `ρ → 1⁻` is approached by the twisted-operator route.
#[derive(Clone, Debug, PartialEq)]
pub enum RhoSchedule {
    /// `1 − ρ = τ·{4, 2, 1}` with `τ` tied to the smallest `|1 − λ_w|` next to the origin of the grid.
    Auto,
    /// Increasing values of `ρ` in `(0, 1)`.
    Explicit(Vec<f64>),
}

impl RhoSchedule {
    pub fn explicit(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Invalid("a ρ schedule needs at least two values".into()));
        }
        if values.iter().any(|r| !(*r > 0.0 && *r < 1.0)) || values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("ρ schedule must be strictly increasing in (0, 1)".into()));
        }
        Ok(Self::Explicit(values))
    }
}

/// `1 − ρ` values of the automatic schedule for a grid.
pub fn auto_one_minus_rho(base: &BaseSystem, grid: &QuadratureGrid) -> Result<Vec<f64>> {
    let h = grid.node(grid.points_per_dim / 2).abs().max(1e-300);
    let mut gap = f64::INFINITY;
    let corners: Vec<Vec<f64>> =
        if grid.d == 1 { vec![vec![h], vec![-h]] } else { vec![vec![h, h], vec![h, -h], vec![-h, h], vec![-h, -h]] };
    for w in corners {
        for lam in base.eigenvalues(&w)? {
            gap = gap.min((Complex64::new(1.0, 0.0) - lam).norm());
        }
    }
    if !(gap > 0.0) {
        return Err(Error::Singular("twisted operator has eigenvalue 1 next to the origin".into()));
    }
    let tau = 1e-3 * gap;
    Ok(vec![4.0 * tau, 2.0 * tau, tau])
}

/// Solves `A v = 1` for a small dense complex system by Gaussian elimination with partial pivoting, returning `π·v`.
fn weighted_solve(a: &mut [Complex64], n: usize, pi: &[f64], v: &mut [Complex64]) -> Result<Complex64> {
    v.iter_mut().for_each(|x| *x = Complex64::new(1.0, 0.0));
    let scale = a.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i * n + k].norm().partial_cmp(&a[j * n + k].norm()).unwrap_or(std::cmp::Ordering::Equal))
            .expect("nonempty");
        if !(a[p * n + k].norm() > 1e-300 * scale.max(1.0)) {
            return Err(Error::Singular("Id − ρM_w is singular at a grid node".into()));
        }
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            v.swap(k, p);
        }
        let piv = a[k * n + k];
        for i in k + 1..n {
            let l = a[i * n + k] / piv;
            if l == Complex64::new(0.0, 0.0) {
                continue;
            }
            for j in k..n {
                let t = a[k * n + j];
                a[i * n + j] -= l * t;
            }
            let t = v[k];
            v[i] -= l * t;
        }
    }
    for k in (0..n).rev() {
        let mut s = v[k];
        for j in k + 1..n {
            s -= a[k * n + j] * v[j];
        }
        v[k] = s / a[k * n + k];
    }
    Ok(v.iter().zip(pi).map(|(z, p)| z * *p).sum())
}

/// Gram entries from `(2π)^{−d} ∫ conj(F e_i) F e_j · πᵀ(Id − ρM_w)⁻¹1`, extrapolated to `ρ → 1⁻`
/// by polynomial interpolation in `1 − ρ` through the schedule.
pub fn potential_gram_markov(
    base: &BaseSystem,
    sites: &[Site],
    basis: &ZeroSumBasis,
    grid: &QuadratureGrid,
    schedule: &RhoSchedule,
) -> Result<GramTable> {
    grid.check_for(base)?;
    check_sites(base, sites, basis)?;
    check_ergodic(base)?;
    let jumps = base.lattice_jumps()?.to_vec();
    let ns = base.n_states();
    let pi = base.stationary().to_vec();
    let trans: Vec<Vec<f64>> = base.trans().to_vec();
    let run = |g: &QuadratureGrid, residue: &mut f64| -> Result<(Vec<Vec<f64>>, Vec<f64>, f64)> {
        let x: Vec<f64> = match schedule {
            RhoSchedule::Auto => auto_one_minus_rho(base, g)?,
            RhoSchedule::Explicit(r) => r.iter().map(|r| 1.0 - r).collect(),
        };
        let weight = |xi: &[f64], out: &mut [Complex64]| -> Result<()> {
            let defects: Vec<Complex64> =
                jumps.iter().map(|j| one_minus_phase(j.iter().zip(xi).map(|(a, b)| *a as f64 * b).sum())).collect();
            let mut a = vec![Complex64::new(0.0, 0.0); ns * ns];
            let mut v = vec![Complex64::new(0.0, 0.0); ns];
            for (k, &omr) in x.iter().enumerate() {
                let rho = 1.0 - omr;
                for i in 0..ns {
                    for j in 0..ns {
                        let p = trans[i][j];
                        let id = if i == j { 1.0 } else { 0.0 };
                        a[i * ns + j] = Complex64::new(id - p + omr * p, 0.0) + defects[i] * (rho * p);
                    }
                }
                out[k] = weighted_solve(&mut a, ns, &pi, &mut v)?;
            }
            Ok(())
        };
        let m = basis.dim();
        let tables = grid_sum(g, sites, basis, x.len(), weight)?;
        let per_rho: Vec<Vec<Vec<f64>>> = tables.iter().map(|t| real_table(t, m, residue)).collect();
        let mut stability: f64 = 0.0;
        let mut out = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                let ys: Vec<f64> = per_rho.iter().map(|t| t[i][j]).collect();
                let v = neville_at_zero(&x, &ys)?;
                if !v.is_finite() {
                    return Err(Error::NoConvergence("ρ extrapolation produced a non-finite value".into()));
                }
                stability = stability.max((v - ys[ys.len() - 1]).abs());
                out[i][j] = v;
            }
        }
        Ok((out, x, stability))
    };
    let mut residue: f64 = 0.0;
    let (fine, x, stability) = run(grid, &mut residue)?;
    let (entries, grid_change) = if grid.extrapolation == Extrapolation::Richardson {
        let (coarse, _, _) = run(&grid.halved(), &mut residue)?;
        let (e, c) = richardson(&fine, &coarse);
        (e, Some(c))
    } else {
        (fine, None)
    };
    check_residue(residue)?;
    let diagnostics = GramDiagnostics {
        route: "markov".into(),
        grid: Some(grid.points_per_dim),
        richardson: grid.extrapolation == Extrapolation::Richardson,
        imag_residue: residue,
        grid_change,
        one_minus_rho: x,
        rho_stability: Some(stability),
    };
    GramTable::new(basis.clone(), entries, diagnostics)
}

/// Terms `a_n = Σ_{i,j} f_i g_j μ(S_nF = σ_j − σ_i)` for `n = 0..=n_max`, by exact propagation of the
/// joint (state, displacement) law with the starting state drawn from `π`.
pub fn resolvent_series_terms(base: &BaseSystem, sites: &[Site], f: &[f64], g: &[f64], n_max: usize) -> Result<SeriesTerms> {
    let d = base.d();
    let jumps = base.lattice_jumps()?.to_vec();
    if f.len() != sites.len() || g.len() != sites.len() {
        return Err(Error::Invalid("f and g need one value per site".into()));
    }
    if let Some(s) = sites.iter().find(|s| s.len() != d) {
        return Err(Error::Invalid(format!("site {s:?} does not have {d} coordinates")));
    }
    let ns = base.n_states();
    let jmax = base.max_jump()?.max(1);
    let span = sites
        .iter()
        .flat_map(|a| sites.iter().map(move |b| a.iter().zip(b).map(|(x, y)| (x - y).abs()).max().unwrap_or(0)))
        .max()
        .unwrap_or(0);
    let var = if d == 1 {
        base.green_kubo_variance()?
    } else {
        let c = base.green_kubo_covariance()?;
        c[0][0].max(c[1][1])
    };
    let var = var.max((jmax * jmax) as f64);
    let radius_at = |n: usize| -> i64 {
        let gauss = span + jmax + (14.0 * (var * (n as f64 + 1.0)).sqrt()).ceil() as i64;
        (n as i64 * jmax).min(gauss).max(span)
    };
    let cap = radius_at(n_max);
    let width = (2 * cap + 1) as usize;
    let cells = width.checked_pow(d as u32).and_then(|c| c.checked_mul(ns));
    match cells {
        Some(c) if c <= 1 << 28 => {}
        _ => return Err(Error::Invalid(format!("box overflow: radius {cap} in dimension {d} is too large"))),
    }
    let cells = cells.expect("checked");
    let idx = |x: &[i64]| -> usize {
        let mut k = 0usize;
        for &c in x.iter().rev() {
            k = k * width + (c + cap) as usize;
        }
        k
    };
    let pairs: Vec<(usize, f64)> = (0..sites.len())
        .flat_map(|i| (0..sites.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| f[i] * g[j] != 0.0)
        .map(|(i, j)| {
            let diff: Vec<i64> = sites[j].iter().zip(&sites[i]).map(|(a, b)| a - b).collect();
            (idx(&diff), f[i] * g[j])
        })
        .collect();
    let mut cur = vec![0.0; cells];
    let mut next = vec![0.0; cells];
    let origin = idx(&vec![0; d]);
    for s in 0..ns {
        cur[origin * ns + s] = base.stationary()[s];
    }
    let offsets: Vec<isize> = jumps
        .iter()
        .map(|j| {
            let mut o = 0isize;
            let mut stride = 1isize;
            for &c in j {
                o += c as isize * stride;
                stride *= width as isize;
            }
            o
        })
        .collect();
    let term = |dist: &[f64]| -> f64 {
        let mut acc = CompensatedSum::new();
        for &(p, w) in &pairs {
            let mass: f64 = dist[p * ns..(p + 1) * ns].iter().sum();
            acc.add(w * mass);
        }
        acc.value()
    };
    let trans = base.trans();
    let mut terms = Vec::with_capacity(n_max + 1);
    let mut lost = 0.0;
    terms.push(term(&cur));
    for n in 1..=n_max {
        let r_prev = radius_at(n - 1);
        let r = radius_at(n);
        next.iter_mut().for_each(|x| *x = 0.0);
        for_each_position(d, r_prev, cap, width, |p, coords| {
            for s in 0..ns {
                let mass = cur[p * ns + s];
                if mass == 0.0 {
                    continue;
                }
                let inside = coords.iter().zip(&jumps[s]).all(|(c, j)| (c + j).abs() <= r);
                if !inside {
                    lost += mass;
                    continue;
                }
                let q = (p as isize + offsets[s]) as usize;
                for (s1, &t) in trans[s].iter().enumerate() {
                    if t != 0.0 {
                        next[q * ns + s1] += mass * t;
                    }
                }
            }
        });
        std::mem::swap(&mut cur, &mut next);
        terms.push(term(&cur));
    }
    if lost > 1e-12 {
        return Err(Error::Numerical(format!("box overflow: {lost:.3e} probability mass left the propagation box")));
    }
    let norm = f.iter().map(|x| x.abs()).sum::<f64>() * g.iter().map(|x| x.abs()).sum::<f64>();
    Ok(SeriesTerms { terms, norm, lost_mass: lost })
}

fn for_each_position<F: FnMut(usize, &[i64])>(d: usize, r: i64, cap: i64, width: usize, mut f: F) {
    if d == 1 {
        for x in -r..=r {
            f((x + cap) as usize, &[x]);
        }
    } else {
        for y in -r..=r {
            for x in -r..=r {
                f((y + cap) as usize * width + (x + cap) as usize, &[x, y]);
            }
        }
    }
}

/// The terms of the damped resolvent series.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTerms {
    pub terms: Vec<f64>,
    /// `‖f‖₁‖g‖₁`, which bounds every term.
    pub norm: f64,
    pub lost_mass: f64,
}

/// Value of a truncated damped series together with the bound on the discarded tail.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeriesValue {
    pub rho: f64,
    pub n_max: usize,
    pub value: f64,
    /// `ρ^{n_max+1}/(1−ρ) · ‖f‖₁‖g‖₁`.
    pub tail_bound: f64,
}

impl SeriesTerms {
    pub fn evaluate(&self, rho: f64) -> Result<SeriesValue> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Invalid(format!("ρ must lie in [0, 1), got {rho}")));
        }
        let mut acc = CompensatedSum::new();
        let mut w = 1.0;
        for a in &self.terms {
            acc.add(w * a);
            w *= rho;
        }
        let n_max = self.terms.len() - 1;
        Ok(SeriesValue { rho, n_max, value: acc.value(), tail_bound: w / (1.0 - rho) * self.norm })
    }
}

/// `Σ_{n ≤ n_max} ρⁿ Σ_{i,j} f_i g_j μ(S_nF = σ_j − σ_i)`.
pub fn resolvent_series_potential(base: &BaseSystem, sites: &[Site], f: &[f64], g: &[f64], rho: f64, n_max: usize) -> Result<SeriesValue> {
    resolvent_series_terms(base, sites, f, g, n_max)?.evaluate(rho)
}

/// Smallest `n_max` whose tail bound is below `tol`.
pub fn series_length(rho: f64, norm: f64, tol: f64) -> Result<usize> {
    if !(rho > 0.0 && rho < 1.0 && tol > 0.0) {
        return Err(Error::Invalid("series length needs ρ in (0,1) and a positive tolerance".into()));
    }
    let n = ((tol * (1.0 - rho) / norm.max(1e-300)).ln() / rho.ln()).ceil().max(0.0);
    Ok(n as usize)
}

/// Default `s = √(1−ρ)` schedule for extrapolating the series.
pub const SERIES_SQRT_SCHEDULE: [f64; 7] = [0.1, 0.08, 0.064, 0.05, 0.04, 0.032, 0.025];

/// Damped series at several `ρ`, extrapolated to `ρ → 1⁻` by polynomial interpolation in `√(1−ρ)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesExtrapolation {
    pub values: Vec<SeriesValue>,
    pub limit: f64,
    /// Gap between the extrapolations through all points and through all but the first.
    pub stability: f64,
}

pub fn resolvent_series_extrapolated(
    base: &BaseSystem,
    sites: &[Site],
    f: &[f64],
    g: &[f64],
    sqrt_schedule: &[f64],
    tail_tol: f64,
) -> Result<SeriesExtrapolation> {
    if sqrt_schedule.len() < 2 || sqrt_schedule.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
        return Err(Error::Invalid("series schedule needs at least two values of √(1−ρ) in (0,1)".into()));
    }
    let norm = f.iter().map(|x| x.abs()).sum::<f64>() * g.iter().map(|x| x.abs()).sum::<f64>();
    let mut n_max = 0;
    for s in sqrt_schedule {
        n_max = n_max.max(series_length(1.0 - s * s, norm, tail_tol)?);
    }
    let terms = resolvent_series_terms(base, sites, f, g, n_max)?;
    let values = sqrt_schedule.iter().map(|s| terms.evaluate(1.0 - s * s)).collect::<Result<Vec<_>>>()?;
    let ys: Vec<f64> = values.iter().map(|v| v.value).collect();
    let limit = neville_at_zero(sqrt_schedule, &ys)?;
    let reduced = neville_at_zero(&sqrt_schedule[1..], &ys[1..])?;
    if !limit.is_finite() {
        return Err(Error::NoConvergence("series extrapolation produced a non-finite value".into()));
    }
    Ok(SeriesExtrapolation { values, limit, stability: (limit - reduced).abs() })
}

/// `P_Σ = Id − E X⁻¹ E⁺` with `X = (EᵀE)⁻¹G`: inverts the potential on zero-sum vectors and adds back
/// the rank-one map onto constants.
pub fn reconstruct_transition_matrix(gram: &GramTable) -> Result<StochasticMatrix> {
    let n = gram.basis.n();
    if n == 1 {
        return StochasticMatrix::new(SquareMatrix::identity(1), true, RECONSTRUCTION_TOL);
    }
    let pot = gram.potential()?;
    let x = pot.operator();
    let sv = x.clone().singular_values();
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &s| (l.min(s), h.max(s)));
    if !(hi > 0.0) || lo <= 1e-13 * hi {
        return Err(Error::Singular("Gram table is singular on zero-sum vectors".into()));
    }
    let xinv = x.try_inverse().ok_or_else(|| Error::Singular("Gram table".into()))?;
    let e = gram.basis.matrix();
    let r = &e * xinv * gram.basis.pseudo_inverse();
    let p = DMatrix::identity(n, n) - r;
    if let Some(v) = p.iter().find(|v| **v < -RECONSTRUCTION_TOL) {
        return Err(Error::Numerical(format!("reconstructed matrix has a negative entry {v:.3e}")));
    }
    StochasticMatrix::new(SquareMatrix::from_dmatrix(&p)?, true, RECONSTRUCTION_TOL)
}

/// Gram entries of `(Id − P)₀⁻¹` for a known bi-stochastic `P`.
pub fn gram_from_transition(p: &StochasticMatrix, basis: &ZeroSumBasis) -> Result<GramTable> {
    let n = p.n();
    if basis.n() != n {
        return Err(Error::Invalid("basis dimension does not match matrix".into()));
    }
    let id_minus = DMatrix::identity(n, n) - p.matrix().to_dmatrix();
    let l = BiLMatrix::new(SquareMatrix::from_dmatrix(&id_minus)?, p.tol().max(crate::lmatrix::DEFAULT_TOL))?;
    let s = potential_from_l(&l)?.in_basis(basis)?;
    let g = s.gram();
    let m = basis.dim();
    let entries = (0..m).map(|i| (0..m).map(|j| g[(i, j)]).collect()).collect();
    GramTable::new(basis.clone(), entries, GramDiagnostics { route: "oracle".into(), ..Default::default() })
}

/// Result of [`absorbing_oracle`].
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub p: StochasticMatrix,
    /// Box radius of the accepted solve.
    pub radius: i64,
    /// Largest entry change between the last two radii.
    pub change: f64,
}

/// Exact first-return matrix on a truncated box for a walk on `Z`, doubling the box until stable.
///
/// Positions that would leave the box are clamped to its edge.
pub fn absorbing_oracle(base: &BaseSystem, sites: &[Site], box_radius: i64) -> Result<OracleResult> {
    if base.d() != 1 {
        return Err(Error::Invalid("the absorbing oracle is implemented for d = 1 only".into()));
    }
    check_sites(base, sites, &ZeroSumBasis::pivot(sites.len()))?;
    let n = sites.len();
    if n == 1 {
        let p = StochasticMatrix::new(SquareMatrix::identity(1), true, ORACLE_AGREEMENT)?;
        return Ok(OracleResult { p, radius: box_radius, change: 0.0 });
    }
    let jmax = base.max_jump()?.max(1);
    let mut radius = box_radius.max(2 * jmax);
    let mut prev = oracle_solve(base, sites, radius)?;
    for _ in 0..ORACLE_MAX_DOUBLINGS {
        radius *= 2;
        let cur = oracle_solve(base, sites, radius)?;
        let change = cur.max_abs_diff(&prev);
        if change <= ORACLE_AGREEMENT {
            let p = StochasticMatrix::new(cur, true, 10.0 * ORACLE_AGREEMENT)?;
            return Ok(OracleResult { p, radius, change });
        }
        prev = cur;
    }
    Err(Error::NoConvergence(format!("absorbing oracle did not stabilise up to box radius {radius}")))
}

fn oracle_solve(base: &BaseSystem, sites: &[Site], radius: i64) -> Result<SquareMatrix> {
    let jumps: Vec<i64> = base.lattice_jumps()?.iter().map(|j| j[0]).collect();
    let ns = base.n_states();
    let m = sites.len();
    let xs: Vec<i64> = sites.iter().map(|s| s[0]).collect();
    let lo = xs.iter().min().expect("nonempty") - radius;
    let hi = xs.iter().max().expect("nonempty") + radius;
    let npos = (hi - lo + 1) as usize;
    let jmax = jumps.iter().map(|j| j.abs()).max().unwrap_or(0) as usize;
    let site_of = |x: i64| xs.iter().position(|&s| s == x);
    let idx = |x: i64, s: usize| (x - lo) as usize * ns + s;
    let trans = base.trans();
    let mut a = BandMatrix::zeros(npos * ns, (jmax + 1) * ns);
    let mut rhs = vec![0.0; npos * ns * m];
    for x in lo..=hi {
        for s in 0..ns {
            let i = idx(x, s);
            a.add(i, i, 1.0);
            if site_of(x).is_some() {
                continue;
            }
            let y = (x + jumps[s]).clamp(lo, hi);
            for (s1, &p) in trans[s].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                match site_of(y) {
                    Some(q) => rhs[i * m + q] += p,
                    None => a.add(i, idx(y, s1), -p),
                }
            }
        }
    }
    a.solve(&mut rhs, m)?;
    let pi = base.stationary();
    let mut out = vec![0.0; m * m];
    for (a_site, &x) in xs.iter().enumerate() {
        for s in 0..ns {
            let y = (x + jumps[s]).clamp(lo, hi);
            for (s1, &p) in trans[s].iter().enumerate() {
                let w = pi[s] * p;
                if w == 0.0 {
                    continue;
                }
                match site_of(y) {
                    Some(q) => out[a_site * m + q] += w,
                    None => {
                        for q in 0..m {
                            out[a_site * m + q] += w * rhs[idx(y, s1) * m + q];
                        }
                    }
                }
            }
        }
    }
    SquareMatrix::new(m, out)
}
