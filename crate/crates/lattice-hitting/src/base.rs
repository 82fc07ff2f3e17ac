//! Finite-state Markov bases with lattice jumps: stationary and Green–Kubo statistics,
//! twisted characteristic matrices, and structural diagnostics.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gcd, strongly_connected, BandMatrix};

const ROW_SUM_TOL: f64 = 1e-12;
const CENTERING_TOL: f64 = 1e-10;

/// Tail family of a heavy-tailed step law.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeavyTailKind {
    Levy,
    Cauchy,
}

/// Heavy-tailed step law on `Z`: `p(k) = c_± |k|^{-(1+α)}` beyond the core, plus a finite core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeavyTailSpec {
    pub alpha: f64,
    pub c_plus: f64,
    pub c_minus: f64,
    /// Core shape as `(k, weight)` pairs; normalized and then mixed with an atom to centre the law.
    pub core: Vec<(i64, f64)>,
    #[serde(default = "default_kind")]
    pub kind: HeavyTailKind,
}

fn default_kind() -> HeavyTailKind {
    HeavyTailKind::Levy
}

/// Sampling truncation for heavy tails; the mass beyond is folded into this bin.
pub const HEAVY_TAIL_CUTOFF: i64 = 1_000_000_000;

/// A [`HeavyTailSpec`] resolved into explicit probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct HeavyTailLaw {
    pub spec: HeavyTailSpec,
    /// Core atoms with absolute probabilities, sorted by `k`.
    pub core: Vec<(i64, f64)>,
    /// Core radius: tails live on `|k| > k0`.
    pub k0: i64,
    pub tail_plus: f64,
    pub tail_minus: f64,
}

/// Hurwitz zeta `Σ_{k≥0} (k+a)^{-s}` for `s > 1`, `a > 0`, by Euler–Maclaurin.
pub fn hurwitz_zeta(s: f64, a: f64) -> f64 {
    const N: usize = 12;
    // B_2, B_4, ..., B_14
    const B: [f64; 7] = [1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0, 5.0 / 66.0, -691.0 / 2730.0, 7.0 / 6.0];
    let mut sum = 0.0;
    for k in 0..N {
        sum += (k as f64 + a).powf(-s);
    }
    let x = N as f64 + a;
    sum += x.powf(1.0 - s) / (s - 1.0) + 0.5 * x.powf(-s);
    // Σ_j B_{2j}/(2j)! · s(s+1)…(s+2j-2) · x^{-s-2j+1}
    let mut rising = s; // s(s+1)...(s+2j-2)
    let mut fact = 2.0; // (2j)!
    let mut xp = x.powf(-s - 1.0);
    for (j, b) in B.iter().enumerate() {
        sum += b / fact * rising * xp;
        let j2 = 2.0 * (j as f64 + 1.0);
        rising *= (s + j2 - 1.0) * (s + j2);
        fact *= (j2 + 1.0) * (j2 + 2.0);
        xp /= x * x;
    }
    sum
}

impl HeavyTailLaw {
    pub fn new(spec: HeavyTailSpec) -> Result<Self> {
        let (a, cp, cm) = (spec.alpha, spec.c_plus, spec.c_minus);
        match spec.kind {
            HeavyTailKind::Levy if !(a > 1.0 && a < 2.0) => {
                return Err(Error::Invalid(format!("alpha must lie in (1,2) for a Lévy tail, got {a}")))
            }
            HeavyTailKind::Cauchy if !(a > 0.0 && a <= 2.0) => return Err(Error::Invalid(format!("alpha must lie in (0,2], got {a}"))),
            _ => {}
        }
        if !(cp >= 0.0 && cm >= 0.0) || cp + cm == 0.0 {
            return Err(Error::Invalid("c_plus and c_minus must be nonnegative and not both zero".into()));
        }
        if spec.core.iter().any(|&(_, w)| !(w >= 0.0)) {
            return Err(Error::Invalid("core weights must be nonnegative".into()));
        }
        let core_total: f64 = spec.core.iter().map(|c| c.1).sum();
        if !(core_total > 0.0) {
            return Err(Error::Invalid("core must carry positive weight".into()));
        }
        let k0 = spec.core.iter().map(|c| c.0.abs()).max().unwrap_or(0).max(1);
        let z = hurwitz_zeta(1.0 + a, (k0 + 1) as f64);
        let (tail_plus, tail_minus) = (cp * z, cm * z);
        let tail = tail_plus + tail_minus;
        if tail >= 1.0 {
            return Err(Error::Invalid(format!("tail mass {tail:.4} ≥ 1; widen the core or lower c_±")));
        }
        let core_mass = 1.0 - tail;
        let mut atoms: Vec<(i64, f64)> = spec.core.iter().map(|&(k, w)| (k, w / core_total)).collect();
        let shape_mean: f64 = atoms.iter().map(|&(k, w)| k as f64 * w).sum();
        let target = if a > 1.0 {
            let zm = hurwitz_zeta(a, (k0 + 1) as f64);
            -(cp - cm) * zm / core_mass
        } else {
            shape_mean
        };
        if (target - shape_mean).abs() > 0.0 {
            let kstar = if target > shape_mean { k0 } else { -k0 };
            let theta = (target - shape_mean) / (kstar as f64 - shape_mean);
            if !(0.0..=1.0).contains(&theta) {
                return Err(Error::Invalid("core cannot be recentred; widen the core".into()));
            }
            for atom in atoms.iter_mut() {
                atom.1 *= 1.0 - theta;
            }
            atoms.push((kstar, theta));
        }
        let mut merged: Vec<(i64, f64)> = Vec::new();
        atoms.sort_by_key(|x| x.0);
        for (k, w) in atoms {
            match merged.last_mut() {
                Some(last) if last.0 == k => last.1 += w,
                _ => merged.push((k, w)),
            }
        }
        let core = merged.into_iter().filter(|x| x.1 > 0.0).map(|(k, w)| (k, w * core_mass)).collect();
        Ok(Self { spec, core, k0, tail_plus, tail_minus })
    }

    /// `P(F = k)`.
    pub fn pmf(&self, k: i64) -> f64 {
        if k.abs() > self.k0 {
            let c = if k > 0 { self.spec.c_plus } else { self.spec.c_minus };
            c * (k.abs() as f64).powf(-1.0 - self.spec.alpha)
        } else {
            self.core.iter().find(|c| c.0 == k).map(|c| c.1).unwrap_or(0.0)
        }
    }

    /// `P(F ≥ k)` for `k > k0`.
    pub fn upper_tail(&self, k: i64) -> f64 {
        self.spec.c_plus * hurwitz_zeta(1.0 + self.spec.alpha, k as f64)
    }

    /// `P(F ≤ -k)` for `k > k0`.
    pub fn lower_tail(&self, k: i64) -> f64 {
        self.spec.c_minus * hurwitz_zeta(1.0 + self.spec.alpha, k as f64)
    }

    /// Inverse CDF: maps `u ∈ [0,1)` to a step.
    pub fn quantile(&self, u: f64) -> i64 {
        let mut acc = 0.0;
        for &(k, w) in &self.core {
            acc += w;
            if u < acc {
                return k;
            }
        }
        let v = u - acc;
        if v < self.tail_plus {
            // smallest k with P(F ≥ k+1) ≤ tail_plus - v
            let target = self.tail_plus - v;
            k_from_tail(self.k0 + 1, target, |k| self.upper_tail(k))
        } else if self.tail_minus > 0.0 {
            let target = (self.tail_minus - (v - self.tail_plus)).max(0.0);
            -k_from_tail(self.k0 + 1, target, |k| self.lower_tail(k))
        } else {
            k_from_tail(self.k0 + 1, 0.0, |k| self.upper_tail(k))
        }
    }

    /// `(L_const, ϑ, ζ)` implied by the tails: `μ(F ≥ x) ~ c₊/L(x)` with `L(x) = L_const·x^α`.
    pub fn implied_parameters(&self) -> (f64, f64, f64) {
        let (a, cp, cm) = (self.spec.alpha, self.spec.c_plus, self.spec.c_minus);
        let theta = (cp + cm) * statrs::function::gamma::gamma(1.0 - a) * (std::f64::consts::PI * a / 2.0).cos();
        (a, theta, (cp - cm) / (cp + cm))
    }
}

/// Largest `k ≥ lo` with `tail(k) > target`, capped at the cutoff (bisection on a decreasing function).
fn k_from_tail<F: Fn(i64) -> f64>(lo: i64, target: f64, tail: F) -> i64 {
    if tail(HEAVY_TAIL_CUTOFF) > target {
        return HEAVY_TAIL_CUTOFF;
    }
    let (mut a, mut b) = (lo, HEAVY_TAIL_CUTOFF);
    // invariant: tail(a) > target (tail(lo) is the whole one-sided mass), tail(b) ≤ target
    while b - a > 1 {
        let m = a + (b - a) / 2;
        if tail(m) > target {
            a = m;
        } else {
            b = m;
        }
    }
    a
}

/// How jumps depend on the state.
#[derive(Clone, Debug, PartialEq)]
pub enum JumpLaw {
    /// One lattice vector per state.
    Lattice(Vec<Vec<i64>>),
    /// Every state draws its jump from the same heavy-tailed law on `Z`.
    HeavyTail(HeavyTailLaw),
}

/// Finite-state Markov base `(states, trans)` with a jump function into `Z^d`.
///
/// The walk moves by the jump of the current state, then the state moves by `trans`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseSystem {
    d: usize,
    states: Vec<String>,
    trans: Vec<Vec<f64>>,
    jump: JumpLaw,
    pi: Vec<f64>,
}

impl BaseSystem {
    pub fn new(d: usize, states: Vec<String>, trans: Vec<Vec<f64>>, jumps: Vec<Vec<i64>>) -> Result<Self> {
        if jumps.len() != states.len() {
            return Err(Error::Config(format!("jump: expected one vector per state ({}), got {}", states.len(), jumps.len())));
        }
        if let Some((s, j)) = jumps.iter().enumerate().find(|(_, j)| j.len() != d) {
            return Err(Error::Config(format!("jump.{}: expected {d} coordinates, got {}", states[s], j.len())));
        }
        Self::build(d, states, trans, JumpLaw::Lattice(jumps))
    }

    pub fn heavy_tailed(states: Vec<String>, trans: Vec<Vec<f64>>, spec: HeavyTailSpec) -> Result<Self> {
        let law = HeavyTailLaw::new(spec)?;
        Self::build(1, states, trans, JumpLaw::HeavyTail(law))
    }

    /// I.i.d. walk: one state per step value, all rows equal to the step law.
    pub fn iid(d: usize, steps: &[(Vec<i64>, f64)]) -> Result<Self> {
        let states = steps.iter().map(|(v, _)| format!("{v:?}")).collect();
        let row: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let trans = vec![row; steps.len()];
        Self::new(d, states, trans, steps.iter().map(|s| s.0.clone()).collect())
    }

    /// Simple random walk on `Z^d`.
    pub fn simple_walk(d: usize) -> Self {
        let mut steps = Vec::new();
        for k in 0..d {
            for sgn in [-1, 1] {
                let mut v = vec![0; d];
                v[k] = sgn;
                steps.push((v, 1.0 / (2 * d) as f64));
            }
        }
        Self::iid(d, &steps).expect("simple walk is valid")
    }

    fn build(d: usize, states: Vec<String>, trans: Vec<Vec<f64>>, jump: JumpLaw) -> Result<Self> {
        if !(d == 1 || d == 2) {
            return Err(Error::Config(format!("d: must be 1 or 2, got {d}")));
        }
        let n = states.len();
        if n == 0 {
            return Err(Error::Config("states: must be nonempty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = states.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::Config(format!("states: duplicate label {dup:?}")));
        }
        if trans.len() != n || trans.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("trans: must be a {n}x{n} matrix")));
        }
        for (i, row) in trans.iter().enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::Config(format!("trans[{i}]: entries must be finite and nonnegative")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Config(format!("trans[{i}]: row sums to {s}, not 1")));
            }
        }
        if matches!(jump, JumpLaw::HeavyTail(_)) && d != 1 {
            return Err(Error::Config("heavy_tail: only supported for d = 1".into()));
        }
        let pi = stationary_distribution(&trans)?;
        let base = Self { d, states, trans, jump, pi };
        if let JumpLaw::Lattice(j) = &base.jump {
            for k in 0..d {
                let m: f64 = (0..n).map(|s| base.pi[s] * j[s][k] as f64).sum();
                if m.abs() > CENTERING_TOL {
                    return Err(Error::Config(format!("jump: stationary mean of coordinate {k} is {m:.3e}, not 0")));
                }
            }
        }
        Ok(base)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn trans(&self) -> &[Vec<f64>] {
        &self.trans
    }

    pub fn jump_law(&self) -> &JumpLaw {
        &self.jump
    }

    /// Jump of state `s` (finite-support bases only).
    pub fn jump(&self, s: usize) -> Option<&[i64]> {
        match &self.jump {
            JumpLaw::Lattice(j) => Some(&j[s]),
            JumpLaw::HeavyTail(_) => None,
        }
    }

    pub fn lattice_jumps(&self) -> Result<&[Vec<i64>]> {
        match &self.jump {
            JumpLaw::Lattice(j) => Ok(j),
            JumpLaw::HeavyTail(_) => Err(Error::Invalid("operation requires finite-support jumps".into())),
        }
    }

    /// Largest coordinate of any jump in absolute value (finite-support bases only).
    pub fn max_jump(&self) -> Result<i64> {
        Ok(self.lattice_jumps()?.iter().flatten().map(|x| x.abs()).max().unwrap_or(0))
    }

    pub fn stationary(&self) -> &[f64] {
        &self.pi
    }

    /// All rows of `trans` equal: the walk is i.i.d.
    pub fn is_iid(&self) -> bool {
        self.trans.iter().all(|r| r.iter().zip(&self.trans[0]).all(|(a, b)| (a - b).abs() <= 1e-15))
    }

    /// Step law of an i.i.d. base as `(jump, probability)` pairs.
    pub fn step_law(&self) -> Result<Vec<(Vec<i64>, f64)>> {
        if !self.is_iid() {
            return Err(Error::Invalid("base is not i.i.d. (rows of trans differ)".into()));
        }
        let jumps = self.lattice_jumps()?;
        Ok(jumps.iter().cloned().zip(self.trans[0].iter().copied()).filter(|x| x.1 > 0.0).collect())
    }

    /// `πᵀ·trans = πᵀ`.
    pub fn stationary_distribution(&self) -> Vec<f64> {
        self.pi.clone()
    }

    fn fundamental_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.n_states();
        let p = DMatrix::from_fn(n, n, |i, j| self.trans[i][j]);
        let pi_row = DMatrix::from_fn(n, n, |_, j| self.pi[j]);
        (DMatrix::identity(n, n) - p + pi_row).try_inverse().ok_or_else(|| Error::Singular("fundamental matrix".into()))
    }

    /// `C_ab = Σ_{n∈Z} Cov_π(F_a, F_b∘Tⁿ)` via the fundamental matrix.
    fn green_kubo_matrix(&self) -> Result<DMatrix<f64>> {
        let jumps = match &self.jump {
            JumpLaw::Lattice(j) => j,
            JumpLaw::HeavyTail(_) => return Err(Error::Invalid("heavy-tailed jumps are not square-integrable".into())),
        };
        let n = self.n_states();
        let z = self.fundamental_matrix()?;
        let zm1 = &z - DMatrix::identity(n, n);
        let col = |k: usize| DVector::from_fn(n, |s, _| jumps[s][k] as f64);
        let mut c = DMatrix::zeros(self.d, self.d);
        for a in 0..self.d {
            for b in 0..self.d {
                let (fa, fb) = (col(a), col(b));
                let za = &zm1 * &fa;
                let zb = &zm1 * &fb;
                let mut v = 0.0;
                for s in 0..n {
                    v += self.pi[s] * (fa[s] * fb[s] + fa[s] * zb[s] + fb[s] * za[s]);
                }
                c[(a, b)] = v;
            }
        }
        Ok(c)
    }

    /// Asymptotic variance of `S_nF / √n` (d = 1).
    pub fn green_kubo_variance(&self) -> Result<f64> {
        if self.d != 1 {
            return Err(Error::Invalid("green_kubo_variance needs d = 1".into()));
        }
        let v = self.green_kubo_matrix()?[(0, 0)];
        if v <= crate::lmatrix::DEFAULT_TOL {
            return Err(Error::Numerical(format!("variance {v:.3e} vanishes: jump is a coboundary")));
        }
        Ok(v)
    }

    /// Asymptotic covariance matrix (d = 2); must be positive definite.
    pub fn green_kubo_covariance(&self) -> Result<[[f64; 2]; 2]> {
        if self.d != 2 {
            return Err(Error::Invalid("green_kubo_covariance needs d = 2".into()));
        }
        let c = self.green_kubo_matrix()?;
        let sym = [[c[(0, 0)], 0.5 * (c[(0, 1)] + c[(1, 0)])], [0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)]]];
        let det = sym[0][0] * sym[1][1] - sym[0][1] * sym[1][0];
        if !(sym[0][0] > crate::lmatrix::DEFAULT_TOL && det > crate::lmatrix::DEFAULT_TOL) {
            return Err(Error::Numerical("covariance is not positive definite".into()));
        }
        Ok(sym)
    }

    /// `1 - e^{i⟨w, F(s)⟩}` per state, evaluated without cancellation.
    pub fn phase_defects(&self, w: &[f64]) -> Result<Vec<Complex64>> {
        let jumps = self.lattice_jumps()?;
        Ok(jumps
            .iter()
            .map(|j| {
                let th: f64 = j.iter().zip(w).map(|(a, b)| *a as f64 * b).sum();
                let h = (0.5 * th).sin();
                Complex64::new(2.0 * h * h, -th.sin())
            })
            .collect())
    }

    /// Twisted matrix `M_w = diag(e^{i⟨w,F⟩})·trans`.
    pub fn characteristic_matrix(&self, w: &[f64]) -> Result<DMatrix<Complex64>> {
        if w.len() != self.d {
            return Err(Error::Invalid(format!("w must have {} coordinates", self.d)));
        }
        let jumps = self.lattice_jumps()?;
        let n = self.n_states();
        Ok(DMatrix::from_fn(n, n, |i, j| {
            let th: f64 = jumps[i].iter().zip(w).map(|(a, b)| *a as f64 * b).sum();
            Complex64::from_polar(1.0, th) * self.trans[i][j]
        }))
    }

    /// `Id - ρ M_w`, built from exact pieces so small `w` and `1-ρ` keep their relative accuracy.
    pub fn resolvent_operator(&self, w: &[f64], one_minus_rho: f64) -> Result<DMatrix<Complex64>> {
        let defects = self.phase_defects(w)?;
        let n = self.n_states();
        let rho = 1.0 - one_minus_rho;
        Ok(DMatrix::from_fn(n, n, |i, j| {
            // δ_ij - ρ e_i P_ij = (δ_ij - P_ij) + ρ (1 - e_i) P_ij + (1-ρ) P_ij
            let p = self.trans[i][j];
            let id = if i == j { 1.0 } else { 0.0 };
            Complex64::new(id - p + one_minus_rho * p, 0.0) + defects[i] * (rho * p)
        }))
    }

    pub fn eigenvalues(&self, w: &[f64]) -> Result<Vec<Complex64>> {
        let m = self.characteristic_matrix(w)?;
        let ev = m.schur().eigenvalues().ok_or_else(|| Error::Numerical("eigenvalue computation failed".into()))?;
        Ok(ev.iter().copied().collect())
    }

    pub fn spectral_radius(&self, w: &[f64]) -> Result<f64> {
        Ok(self.eigenvalues(w)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
    }

    /// The simple eigenvalue of largest modulus of `M_w`.
    pub fn leading_eigenvalue(&self, w: &[f64]) -> Result<Complex64> {
        let mut ev = self.eigenvalues(w)?;
        ev.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap_or(std::cmp::Ordering::Equal));
        if ev.len() > 1 && ev[0].norm() - ev[1].norm() < 1e-8 {
            return Err(Error::Numerical(format!("eigenvalue crossing at w = {w:?}: |λ₁| = {}, |λ₂| = {}", ev[0].norm(), ev[1].norm())));
        }
        Ok(ev[0])
    }

    /// Possible jump values of state `s`, with tails represented by two consecutive values per side.
    fn jump_support(&self, s: usize) -> Vec<Vec<i64>> {
        match &self.jump {
            JumpLaw::Lattice(j) => vec![j[s].clone()],
            JumpLaw::HeavyTail(law) => {
                let mut v: Vec<Vec<i64>> = law.core.iter().map(|c| vec![c.0]).collect();
                if law.spec.c_plus > 0.0 {
                    v.push(vec![law.k0 + 1]);
                    v.push(vec![law.k0 + 2]);
                }
                if law.spec.c_minus > 0.0 {
                    v.push(vec![-law.k0 - 1]);
                    v.push(vec![-law.k0 - 2]);
                }
                v
            }
        }
    }

    /// Ergodicity of the extension: base irreducible and loop displacements generate `Z^d`.
    pub fn check_extension_ergodic(&self) -> ErgodicityReport {
        let n = self.n_states();
        let adj = self.adjacency();
        let base_irreducible = strongly_connected(&adj);
        // Potentials along a BFS out-tree from state 0.
        let mut phi: Vec<Option<Vec<i64>>> = vec![None; n];
        phi[0] = Some(vec![0; self.d]);
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            let base = self.jump_support(u)[0].clone();
            for &v in &adj[u] {
                if phi[v].is_none() {
                    let pu = phi[u].as_ref().expect("visited");
                    phi[v] = Some(pu.iter().zip(&base).map(|(a, b)| a + b).collect());
                    queue.push_back(v);
                }
            }
        }
        let mut generators = Vec::new();
        for u in 0..n {
            let Some(pu) = &phi[u] else { continue };
            for &v in &adj[u] {
                let Some(pv) = &phi[v] else { continue };
                for j in self.jump_support(u) {
                    let g: Vec<i64> = (0..self.d).map(|k| pu[k] + j[k] - pv[k]).collect();
                    if g.iter().any(|x| *x != 0) && !generators.contains(&g) {
                        generators.push(g);
                    }
                }
            }
        }
        let basis = lattice_basis(&generators, self.d);
        let index = if basis.len() == self.d { (0..self.d).map(|k| basis[k][k].abs()).product::<i64>() } else { 0 };
        let ergodic = base_irreducible && index == 1;
        let description = if index == 0 {
            format!("rank-{} subgroup of Z^{} generated by {:?}", basis.len(), self.d, basis)
        } else if index == 1 {
            format!("all of Z^{}", self.d)
        } else {
            format!("index-{index} subgroup of Z^{} with basis {:?}", self.d, basis)
        };
        ErgodicityReport { ergodic, base_irreducible, generators, subgroup_basis: basis, index, description }
    }

    /// Grid points `w ≠ 0` of `T^d` (spacing `2π/g`) where the spectral radius of `M_w` is 1.
    pub fn unit_spectrum_points(&self, g: usize) -> Result<Vec<Vec<f64>>> {
        let step = 2.0 * std::f64::consts::PI / g as f64;
        let mut out = Vec::new();
        let total = g.pow(self.d as u32);
        for idx in 1..total {
            let w: Vec<f64> = (0..self.d).map(|k| ((idx / g.pow(k as u32)) % g) as f64 * step).collect();
            if self.spectral_radius(&w)? > 1.0 - 1e-10 {
                out.push(w);
            }
        }
        Ok(out)
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        self.trans.iter().map(|row| row.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(j, _)| j).collect()).collect()
    }

    /// Default structure radius: `8 × max|jump| × number of states`.
    pub fn default_structure_radius(&self) -> Result<i64> {
        Ok((8 * self.max_jump()? * self.n_states() as i64).max(4))
    }

    /// Period of the first-return chain at position 0 and the colour of far sites.
    pub fn detect_period_and_colors(&self, radius: i64) -> Result<StructureReport> {
        self.detect_period_and_colors_with(&StructureOptions { radius, max_escape: DEFAULT_MAX_ESCAPE })
    }

    pub fn detect_period_and_colors_with(&self, opts: &StructureOptions) -> Result<StructureReport> {
        let jumps = self.lattice_jumps()?.to_vec();
        let n = self.n_states();
        if n > 64 {
            return Err(Error::Invalid("structure detection supports at most 64 states".into()));
        }
        let r = opts.radius;
        if r < 4 {
            return Err(Error::Invalid("structure radius must be at least 4".into()));
        }
        let d = self.d;
        let side = (2 * r + 1) as usize;
        let npos = side.pow(d as u32);
        let pos_index = |x: &[i64]| -> Option<usize> {
            let mut idx = 0usize;
            for &c in x.iter().rev() {
                if c.abs() > r {
                    return None;
                }
                idx = idx * side + (c + r) as usize;
            }
            Some(idx)
        };
        let pos_of = |mut idx: usize| -> Vec<i64> {
            (0..d)
                .map(|_| {
                    let c = (idx % side) as i64 - r;
                    idx /= side;
                    c
                })
                .collect()
        };
        let origin = pos_index(&vec![0; d]).expect("origin in box");
        let adj = self.adjacency();
        let row_mask: Vec<u64> = adj.iter().map(|vs| vs.iter().fold(0u64, |m, &v| m | (1u64 << v))).collect();
        let add = |x: &[i64], j: &[i64]| -> Vec<i64> { x.iter().zip(j).map(|(a, b)| a + b).collect() };

        // mask[node]: states in which the walk can first reach position 0 from node = (position, state).
        let mut mask = vec![0u64; npos * n];
        let mut queue = VecDeque::new();
        for p in 0..npos {
            if p == origin {
                continue;
            }
            let x = pos_of(p);
            for s in 0..n {
                if add(&x, &jumps[s]).iter().all(|c| *c == 0) {
                    mask[p * n + s] = row_mask[s];
                    queue.push_back(p * n + s);
                }
            }
        }
        // Predecessors of (y, s') are (y - F(s), s) with trans(s, s') > 0.
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (s, vs) in adj.iter().enumerate() {
            for &v in vs {
                preds[v].push(s);
            }
        }
        while let Some(node) = queue.pop_front() {
            let (p, s1) = (node / n, node % n);
            let y = pos_of(p);
            for &s in &preds[s1] {
                let x: Vec<i64> = y.iter().zip(&jumps[s]).map(|(a, b)| a - b).collect();
                let Some(px) = pos_index(&x) else { continue };
                if px == origin {
                    continue;
                }
                let u = px * n + s;
                let merged = mask[u] | mask[node];
                if merged != mask[u] {
                    mask[u] = merged;
                    queue.push_back(u);
                }
            }
        }

        // Support of the induced chain on the states at position 0.
        let mut induced: Vec<Vec<usize>> = vec![Vec::new(); n];
        for s in 0..n {
            let y = jumps[s].clone();
            let m = if y.iter().all(|c| *c == 0) {
                row_mask[s]
            } else if let Some(py) = pos_index(&y) {
                adj[s].iter().fold(0u64, |m, &s1| m | mask[py * n + s1])
            } else {
                0
            };
            induced[s] = (0..n).filter(|&v| m & (1u64 << v) != 0).collect();
        }
        if !strongly_connected(&induced) {
            return Err(Error::NoConvergence(format!("radius too small: first-return chain at 0 is not irreducible within radius {r}")));
        }
        let mut level = vec![usize::MAX; n];
        level[0] = 0;
        let mut q = VecDeque::from([0usize]);
        while let Some(u) = q.pop_front() {
            for &v in &induced[u] {
                if level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    q.push_back(v);
                }
            }
        }
        let mut period = 0i64;
        for u in 0..n {
            for &v in &induced[u] {
                period = gcd(period, level[u] as i64 + 1 - level[v] as i64);
            }
        }
        let period = period.max(1) as usize;
        let classes: Vec<usize> = level.iter().map(|l| l % period).collect();

        // Colour classes seen from far sites.
        let colours_at = |x: &[i64]| -> u64 {
            let p = pos_index(x).expect("inside box");
            (0..n).fold(0u64, |acc, s| {
                let m = mask[p * n + s];
                (0..n).filter(|&v| m & (1u64 << v) != 0).fold(acc, |a, v| a | (1u64 << classes[v]))
            })
        };
        let single = |m: u64, side: &str| -> Result<usize> {
            if m.count_ones() == 1 {
                Ok(m.trailing_zeros() as usize)
            } else {
                Err(Error::NoConvergence(format!(
                    "far sites on the {side} side do not have a single colour (classes mask {m:#b}); increase the radius"
                )))
            }
        };
        let (near, far) = (r / 4, r / 2);
        let coloring = if d == 1 {
            let right = (near..=far).fold(0u64, |m, x| m | colours_at(&[x]));
            let left = (near..=far).fold(0u64, |m, x| m | colours_at(&[-x]));
            let (lp, lm) = (single(right, "positive")?, single(left, "negative")?);
            if lp == lm {
                Coloring::Monochromatic { ell: lp }
            } else {
                Coloring::Bichromatic { ell_minus: lm, ell_plus: lp }
            }
        } else {
            let mut m = 0u64;
            for a in -far..=far {
                for (x, y) in [(a, far), (a, -far), (far, a), (-far, a)] {
                    m |= colours_at(&[x, y]);
                }
            }
            Coloring::Monochromatic { ell: single(m, "far")? }
        };

        let escape_mass = if d == 1 { Some(self.escape_mass(&jumps, r)?) } else { None };
        if let Some(e) = escape_mass {
            if e > opts.max_escape {
                return Err(Error::NoConvergence(format!(
                    "radius too small: first-return mass {e:.3e} escapes the box (limit {:.1e})",
                    opts.max_escape
                )));
            }
        }
        Ok(StructureReport { period, coloring, classes, escape_mass, radius: r })
    }

    /// Probability (start state ~ π at 0) of leaving `[-r, r]` before the first return to 0.
    fn escape_mass(&self, jumps: &[Vec<i64>], r: i64) -> Result<f64> {
        let n = self.n_states();
        let jmax = jumps.iter().map(|j| j[0].abs()).max().unwrap_or(0) as usize;
        let npos = (2 * r + 1) as usize;
        let idx = |x: i64, s: usize| (x + r) as usize * n + s;
        let mut a = BandMatrix::zeros(npos * n, (jmax + 1) * n);
        let mut rhs = vec![0.0; npos * n];
        for x in -r..=r {
            for s in 0..n {
                let i = idx(x, s);
                a.add(i, i, 1.0);
                if x == 0 {
                    continue;
                }
                let y = x + jumps[s][0];
                for (s1, &p) in self.trans[s].iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    if y.abs() > r {
                        rhs[i] += p;
                    } else if y != 0 {
                        a.add(i, idx(y, s1), -p);
                    }
                }
            }
        }
        a.solve(&mut rhs, 1)?;
        let mut e = 0.0;
        for s in 0..n {
            let y = jumps[s][0];
            for (s1, &p) in self.trans[s].iter().enumerate() {
                let v = if y.abs() > r {
                    1.0
                } else if y == 0 {
                    0.0
                } else {
                    rhs[idx(y, s1)]
                };
                e += self.pi[s] * p * v;
            }
        }
        Ok(e)
    }
}

/// Stationary law of an irreducible row-stochastic matrix.
pub fn stationary_distribution(trans: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = trans.len();
    let adj: Vec<Vec<usize>> =
        trans.iter().map(|row| row.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(j, _)| j).collect()).collect();
    if !strongly_connected(&adj) {
        return Err(Error::Reducible("base chain is not irreducible".into()));
    }
    let mut a = DMatrix::from_fn(n, n, |i, j| trans[j][i] - if i == j { 1.0 } else { 0.0 });
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let pi = a.lu().solve(&b).ok_or_else(|| Error::Singular("stationary distribution".into()))?;
    Ok(pi.iter().map(|x| x.max(0.0)).collect())
}

/// Echelon basis of the subgroup of `Z^d` generated by `gens` (integer row reduction).
pub fn lattice_basis(gens: &[Vec<i64>], d: usize) -> Vec<Vec<i64>> {
    let mut rows: Vec<Vec<i64>> = gens.to_vec();
    let mut basis = Vec::new();
    for c in 0..d {
        loop {
            rows.retain(|r| r.iter().any(|x| *x != 0));
            let nz: Vec<usize> = (0..rows.len()).filter(|&i| rows[i][c] != 0).collect();
            if nz.len() <= 1 {
                break;
            }
            let p = *nz.iter().min_by_key(|&&i| rows[i][c].abs()).expect("nonempty");
            let pivot = rows[p].clone();
            for &i in &nz {
                if i != p {
                    let q = rows[i][c].div_euclid(pivot[c]);
                    for k in 0..d {
                        rows[i][k] -= q * pivot[k];
                    }
                }
            }
        }
        if let Some(p) = (0..rows.len()).find(|&i| rows[i][c] != 0) {
            let mut row = rows.remove(p);
            if row[c] < 0 {
                row.iter_mut().for_each(|x| *x = -*x);
            }
            basis.push(row);
        }
    }
    basis
}

/// Site labels, a limiting shape `σ: I → R^d`, and the scales `t` at which the shape is sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub labels: Vec<String>,
    pub sigma: Vec<Vec<f64>>,
    pub t_values: Vec<f64>,
    /// Allowed Euclidean distance between `σ_t(i)` and `t·σ(i)`.
    #[serde(default = "default_slack")]
    pub slack: f64,
}

fn default_slack() -> f64 {
    1.0
}

impl SiteConfig {
    pub fn new(labels: Vec<String>, sigma: Vec<Vec<f64>>, t_values: Vec<f64>, slack: f64) -> Result<Self> {
        let cfg = Self { labels, sigma, t_values, slack };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A fixed set of lattice sites at the single scale `t = 1`.
    pub fn fixed(sites: &[Vec<i64>]) -> Result<Self> {
        let labels = (0..sites.len()).map(|i| format!("s{i}")).collect();
        let sigma = sites.iter().map(|s| s.iter().map(|&x| x as f64).collect()).collect();
        Self::new(labels, sigma, vec![1.0], 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::Config("sites.labels: must be nonempty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::Config(format!("sites.labels: duplicate label {dup:?}")));
        }
        if self.sigma.len() != n {
            return Err(Error::Config(format!("sites.sigma: expected {n} points, got {}", self.sigma.len())));
        }
        let d = self.sigma[0].len();
        if !(d == 1 || d == 2) || self.sigma.iter().any(|p| p.len() != d || p.iter().any(|x| !x.is_finite())) {
            return Err(Error::Config("sites.sigma: points must be finite vectors of a common dimension 1 or 2".into()));
        }
        for i in 0..n {
            if self.sigma[i + 1..].contains(&self.sigma[i]) {
                return Err(Error::Config(format!("sites.sigma: {:?} appears twice", self.sigma[i])));
            }
        }
        if self.t_values.is_empty() || self.t_values.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Config("sites.t_values: must be a nonempty list of positive scales".into()));
        }
        if self.t_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("sites.t_values: must be strictly increasing".into()));
        }
        if !(self.slack >= 0.0) {
            return Err(Error::Config("sites.slack: must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.sigma[0].len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `σ_t(i)`: the nearest lattice point to `t·σ(i)` (ties away from zero).
    pub fn sites_at(&self, t: f64) -> Result<Vec<Vec<i64>>> {
        let mut out: Vec<Vec<i64>> = Vec::with_capacity(self.len());
        for p in &self.sigma {
            let q: Vec<i64> = p.iter().map(|x| (t * x).round() as i64).collect();
            let err = p.iter().zip(&q).map(|(x, y)| (t * x - *y as f64).powi(2)).sum::<f64>().sqrt();
            if err > self.slack {
                return Err(Error::Config(format!("sites: rounding {p:?} at t = {t} moves it by {err:.3} > slack")));
            }
            if out.contains(&q) {
                return Err(Error::Config(format!("sites: two sites round to {q:?} at t = {t}")));
            }
            out.push(q);
        }
        Ok(out)
    }
}

/// Result of [`BaseSystem::check_extension_ergodic`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErgodicityReport {
    pub ergodic: bool,
    pub base_irreducible: bool,
    pub generators: Vec<Vec<i64>>,
    pub subgroup_basis: Vec<Vec<i64>>,
    /// Index of the displacement subgroup in `Z^d` (0 when it has lower rank).
    pub index: i64,
    pub description: String,
}

pub const DEFAULT_MAX_ESCAPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StructureOptions {
    pub radius: i64,
    pub max_escape: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Coloring {
    Monochromatic { ell: usize },
    Bichromatic { ell_minus: usize, ell_plus: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StructureReport {
    pub period: usize,
    pub coloring: Coloring,
    /// Cyclic class of each state (class of state 0 is 0).
    pub classes: Vec<usize>,
    pub escape_mass: Option<f64>,
    pub radius: i64,
}

impl StructureReport {
    /// Same period, colouring and classes.
    pub fn same_structure(&self, other: &StructureReport) -> bool {
        self.period == other.period && self.coloring == other.coloring && self.classes == other.classes
    }
}

/// Period-5 example whose only jumps happen in phase 0 (−1, 0, +1 with probability 1/3 each).
pub fn monochromatic_example() -> BaseSystem {
    let states = ["0-", "00", "0+", "1", "2", "3", "4"].map(String::from).to_vec();
    let third = 1.0 / 3.0;
    let trans = vec![
        vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        vec![third, third, third, 0.0, 0.0, 0.0, 0.0],
    ];
    let jumps = vec![vec![-1], vec![0], vec![1], vec![0], vec![0], vec![0], vec![0]];
    BaseSystem::new(1, states, trans, jumps).expect("valid example")
}

/// Period-5 example with a +1 jump from phase 0 to phase 3 and a −1 jump from phase 2 to phase 1.
pub fn bichromatic_example() -> BaseSystem {
    let states = ["0a", "0b", "1", "2a", "2b", "3", "4"].map(String::from).to_vec();
    let trans = vec![
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0],
    ];
    let jumps = vec![vec![1], vec![0], vec![0], vec![-1], vec![0], vec![0], vec![0]];
    BaseSystem::new(1, states, trans, jumps).expect("valid example")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(p: f64) -> BaseSystem {
        BaseSystem::new(1, vec!["+".into(), "-".into()], vec![vec![p, 1.0 - p], vec![1.0 - p, p]], vec![vec![1], vec![-1]]).unwrap()
    }

    #[test]
    fn stationary_examples() {
        let b = BaseSystem::iid(1, &[(vec![0], 1.0)]).unwrap();
        assert_eq!(b.stationary(), &[1.0]);
        assert!(two_state(0.3).stationary().iter().all(|x| (x - 0.5).abs() < 1e-15));
        let pi = stationary_distribution(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-14 && (pi[1] - 1.0 / 3.0).abs() < 1e-14);
        assert!(stationary_distribution(&[vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn construction_rejects_bad_input() {
        let s = || vec!["a".to_string(), "b".to_string()];
        assert!(BaseSystem::new(1, s(), vec![vec![0.5, 0.6], vec![0.5, 0.5]], vec![vec![1], vec![-1]]).is_err());
        assert!(BaseSystem::new(1, s(), vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![vec![1], vec![0]]).is_err());
        assert!(BaseSystem::new(3, s(), vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![vec![1; 3], vec![-1; 3]]).is_err());
        assert!(BaseSystem::new(1, s(), vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![0], vec![0]]).is_err());
    }

    #[test]
    fn variance_examples() {
        assert!((BaseSystem::simple_walk(1).green_kubo_variance().unwrap() - 1.0).abs() < 1e-14);
        let b = BaseSystem::iid(1, &[(vec![-2], 0.25), (vec![-1], 0.25), (vec![1], 0.25), (vec![2], 0.25)]).unwrap();
        assert!((b.green_kubo_variance().unwrap() - 2.5).abs() < 1e-14);
        assert!((two_state(0.5).green_kubo_variance().unwrap() - 1.0).abs() < 1e-14);
        // Persistent chain: Var = (1+λ)/(1-λ) with λ = 2p-1.
        assert!((two_state(0.7).green_kubo_variance().unwrap() - 1.4 / 0.6).abs() < 1e-13);
    }

    /// Partial sum `c_0 + 2 Σ_{n=1}^{N} c_n` of the autocovariances.
    fn truncated_variance(b: &BaseSystem, nmax: usize) -> f64 {
        let f: Vec<f64> = b.lattice_jumps().unwrap().iter().map(|j| j[0] as f64).collect();
        let pi = b.stationary();
        let mut v = f.clone();
        let c = |v: &[f64]| (0..f.len()).map(|s| pi[s] * f[s] * v[s]).sum::<f64>();
        let mut total = c(&v);
        for _ in 0..nmax {
            v = (0..f.len()).map(|s| (0..f.len()).map(|t| b.trans()[s][t] * v[t]).sum()).collect();
            total += 2.0 * c(&v);
        }
        total
    }

    #[test]
    fn variance_matches_truncated_sum() {
        let b = BaseSystem::new(
            1,
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![0.5, 0.3, 0.2], vec![0.3, 0.4, 0.3], vec![0.2, 0.3, 0.5]],
            vec![vec![2], vec![0], vec![-2]],
        )
        .unwrap();
        let want = truncated_variance(&b, 10_000);
        assert!((b.green_kubo_variance().unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn covariance_examples() {
        let c = BaseSystem::simple_walk(2).green_kubo_covariance().unwrap();
        assert!((c[0][0] - 0.5).abs() < 1e-14 && (c[1][1] - 0.5).abs() < 1e-14 && c[0][1].abs() < 1e-14);
        let diag = BaseSystem::iid(2, &[(vec![1, 1], 0.25), (vec![1, -1], 0.25), (vec![-1, 1], 0.25), (vec![-1, -1], 0.25)]).unwrap();
        let c = diag.green_kubo_covariance().unwrap();
        assert!((c[0][0] - 1.0).abs() < 1e-14 && (c[1][1] - 1.0).abs() < 1e-14 && c[0][1].abs() < 1e-14);
    }

    #[test]
    fn covariance_matches_truncated_sums() {
        let b = BaseSystem::new(
            2,
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![vec![0.1, 0.6, 0.2, 0.1], vec![0.6, 0.1, 0.1, 0.2], vec![0.2, 0.1, 0.1, 0.6], vec![0.1, 0.2, 0.6, 0.1]],
            vec![vec![1, 0], vec![-1, 0], vec![0, 1], vec![0, -1]],
        )
        .unwrap();
        let c = b.green_kubo_covariance().unwrap();
        let jumps = b.lattice_jumps().unwrap().to_vec();
        let pi = b.stationary().to_vec();
        for (a, bb) in [(0, 0), (0, 1), (1, 1)] {
            let fa: Vec<f64> = jumps.iter().map(|j| j[a] as f64).collect();
            let fb: Vec<f64> = jumps.iter().map(|j| j[bb] as f64).collect();
            let mut va = fa.clone();
            let mut vb = fb.clone();
            let dot = |x: &[f64], y: &[f64]| (0..4).map(|s| pi[s] * x[s] * y[s]).sum::<f64>();
            let mut total = dot(&fa, &fb);
            for _ in 0..2000 {
                va = (0..4).map(|s| (0..4).map(|t| b.trans()[s][t] * va[t]).sum()).collect();
                vb = (0..4).map(|s| (0..4).map(|t| b.trans()[s][t] * vb[t]).sum()).collect();
                total += dot(&fa, &vb) + dot(&fb, &va);
            }
            assert!((c[a][bb] - total).abs() < 1e-8, "({a},{bb}) {} vs {}", c[a][bb], total);
        }
    }

    #[test]
    fn characteristic_examples() {
        let b = two_state(0.7);
        let m0 = b.characteristic_matrix(&[0.0]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(m0[(i, j)], Complex64::new(b.trans()[i][j], 0.0));
            }
        }
        let sw = BaseSystem::simple_walk(1);
        let pi = std::f64::consts::PI;
        let psi = |w: f64| {
            let m = sw.characteristic_matrix(&[w]).unwrap();
            let v = m * DVector::from_element(2, Complex64::new(1.0, 0.0));
            v[0]
        };
        assert!((psi(pi) - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
        assert!((sw.leading_eigenvalue(&[0.3]).unwrap() - Complex64::new(0.3f64.cos(), 0.0)).norm() < 1e-13);
        assert!((sw.leading_eigenvalue(&[0.0]).unwrap() - Complex64::new(1.0, 0.0)).norm() < 1e-13);
    }

    /// `E_π e^{i w S_n}` by enumerating every path of length `n`.
    fn path_characteristic(b: &BaseSystem, w: f64, n: usize) -> Complex64 {
        let ns = b.n_states();
        let jumps = b.lattice_jumps().unwrap();
        let mut total = Complex64::new(0.0, 0.0);
        let paths = ns.pow(n as u32 + 1);
        for code in 0..paths {
            let mut c = code;
            let seq: Vec<usize> = (0..=n)
                .map(|_| {
                    let s = c % ns;
                    c /= ns;
                    s
                })
                .collect();
            let mut p = b.stationary()[seq[0]];
            let mut disp = 0i64;
            for k in 0..n {
                p *= b.trans()[seq[k]][seq[k + 1]];
                disp += jumps[seq[k]][0];
            }
            total += Complex64::from_polar(p, w * disp as f64);
        }
        total
    }

    #[test]
    fn twisted_powers_match_path_enumeration() {
        let b = BaseSystem::new(
            1,
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![0.5, 0.3, 0.2], vec![0.3, 0.4, 0.3], vec![0.2, 0.3, 0.5]],
            vec![vec![2], vec![0], vec![-2]],
        )
        .unwrap();
        let w = 0.7;
        let m = b.characteristic_matrix(&[w]).unwrap();
        let pi = DVector::from_iterator(3, b.stationary().iter().map(|x| Complex64::new(*x, 0.0)));
        let mut v = DVector::from_element(3, Complex64::new(1.0, 0.0));
        for n in 0..=5 {
            let got = pi.dot(&v);
            let want = path_characteristic(&b, w, n);
            assert!((got - want).norm() < 1e-13, "n={n}: {got} vs {want}");
            v = &m * v;
        }
    }

    #[test]
    fn site_config_rounding() {
        let c = SiteConfig::new(vec!["a".into(), "b".into(), "c".into()], vec![vec![-1.0], vec![0.0], vec![2.0]], vec![20.0, 40.0], 1.0)
            .unwrap();
        assert_eq!(c.sites_at(20.0).unwrap(), vec![vec![-20], vec![0], vec![40]]);
        let c = SiteConfig::new(vec!["a".into(), "b".into()], vec![vec![0.0], vec![0.1]], vec![1.0], 1.0).unwrap();
        assert!(c.sites_at(1.0).is_err());
        assert!(SiteConfig::new(vec!["a".into()], vec![vec![0.0]], vec![2.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn leading_eigenvalue_quadratic_expansion() {
        let b = two_state(0.7);
        let var = b.green_kubo_variance().unwrap();
        let w = 1e-2;
        let lam = b.leading_eigenvalue(&[w]).unwrap();
        let want = 1.0 - var * w * w / 2.0;
        assert!(((lam.re - want) / want).abs() < 1e-4);
    }

    #[test]
    fn resolvent_operator_matches_direct_form() {
        let b = two_state(0.7);
        let w = [0.37];
        let direct = DMatrix::<Complex64>::identity(2, 2) - b.characteristic_matrix(&w).unwrap() * Complex64::new(0.99, 0.0);
        let accurate = b.resolvent_operator(&w, 0.01).unwrap();
        assert!((direct - accurate).iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn ergodicity_examples() {
        let r = BaseSystem::simple_walk(1).check_extension_ergodic();
        assert!(r.ergodic && r.index == 1);
        let pi = std::f64::consts::PI;
        assert_eq!(BaseSystem::simple_walk(1).unit_spectrum_points(24).unwrap(), vec![vec![pi]]);
        let lazy = BaseSystem::iid(1, &[(vec![-1], 0.25), (vec![0], 0.5), (vec![1], 0.25)]).unwrap();
        assert!(lazy.unit_spectrum_points(24).unwrap().is_empty());
        let even = BaseSystem::iid(1, &[(vec![-2], 0.5), (vec![2], 0.5)]).unwrap();
        let r = even.check_extension_ergodic();
        assert!(!r.ergodic && r.index == 2);
        let pts = even.unit_spectrum_points(24).unwrap();
        assert_eq!(pts, vec![vec![pi / 2.0], vec![pi], vec![1.5 * pi]]);
        assert!(monochromatic_example().check_extension_ergodic().ergodic);
        assert!(bichromatic_example().check_extension_ergodic().ergodic);
        assert!(BaseSystem::simple_walk(2).check_extension_ergodic().ergodic);
        let diag = BaseSystem::iid(2, &[(vec![1, 1], 0.25), (vec![1, -1], 0.25), (vec![-1, 1], 0.25), (vec![-1, -1], 0.25)]).unwrap();
        let r = diag.check_extension_ergodic();
        assert!(!r.ergodic && r.index == 2, "{r:?}");
    }

    #[test]
    fn lattice_basis_reduces() {
        assert_eq!(lattice_basis(&[vec![4], vec![6]], 1), vec![vec![2]]);
        let b = lattice_basis(&[vec![2, 0], vec![0, 2], vec![1, 1]], 2);
        let index: i64 = (0..2).map(|k| b[k][k].abs()).product();
        assert_eq!(index, 2);
    }

    #[test]
    fn structure_examples() {
        let mono = monochromatic_example();
        let r = mono.detect_period_and_colors(mono.default_structure_radius().unwrap()).unwrap();
        assert_eq!(r.period, 5);
        assert_eq!(r.coloring, Coloring::Monochromatic { ell: 1 });
        let bi = bichromatic_example();
        let r = bi.detect_period_and_colors(bi.default_structure_radius().unwrap()).unwrap();
        assert_eq!(r.period, 5);
        assert_eq!(r.coloring, Coloring::Bichromatic { ell_minus: 3, ell_plus: 1 });
        let sw = BaseSystem::simple_walk(1);
        let r = sw.detect_period_and_colors(sw.default_structure_radius().unwrap()).unwrap();
        assert_eq!(r.period, 1);
    }

    #[test]
    fn structure_is_stable_under_doubling() {
        for b in [monochromatic_example(), bichromatic_example(), BaseSystem::simple_walk(1)] {
            let r = b.default_structure_radius().unwrap();
            let a = b.detect_period_and_colors(r).unwrap();
            let c = b.detect_period_and_colors(2 * r).unwrap();
            assert!(a.same_structure(&c));
            assert!(c.escape_mass.unwrap() < a.escape_mass.unwrap());
        }
    }

    #[test]
    fn structure_in_the_plane() {
        let sw = BaseSystem::simple_walk(2);
        let r = sw.detect_period_and_colors(8).unwrap();
        assert_eq!(r.period, 1);
        assert_eq!(r.coloring, Coloring::Monochromatic { ell: 0 });
    }

    #[test]
    fn hurwitz_zeta_values() {
        // ζ(2, 1) = π²/6, ζ(2, 2) = π²/6 - 1, ζ(3, 1) = Apéry's constant.
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((hurwitz_zeta(2.0, 1.0) - pi2 / 6.0).abs() < 1e-14);
        assert!((hurwitz_zeta(2.0, 2.0) - (pi2 / 6.0 - 1.0)).abs() < 1e-14);
        assert!((hurwitz_zeta(3.0, 1.0) - 1.202_056_903_159_594_3).abs() < 1e-14);
        // Direct summation oracle for a non-integer exponent.
        let direct: f64 = (0..2_000_000).map(|k| (k as f64 + 5.0).powf(-2.5)).sum::<f64>();
        let tail = (2_000_005f64).powf(-1.5) / 1.5;
        assert!((hurwitz_zeta(2.5, 5.0) - direct - tail).abs() < 1e-12);
    }

    #[test]
    fn heavy_tail_law_is_normalized_and_centred() {
        let core = (-3..=3).map(|k| (k, 1.0)).collect();
        let spec = HeavyTailSpec { alpha: 1.5, c_plus: 0.1, c_minus: 0.0, core, kind: HeavyTailKind::Levy };
        let law = HeavyTailLaw::new(spec).unwrap();
        let core: f64 = law.core.iter().map(|c| c.1).sum();
        assert!((core + law.tail_plus + law.tail_minus - 1.0).abs() < 1e-14);
        let core_mean: f64 = law.core.iter().map(|c| c.0 as f64 * c.1).sum();
        let tail_mean = 0.1 * hurwitz_zeta(1.5, (law.k0 + 1) as f64);
        assert!((core_mean + tail_mean).abs() < 1e-13);
        assert_eq!(law.quantile(0.0), law.core[0].0);
        assert!(law.quantile(1.0 - 1e-18) > law.k0);
        // Quantile is monotone and consistent with the tail function.
        let u = 1.0 - 0.5 * law.tail_plus;
        let k = law.quantile(u);
        assert!(law.upper_tail(k) > 1.0 - u && law.upper_tail(k + 1) <= 1.0 - u);
    }

    #[test]
    fn heavy_tailed_base_is_ergodic() {
        let spec = HeavyTailSpec { alpha: 1.5, c_plus: 1.0, c_minus: 1.0, core: vec![(0, 1.0)], kind: HeavyTailKind::Levy };
        let b = BaseSystem::heavy_tailed(vec!["x".into()], vec![vec![1.0]], spec).unwrap();
        assert!(b.check_extension_ergodic().ergodic);
        assert!(b.green_kubo_variance().is_err());
        assert!(b.characteristic_matrix(&[0.1]).is_err());
    }
}
