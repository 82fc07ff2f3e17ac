//! Asymptotic predictions `P_t ≈ Id − ε(t)·R` in the four scaling regimes.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmatrix::{bil_from_potential, BiLMatrix, PotentialMatrix, SquareMatrix, StochasticMatrix, ZeroSumBasis};
use crate::numeric::adaptive_simpson;

/// Tolerance on predicted entries leaving `[0, 1]`.
const ENTRY_TOL: f64 = 1e-12;
const SIGN_TOL: f64 = 1e-10;

/// Slowly varying normalisation `L` for the Cauchy regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LSpec {
    /// `L(s) = scale · s^power · (ln s)^log_power`.
    PowerLog {
        scale: f64,
        power: f64,
        #[serde(default)]
        log_power: f64,
    },
    /// Piecewise-linear interpolation through `(s, L(s))` points with increasing `s`.
    Table { points: Vec<(f64, f64)> },
}

impl LSpec {
    pub fn linear() -> Self {
        LSpec::PowerLog { scale: 1.0, power: 1.0, log_power: 0.0 }
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        let v = match self {
            LSpec::PowerLog { scale, power, log_power } => {
                let lg = if *log_power == 0.0 { 1.0 } else { s.ln().powf(*log_power) };
                scale * s.powf(*power) * lg
            }
            LSpec::Table { points } => {
                let k = points.partition_point(|p| p.0 <= s);
                if k == 0 || (k == points.len() && s > points[points.len() - 1].0) {
                    return Err(Error::Invalid(format!("L table does not cover s = {s}")));
                }
                if k == points.len() {
                    points[k - 1].1
                } else {
                    let (a, b) = (points[k - 1], points[k]);
                    a.1 + (b.1 - a.1) * (s - a.0) / (b.0 - a.0)
                }
            }
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Invalid(format!("L({s}) = {v} is not positive")));
        }
        Ok(v)
    }

    fn validate(&self) -> Result<()> {
        if let LSpec::Table { points } = self {
            if points.len() < 2 || points.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::Invalid("L table needs at least two points with increasing s".into()));
            }
        }
        Ok(())
    }

    fn breakpoints(&self, c: f64, t: f64) -> Vec<f64> {
        let mut pts = vec![c];
        if let LSpec::Table { points } = self {
            pts.extend(points.iter().map(|p| p.0).filter(|&s| s > c && s < t));
        }
        pts.push(t);
        pts
    }
}

/// `J(t) = ∫_C^t L(s)/s² ds`, integrated in `u = ln s` with relative accuracy about `1e−10`.
pub fn j_integral(l: &LSpec, c: f64, t: f64) -> Result<f64> {
    l.validate()?;
    if !(c > 0.0 && t >= c) {
        return Err(Error::Invalid(format!("J integral needs 0 < C ≤ t, got C = {c}, t = {t}")));
    }
    let f = |u: f64| -> f64 {
        let s = u.exp();
        l.eval(s).map(|v| v / s).unwrap_or(f64::NAN)
    };
    let pts = l.breakpoints(c, t);
    let mut total = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0].ln(), w[1].ln());
        if b <= a {
            continue;
        }
        let crude = (b - a) * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b)) / 6.0;
        if !crude.is_finite() {
            l.eval(w[0])?;
            l.eval(w[1])?;
            return Err(Error::Invalid("L is not integrable on [C, t]".into()));
        }
        let v = adaptive_simpson(&f, a, b, 1e-12 * crude.abs().max(1e-300))?;
        if !v.is_finite() {
            return Err(Error::Invalid("L is not integrable on [C, t]".into()));
        }
        total += v;
    }
    Ok(total)
}

/// Parameters of one asymptotic regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegimeSpec {
    D1L2 {
        var: f64,
    },
    D1Levy {
        alpha: f64,
        c_plus: f64,
        c_minus: f64,
        l_const: f64,
    },
    D1Cauchy {
        theta: f64,
        zeta: f64,
        l: LSpec,
        #[serde(default = "one")]
        c: f64,
    },
    D2L2 {
        cov: [[f64; 2]; 2],
    },
}

fn one() -> f64 {
    1.0
}

impl RegimeSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            RegimeSpec::D1L2 { var } if !(*var > 0.0) => Err(Error::Config("predict.var: must be positive".into())),
            RegimeSpec::D1Levy { alpha, c_plus, c_minus, l_const } => {
                check_levy(*alpha, *c_plus, *c_minus)?;
                if !(*l_const > 0.0) {
                    return Err(Error::Config("predict.l_const: must be positive".into()));
                }
                Ok(())
            }
            RegimeSpec::D1Cauchy { theta, zeta, l, c } => {
                if !(*theta > 0.0) || !zeta.is_finite() || !(*c > 0.0) {
                    return Err(Error::Config("predict: need theta > 0, finite zeta and C > 0".into()));
                }
                l.validate()
            }
            RegimeSpec::D2L2 { cov } => {
                let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
                if (cov[0][1] - cov[1][0]).abs() > 1e-12 || !(cov[0][0] > 0.0 && det > 0.0) {
                    return Err(Error::Config("predict.cov: must be symmetric positive definite".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn dimension(&self) -> usize {
        if matches!(self, RegimeSpec::D2L2 { .. }) {
            2
        } else {
            1
        }
    }

    /// Prediction at scale `t` for the limiting shape `sigma`.
    pub fn predict(&self, sigma: &[Vec<f64>], t: f64) -> Result<Prediction> {
        self.validate()?;
        let first = |s: &[Vec<f64>]| -> Result<Vec<f64>> {
            if s.iter().any(|p| p.len() != 1) {
                return Err(Error::Invalid("this regime needs one-dimensional sites".into()));
            }
            Ok(s.iter().map(|p| p[0]).collect())
        };
        match self {
            RegimeSpec::D1L2 { var } => predict_d1_l2(*var, &first(sigma)?, t),
            RegimeSpec::D1Levy { alpha, c_plus, c_minus, l_const } => {
                predict_d1_levy(*alpha, *c_plus, *c_minus, *l_const, &first(sigma)?, t)
            }
            RegimeSpec::D1Cauchy { theta, zeta, l, c } => predict_d1_cauchy(*theta, *zeta, l, *c, sigma.len(), t),
            RegimeSpec::D2L2 { cov } => predict_d2_l2(*cov, sigma.len(), t),
        }
    }
}

fn check_levy(alpha: f64, c_plus: f64, c_minus: f64) -> Result<()> {
    if !(alpha > 1.0 && alpha < 2.0) {
        return Err(Error::Invalid(format!("alpha must lie in (1, 2), got {alpha}")));
    }
    if !(c_plus >= 0.0 && c_minus >= 0.0) || c_plus + c_minus == 0.0 {
        return Err(Error::Invalid("c_plus and c_minus must be nonnegative and not both zero".into()));
    }
    Ok(())
}

/// `P ≈ Id − scale·R`, with `S` when the regime goes through a potential matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p: StochasticMatrix,
    pub r: BiLMatrix,
    pub s: Option<PotentialMatrix>,
    pub scale: f64,
    /// `perm[k]` is the index of the `k`-th smallest site (d = 1, L² regime).
    pub perm: Option<Vec<usize>>,
}

fn finish(r: BiLMatrix, scale: f64, s: Option<PotentialMatrix>, perm: Option<Vec<usize>>) -> Result<Prediction> {
    let n = r.n();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let id = if i == j { 1.0 } else { 0.0 };
            let v = id - scale * r.matrix().get(i, j);
            if !(-ENTRY_TOL..=1.0 + ENTRY_TOL).contains(&v) {
                return Err(Error::Invalid(format!(
                    "predicted entry ({i},{j}) = {v:.6} leaves [0, 1]: scale too small for the asymptotic regime"
                )));
            }
            p[i * n + j] = v.clamp(0.0, 1.0);
        }
    }
    let p = StochasticMatrix::new(SquareMatrix::new(n, p)?, true, 1e-12)?;
    Ok(Prediction { p, r, s, scale, perm })
}

/// Tridiagonal bi-L-matrix with `R_{k,k+1} = −1/(2(σ_{k+1} − σ_k))` on increasing `σ`.
pub fn r_d1_l2(sorted: &[f64]) -> Result<BiLMatrix> {
    let n = sorted.len();
    let mut r = DMatrix::zeros(n, n);
    for k in 0..n.saturating_sub(1) {
        let gap = sorted[k + 1] - sorted[k];
        if !(gap > 0.0) {
            return Err(Error::Invalid("sites must be strictly increasing".into()));
        }
        let v = -1.0 / (2.0 * gap);
        r[(k, k + 1)] = v;
        r[(k + 1, k)] = v;
        r[(k, k)] -= v;
        r[(k + 1, k + 1)] -= v;
    }
    BiLMatrix::new(SquareMatrix::from_dmatrix(&r)?, SIGN_TOL)
}

/// `P = Id − (Var/t)·R` in the original site order, sorting internally.
pub fn predict_d1_l2(var: f64, sigma: &[f64], t: f64) -> Result<Prediction> {
    if !(var > 0.0) || !(t > 0.0) {
        return Err(Error::Invalid("need Var > 0 and t > 0".into()));
    }
    if sigma.is_empty() {
        return Err(Error::Invalid("no sites".into()));
    }
    let mut perm: Vec<usize> = (0..sigma.len()).collect();
    perm.sort_by(|&a, &b| sigma[a].partial_cmp(&sigma[b]).unwrap_or(std::cmp::Ordering::Equal));
    let sorted: Vec<f64> = perm.iter().map(|&k| sigma[k]).collect();
    if sorted.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("sites must be distinct".into()));
    }
    let rs = r_d1_l2(&sorted)?;
    let n = sigma.len();
    let mut r = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            r[perm[a] * n + perm[b]] = rs.matrix().get(a, b);
        }
    }
    let r = BiLMatrix::new(SquareMatrix::new(n, r)?, SIGN_TOL)?;
    finish(r, var / t, None, Some(perm))
}

/// `⟨f, S g⟩ = c Σ f_i g_j |σ_i − σ_j|^{α−1}(c₊[σ_j > σ_i] + c₋[σ_j < σ_i])`,
/// `c = sin(απ)/(π(c₊² + c₋² + 2c₊c₋cos απ))`, in the pivot basis.
pub fn levy_potential_s(alpha: f64, c_plus: f64, c_minus: f64, sigma: &[f64]) -> Result<PotentialMatrix> {
    check_levy(alpha, c_plus, c_minus)?;
    let n = sigma.len();
    for i in 0..n {
        if sigma[i + 1..].contains(&sigma[i]) || !sigma[i].is_finite() {
            return Err(Error::Invalid("sites must be distinct and finite".into()));
        }
    }
    let c = (alpha * PI).sin() / (PI * (c_plus * c_plus + c_minus * c_minus + 2.0 * c_plus * c_minus * (alpha * PI).cos()));
    let kernel = DMatrix::from_fn(n, n, |i, j| {
        let dir = if sigma[j] > sigma[i] {
            c_plus
        } else if sigma[j] < sigma[i] {
            c_minus
        } else {
            0.0
        };
        c * (sigma[i] - sigma[j]).abs().powf(alpha - 1.0) * dir
    });
    PotentialMatrix::from_kernel(ZeroSumBasis::pivot(n), &kernel)
}

/// `P = Id − (t/L(t))·R` with `R = S⁻¹` on zero-sum vectors and `L(t) = L_const·t^α`.
pub fn predict_d1_levy(alpha: f64, c_plus: f64, c_minus: f64, l_const: f64, sigma: &[f64], t: f64) -> Result<Prediction> {
    if !(l_const > 0.0 && t > 0.0) {
        return Err(Error::Invalid("need L_const > 0 and t > 0".into()));
    }
    let s = levy_potential_s(alpha, c_plus, c_minus, sigma)?;
    let r = bil_from_potential(&s, SIGN_TOL)?;
    let scale = t / (l_const * t.powf(alpha));
    finish(r, scale, Some(s), None)
}

/// Diagonal `(n−1)/n`, off-diagonal `−1/n`.
pub fn r_uniform(n: usize) -> Result<BiLMatrix> {
    if n == 0 {
        return Err(Error::Invalid("no sites".into()));
    }
    let m = DMatrix::from_fn(n, n, |i, j| if i == j { (n as f64 - 1.0) / n as f64 } else { -1.0 / n as f64 });
    BiLMatrix::new(SquareMatrix::from_dmatrix(&m)?, SIGN_TOL)
}

/// `P = Id − (π𝜗(1+ζ²)/J(t))·R_uniform`.
pub fn predict_d1_cauchy(theta: f64, zeta: f64, l: &LSpec, c: f64, n: usize, t: f64) -> Result<Prediction> {
    if !(theta > 0.0) {
        return Err(Error::Invalid("theta must be positive".into()));
    }
    let j = j_integral(l, c, t)?;
    if !(j > 0.0) {
        return Err(Error::Invalid(format!("J(t) = {j} is not positive")));
    }
    finish(r_uniform(n)?, PI * theta * (1.0 + zeta * zeta) / j, None, None)
}

/// `P = Id − (π√det Cov / ln t)·R_uniform`.
pub fn predict_d2_l2(cov: [[f64; 2]; 2], n: usize, t: f64) -> Result<Prediction> {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    if !(cov[0][0] > 0.0 && det > 0.0) || (cov[0][1] - cov[1][0]).abs() > 1e-12 {
        return Err(Error::Invalid("covariance must be symmetric positive definite".into()));
    }
    if !(t > 1.0) {
        return Err(Error::Invalid("t must exceed 1".into()));
    }
    finish(r_uniform(n)?, PI * det.sqrt() / t.ln(), None, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn d1_l2_examples() {
        let p = predict_d1_l2(1.0, &[0.0, 1.0], 50.0).unwrap();
        assert!(close(p.p.get(0, 1), 0.01, 1e-15));
        let p = predict_d1_l2(1.0, &[-1.0, 0.0, 2.0], 10.0).unwrap();
        let r = p.r.matrix();
        assert!(close(r.get(0, 1), -0.5, 1e-15) && close(r.get(1, 2), -0.25, 1e-15) && r.get(0, 2) == 0.0);
        assert_eq!(predict_d1_l2(1.0, &[3.0], 1.0).unwrap().p.get(0, 0), 1.0);
        assert!(predict_d1_l2(1.0, &[0.0, 1.0], 0.1).is_err());
        assert!(predict_d1_l2(1.0, &[0.0, 0.0], 10.0).is_err());
    }

    #[test]
    fn d1_l2_sorts_internally() {
        let a = predict_d1_l2(2.5, &[2.0, -1.0, 0.0], 40.0).unwrap();
        let b = predict_d1_l2(2.5, &[-1.0, 0.0, 2.0], 40.0).unwrap();
        assert_eq!(a.perm, Some(vec![1, 2, 0]));
        let perm = [1, 2, 0];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.p.get(perm[i], perm[j]), b.p.get(i, j));
            }
        }
    }

    #[test]
    fn levy_s_example() {
        // Basis {1_C − 1_B, 1_B − 1_A} for σ = (−1, 0, 1).
        let basis = ZeroSumBasis::from_rows(&[vec![0.0, -1.0, 1.0], vec![-1.0, 1.0, 0.0]]).unwrap();
        for alpha in [1.2, 1.5, 1.8] {
            let s = levy_potential_s(alpha, 1.0, 0.0, &[-1.0, 0.0, 1.0]).unwrap().in_basis(&basis).unwrap();
            let k = (alpha * PI).sin().abs() / (3.0 * PI);
            let want = [k * 2f64.powf(alpha - 1.0), k, k * (2f64.powf(alpha) - 3.0), 2.0 * k];
            for (g, w) in s.entries().iter().zip(want) {
                assert!(close(*g, w, 1e-14), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn levy_symmetry() {
        let s = levy_potential_s(1.4, 0.7, 0.7, &[-2.0, 0.5, 3.0]).unwrap();
        let g = s.gram();
        assert!((g.clone() - g.transpose()).amax() < 1e-14);
        let s = levy_potential_s(1.4, 1.0, 0.2, &[-2.0, 0.5, 3.0]).unwrap();
        let g = s.gram();
        assert!((g.clone() - g.transpose()).amax() > 1e-3);
    }

    #[test]
    fn levy_asymmetric_r_at_three_halves() {
        let p = predict_d1_levy(1.5, 1.0, 0.0, 1.0, &[-1.0, 0.0, 1.0], 1e6).unwrap();
        let r2 = 2f64.sqrt();
        let want = [[1.0, -(r2 - 1.0), -(2.0 - r2)], [-1.0, r2, -(r2 - 1.0)], [0.0, -1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!(close(p.r.matrix().get(i, j), PI * want[i][j], 1e-10));
            }
        }
        assert_eq!(p.r.matrix().get(2, 0), 0.0);
        assert!(close(p.scale, 1e-3, 1e-15));
    }

    #[test]
    fn levy_quadratic_form_near_two() {
        let sigma = [-3.0, 0.0, 1.0, 5.0];
        let spread = |alpha: f64| {
            let s = levy_potential_s(alpha, 1.0, 0.5, &sigma).unwrap();
            let mut ratios = Vec::new();
            for i in 0..4 {
                for j in i + 1..4 {
                    let mut f = vec![0.0; 4];
                    f[i] = 1.0;
                    f[j] = -1.0;
                    ratios.push(s.bilinear(&f, &f) / (sigma[i] - sigma[j]).abs());
                }
            }
            let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
            assert!(lo > 0.0);
            hi / lo
        };
        let (a, b) = (spread(1.99), spread(1.999));
        assert!(b < a && b < 1.003, "{a} {b}");
    }

    #[test]
    fn cauchy_examples() {
        let p = predict_d1_cauchy(0.5, 0.3, &LSpec::linear(), 1.0, 3, 1e4).unwrap();
        let want = PI * 0.5 * 1.09 / (3.0 * 1e4f64.ln());
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(close(p.p.get(i, j), want, 1e-14));
                }
            }
        }
        assert_eq!(predict_d1_cauchy(0.5, 0.3, &LSpec::linear(), 1.0, 1, 1e4).unwrap().p.get(0, 0), 1.0);
        let a = |t: f64| predict_d1_cauchy(0.5, 0.0, &LSpec::linear(), 2.0, 2, t).unwrap().p.get(0, 1);
        let t = 1e50;
        assert!((a(t) / a(t * t) - 2.0).abs() < 0.02);
    }

    #[test]
    fn d2_examples() {
        let p = predict_d2_l2([[0.5, 0.0], [0.0, 0.5]], 3, 64.0).unwrap();
        assert!(close(p.p.get(0, 1), PI * 0.5 / (3.0 * 64f64.ln()), 1e-15));
        let p = predict_d2_l2([[1.0, 0.0], [0.0, 1.0]], 3, std::f64::consts::E).unwrap_err();
        assert!(matches!(p, Error::Invalid(_)));
        let p = predict_d2_l2([[0.5, 0.0], [0.0, 0.5]], 2, 100.0).unwrap();
        assert!(close(p.p.get(0, 1), PI * 0.5 / (2.0 * 100f64.ln()), 1e-15));
    }

    #[test]
    fn j_integral_examples() {
        assert!(close(j_integral(&LSpec::linear(), 2.0, 100.0).unwrap(), (50f64).ln(), 1e-12));
        let l = LSpec::PowerLog { scale: 1.0, power: 1.0, log_power: 1.0 };
        let want = (100f64.ln().powi(2) - 2f64.ln().powi(2)) / 2.0;
        assert!(((j_integral(&l, 2.0, 100.0).unwrap() - want) / want).abs() < 1e-8);
        assert!(j_integral(&LSpec::linear(), 5.0, 2.0).is_err());
        let bad = LSpec::PowerLog { scale: -1.0, power: 1.0, log_power: 0.0 };
        assert!(j_integral(&bad, 1.0, 2.0).is_err());
    }

    #[test]
    fn j_integral_table_matches_trapezoid() {
        let points: Vec<(f64, f64)> = (0..=20).map(|k| (1.0 + k as f64, (1.0 + k as f64) * (2.0 + (k as f64).sin()))).collect();
        let l = LSpec::Table { points: points.clone() };
        let got = j_integral(&l, 1.0, 21.0).unwrap();
        // Trapezoid oracle on a fine grid: error O(h²) on each linear piece divided by s².
        let oracle = |m: usize| {
            let h = 20.0 / m as f64;
            let f = |s: f64| l.eval(s).unwrap() / (s * s);
            (0..m).map(|k| 0.5 * h * (f(1.0 + k as f64 * h) + f(1.0 + (k + 1) as f64 * h))).sum::<f64>()
        };
        let (a, b) = (oracle(1 << 16), oracle(1 << 17));
        let extrapolated = (4.0 * b - a) / 3.0;
        assert!(((got - extrapolated) / got).abs() < 1e-8, "{got} vs {extrapolated}");
    }

    #[test]
    fn predictions_are_bistochastic() {
        let sigma = [-2.0, 0.0, 1.0, 4.0];
        for p in [
            predict_d1_l2(1.0, &sigma, 100.0).unwrap(),
            predict_d1_levy(1.3, 1.0, 0.4, 1.0, &sigma, 1e4).unwrap(),
            predict_d2_l2([[1.0, 0.2], [0.2, 0.6]], 4, 1e3).unwrap(),
        ] {
            assert!(p.p.is_bistochastic());
        }
    }
}
