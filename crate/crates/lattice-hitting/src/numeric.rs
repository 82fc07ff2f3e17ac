//! Small numerical helpers shared across modules.

use crate::error::{Error, Result};

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Value at `x = 0` of the interpolating polynomial through `(xs[k], ys[k])` (Neville).
pub fn neville_at_zero(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::Invalid("extrapolation needs matching, nonempty abscissae and values".into()));
    }
    let m = xs.len();
    let mut p = ys.to_vec();
    for k in 1..m {
        for i in 0..m - k {
            let denom = xs[i + k] - xs[i];
            if denom == 0.0 {
                return Err(Error::Invalid("repeated extrapolation abscissa".into()));
            }
            p[i] = (xs[i + k] * p[i] - xs[i] * p[i + 1]) / denom;
        }
    }
    Ok(p[0])
}

pub fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

/// Adaptive Simpson quadrature on `[a, b]` with absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> Result<f64> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if !delta.is_finite() {
            return Err(Error::Numerical("non-finite integrand".into()));
        }
        if depth == 0 {
            return Err(Error::NoConvergence("adaptive quadrature depth exhausted".into()));
        }
        if delta.abs() <= 15.0 * tol {
            return Ok(left + right + delta / 15.0);
        }
        Ok(rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)? + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Strong connectivity of the directed graph given by adjacency lists.
pub fn strongly_connected(adj: &[Vec<usize>]) -> bool {
    let n = adj.len();
    if n == 0 {
        return false;
    }
    let reach = |adj: &[Vec<usize>]| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    let mut rev = vec![Vec::new(); n];
    for (u, vs) in adj.iter().enumerate() {
        for &v in vs {
            rev[v].push(u);
        }
    }
    reach(adj) && reach(&rev)
}


/// Square band matrix with equal lower and upper bandwidth `b`, factored in place without pivoting.
///
/// Intended for diagonally dominant M-matrices (absorbing-chain systems), where no pivoting is needed.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    b: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, b: usize) -> Self {
        Self { n, b, data: vec![0.0; n * (2 * b + 1)] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.b, "entry outside band");
        i * (2 * self.b + 1) + (j + self.b - i)
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.slot(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.b {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    /// Solves `A X = B` for a row-major right-hand side with `m` columns, consuming `self`.
    pub fn solve(mut self, rhs: &mut [f64], m: usize) -> Result<()> {
        let (n, b) = (self.n, self.b);
        if rhs.len() != n * m {
            return Err(Error::Invalid("right-hand side has the wrong size".into()));
        }
        for k in 0..n {
            let pivot = self.data[self.slot(k, k)];
            if !(pivot.abs() > 1e-300) {
                return Err(Error::Singular(format!("zero pivot at row {k} of band system")));
            }
            let hi = (k + b + 1).min(n);
            for i in k + 1..hi {
                let sik = self.slot(i, k);
                let l = self.data[sik] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.data[sik] = l;
                for j in k + 1..hi {
                    let skj = self.slot(k, j);
                    let sij = self.slot(i, j);
                    self.data[sij] -= l * self.data[skj];
                }
                for c in 0..m {
                    rhs[i * m + c] -= l * rhs[k * m + c];
                }
            }
        }
        for k in (0..n).rev() {
            let hi = (k + b + 1).min(n);
            for j in k + 1..hi {
                let a = self.data[self.slot(k, j)];
                if a != 0.0 {
                    for c in 0..m {
                        rhs[k * m + c] -= a * rhs[j * m + c];
                    }
                }
            }
            let pivot = self.data[self.slot(k, k)];
            for c in 0..m {
                rhs[k * m + c] /= pivot;
            }
        }
        Ok(())
    }
}
