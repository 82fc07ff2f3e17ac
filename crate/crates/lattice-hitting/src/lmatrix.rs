//! Bi-L-matrices, stochastic matrices, potential matrices on zero-sum vectors,
//! and the conversions between them.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::strongly_connected;

/// Default tolerance for matrices derived from exact arithmetic.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Dense square real matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("matrix dimension must be at least 1".into()));
        }
        if entries.len() != n * n {
            return Err(Error::Invalid(format!("expected {} entries for a {n}x{n} matrix, got {}", n * n, entries.len())));
        }
        if let Some(k) = entries.iter().position(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!("non-finite entry at ({}, {})", k / n, k % n)));
        }
        Ok(Self { n, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Invalid("rows must all have length equal to the row count".into()));
        }
        Self::new(n, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_dmatrix(&DMatrix::identity(n, n)).expect("identity is finite")
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, entries: vec![0.0; n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.entries)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Invalid("matrix is not square".into()));
        }
        let n = m.nrows();
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                entries.push(m[(i, j)]);
            }
        }
        Self::new(n, entries)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.entries.chunks(self.n).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.n).map(|j| (0..self.n).map(|i| self.get(i, j)).sum()).collect()
    }

    /// Max-entry norm.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &SquareMatrix) -> f64 {
        assert_eq!(self.n, other.n, "dimension mismatch");
        self.entries.iter().zip(&other.entries).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn to_record(&self, kind: &str, tol: f64) -> MatrixRecord {
        MatrixRecord { n: self.n, entries: self.entries.clone(), kind: kind.to_string(), tol }
    }

    /// One matrix row per line, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.entries.chunks(self.n) {
            let cells: Vec<String> = row.iter().map(|x| fmt17(*x)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Invalid(format!("bad CSV cell {c:?}: {e}"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(&rows)
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serialized form shared by all matrix kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixRecord {
    pub n: usize,
    pub entries: Vec<f64>,
    pub kind: String,
    pub tol: f64,
}

impl MatrixRecord {
    pub fn to_matrix(&self) -> Result<SquareMatrix> {
        SquareMatrix::new(self.n, self.entries.clone())
    }
}

/// Square matrix with nonnegative diagonal, nonpositive off-diagonal and zero row and column sums.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLMatrix {
    inner: SquareMatrix,
    tol: f64,
}

impl BiLMatrix {
    pub fn new(inner: SquareMatrix, tol: f64) -> Result<Self> {
        let v = bil_violation(&inner);
        if v > tol {
            return Err(Error::SignPattern { violation: v, context: "not a bi-L-matrix".into() });
        }
        Ok(Self { inner, tol })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(SquareMatrix::from_rows(rows)?, DEFAULT_TOL)
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.inner
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn n(&self) -> usize {
        self.inner.n
    }

    pub fn to_record(&self) -> MatrixRecord {
        self.inner.to_record("bi_l", self.tol)
    }

    pub fn from_record(rec: &MatrixRecord) -> Result<Self> {
        Self::new(rec.to_matrix()?, rec.tol)
    }
}

/// Largest amount by which `m` fails the bi-L sign and sum conditions.
fn bil_violation(m: &SquareMatrix) -> f64 {
    let n = m.n;
    let mut v: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = m.get(i, j);
            v = v.max(if i == j { -x } else { x });
        }
    }
    for s in m.row_sums().into_iter().chain(m.col_sums()) {
        v = v.max(s.abs());
    }
    v
}

/// Row-stochastic (optionally bi-stochastic) matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticMatrix {
    inner: SquareMatrix,
    bistochastic: bool,
    tol: f64,
}

impl StochasticMatrix {
    pub fn new(inner: SquareMatrix, bistochastic: bool, tol: f64) -> Result<Self> {
        let v = stochastic_violation(&inner, bistochastic);
        if v > tol {
            return Err(Error::Numerical(format!(
                "not a {}stochastic matrix (violation {v:.3e}, tol {tol:.1e})",
                if bistochastic { "bi-" } else { "" }
            )));
        }
        Ok(Self { inner, bistochastic, tol })
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.inner
    }

    pub fn is_bistochastic(&self) -> bool {
        self.bistochastic
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn n(&self) -> usize {
        self.inner.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner.get(i, j)
    }

    pub fn to_record(&self) -> MatrixRecord {
        self.inner.to_record(if self.bistochastic { "bistochastic" } else { "stochastic" }, self.tol)
    }

    pub fn from_record(rec: &MatrixRecord) -> Result<Self> {
        let bistochastic = match rec.kind.as_str() {
            "bistochastic" => true,
            "stochastic" => false,
            k => return Err(Error::Invalid(format!("unexpected matrix kind {k:?}"))),
        };
        Self::new(rec.to_matrix()?, bistochastic, rec.tol)
    }
}

fn stochastic_violation(m: &SquareMatrix, bistochastic: bool) -> f64 {
    let mut v: f64 = 0.0;
    for &x in &m.entries {
        v = v.max(-x).max(x - 1.0);
    }
    for s in m.row_sums() {
        v = v.max((s - 1.0).abs());
    }
    if bistochastic {
        for s in m.col_sums() {
            v = v.max((s - 1.0).abs());
        }
    }
    v
}

/// Vector whose entries sum to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroSumVector(Vec<f64>);

impl ZeroSumVector {
    pub fn new(values: Vec<f64>, tol: f64) -> Result<Self> {
        let s: f64 = values.iter().sum();
        if s.abs() > tol {
            return Err(Error::Invalid(format!("vector sums to {s:.3e}, not zero")));
        }
        Ok(Self(values))
    }

    /// `1_i - 1_j` in dimension `n`.
    pub fn difference(n: usize, i: usize, j: usize) -> Self {
        let mut v = vec![0.0; n];
        v[i] += 1.0;
        v[j] -= 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Basis of the zero-sum subspace, stored as the columns of an `n × (n-1)` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroSumBasis {
    n: usize,
    vectors: Vec<Vec<f64>>,
}

impl ZeroSumBasis {
    /// `1_{k} - 1_{0}` for `k = 1..n`.
    pub fn pivot(n: usize) -> Self {
        let vectors = (1..n).map(|k| ZeroSumVector::difference(n, k, 0).0).collect();
        Self { n, vectors }
    }

    pub fn new(vectors: Vec<ZeroSumVector>) -> Result<Self> {
        let n = vectors.first().map(|v| v.0.len()).unwrap_or(1);
        if vectors.len() + 1 != n || vectors.iter().any(|v| v.0.len() != n) {
            return Err(Error::Invalid(format!(
                "a basis of zero-sum vectors in dimension {n} needs {} vectors of length {n}",
                n.saturating_sub(1)
            )));
        }
        let basis = Self { n, vectors: vectors.into_iter().map(|v| v.0).collect() };
        let e = basis.matrix();
        let sv = (e.transpose() * &e).symmetric_eigenvalues();
        let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
        if !(lo > 1e-12 * hi) {
            return Err(Error::Invalid("basis vectors are not linearly independent".into()));
        }
        Ok(basis)
    }

    pub fn from_rows(vectors: &[Vec<f64>]) -> Result<Self> {
        let vs = vectors.iter().map(|v| ZeroSumVector::new(v.clone(), DEFAULT_TOL)).collect::<Result<Vec<_>>>()?;
        Self::new(vs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// The `n × (n-1)` matrix `E` whose columns are the basis vectors.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.vectors.len(), |i, k| self.vectors[k][i])
    }

    /// `(EᵀE)⁻¹Eᵀ`: coordinates of the orthogonal projection onto the zero-sum subspace.
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        let e = self.matrix();
        let gram = e.transpose() * &e;
        let inv = gram.try_inverse().expect("basis Gram matrix is invertible by construction");
        inv * e.transpose()
    }

    /// Coordinates of (the zero-sum projection of) `f`.
    pub fn coords(&self, f: &[f64]) -> Vec<f64> {
        let c = self.pseudo_inverse() * nalgebra::DVector::from_column_slice(f);
        c.iter().copied().collect()
    }
}

/// Operator on zero-sum vectors, as a matrix in a recorded basis: `S e_j = Σ_i X_ij e_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialMatrix {
    basis: ZeroSumBasis,
    entries: Vec<f64>,
}

impl PotentialMatrix {
    pub fn new(basis: ZeroSumBasis, entries: Vec<f64>) -> Result<Self> {
        let m = basis.dim();
        if entries.len() != m * m {
            return Err(Error::Invalid(format!("expected {} entries, got {}", m * m, entries.len())));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("non-finite potential entry".into()));
        }
        Ok(Self { basis, entries })
    }

    pub fn from_operator(basis: ZeroSumBasis, x: &DMatrix<f64>) -> Result<Self> {
        let m = basis.dim();
        let entries = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| x[(i, j)]).collect();
        Self::new(basis, entries)
    }

    /// Builds the operator from its bilinear form on the basis, `G_ij = ⟨e_i, S e_j⟩`.
    pub fn from_gram(basis: ZeroSumBasis, gram: &DMatrix<f64>) -> Result<Self> {
        let e = basis.matrix();
        let ete = e.transpose() * &e;
        let x = ete.lu().solve(gram).ok_or_else(|| Error::Singular("basis Gram matrix".into()))?;
        Self::from_operator(basis, &x)
    }

    /// Builds the operator from a kernel `k(i, j)` with `⟨f, S g⟩ = Σ f_i k(i,j) g_j`.
    pub fn from_kernel(basis: ZeroSumBasis, kernel: &DMatrix<f64>) -> Result<Self> {
        let e = basis.matrix();
        let gram = e.transpose() * kernel * &e;
        Self::from_gram(basis, &gram)
    }

    pub fn basis(&self) -> &ZeroSumBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.n()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn operator(&self) -> DMatrix<f64> {
        let m = self.basis.dim();
        DMatrix::from_row_slice(m, m, &self.entries)
    }

    /// `⟨e_i, S e_j⟩` on the basis vectors.
    pub fn gram(&self) -> DMatrix<f64> {
        let e = self.basis.matrix();
        e.transpose() * &e * self.operator()
    }

    /// `⟨f, S g⟩` for zero-sum `f`, `g` (other inputs are projected first).
    pub fn bilinear(&self, f: &[f64], g: &[f64]) -> f64 {
        let e = self.basis.matrix();
        let cg = nalgebra::DVector::from_vec(self.basis.coords(g));
        let sg = &e * (self.operator() * cg);
        f.iter().zip(sg.iter()).map(|(a, b)| a * b).sum()
    }

    /// Same operator expressed in another basis.
    pub fn in_basis(&self, other: &ZeroSumBasis) -> Result<Self> {
        if other.n() != self.basis.n() {
            return Err(Error::Invalid("basis dimension mismatch".into()));
        }
        let x = other.pseudo_inverse() * self.basis.matrix() * self.operator() * self.basis.pseudo_inverse() * other.matrix();
        Self::from_operator(other.clone(), &x)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

fn l_pattern_graph(m: &SquareMatrix, tol: f64) -> Vec<Vec<usize>> {
    let n = m.n();
    (0..n).map(|i| (0..n).filter(|&j| j != i && m.get(i, j) < -tol).collect()).collect()
}

/// Strong connectivity of the graph with an edge `i → j` whenever `R_ij < -tol`.
pub fn is_irreducible_l(r: &BiLMatrix) -> Result<bool> {
    if r.n() == 0 {
        return Err(Error::Invalid("dimension 0".into()));
    }
    Ok(strongly_connected(&l_pattern_graph(r.matrix(), r.tol())))
}

/// Probability vector `ν` with `νR = 0` for an irreducible L-matrix (zero row sums).
pub fn stationary_vector(r: &SquareMatrix, tol: f64) -> Result<Vec<f64>> {
    let n = r.n();
    let mut v: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = r.get(i, j);
            v = v.max(if i == j { -x } else { x });
        }
    }
    for s in r.row_sums() {
        v = v.max(s.abs());
    }
    if v > tol {
        return Err(Error::SignPattern { violation: v, context: "not an L-matrix".into() });
    }
    if !strongly_connected(&l_pattern_graph(r, tol)) {
        return Err(Error::Reducible("L-matrix graph is not strongly connected".into()));
    }
    let mut a = r.to_dmatrix().transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = nalgebra::DVector::zeros(n);
    b[n - 1] = 1.0;
    let nu = a.lu().solve(&b).ok_or_else(|| Error::Singular("stationary vector solve".into()))?;
    if nu.iter().any(|x| !x.is_finite() || *x < -tol) {
        return Err(Error::Numerical("stationary vector has negative entries".into()));
    }
    Ok(nu.iter().map(|x| x.max(0.0)).collect())
}

/// Matrix of `R` acting on zero-sum vectors, in the given basis.
pub fn restrict_to_zero_sum(r: &BiLMatrix, basis: &ZeroSumBasis) -> Result<PotentialMatrix> {
    if basis.n() != r.n() {
        return Err(Error::Invalid("basis dimension does not match matrix".into()));
    }
    let x = basis.pseudo_inverse() * r.matrix().to_dmatrix() * basis.matrix();
    PotentialMatrix::from_operator(basis.clone(), &x)
}

fn checked_inverse(x: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if x.nrows() == 0 {
        return Ok(x.clone());
    }
    let sv = x.clone().singular_values();
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &s| (l.min(s), h.max(s)));
    if !(hi > 0.0) || lo <= 1e-13 * hi {
        return Err(Error::Singular(format!("{what} (singular values in [{lo:.3e}, {hi:.3e}])")));
    }
    x.clone().try_inverse().ok_or_else(|| Error::Singular(what.to_string()))
}

/// `S = R₀⁻¹` in the pivot-difference basis.
pub fn potential_from_l(r: &BiLMatrix) -> Result<PotentialMatrix> {
    let r0 = restrict_to_zero_sum(r, &ZeroSumBasis::pivot(r.n()))?;
    let s = checked_inverse(&r0.operator(), "restricted L-matrix R₀")?;
    PotentialMatrix::from_operator(r0.basis().clone(), &s)
}

/// The unique bi-L-matrix `R = S⁻¹ ∘ π`, with `π` the projection onto zero-sum vectors along constants.
///
/// Sign-pattern violations up to `tol` are clamped; larger ones are errors.
pub fn bil_from_potential(s: &PotentialMatrix, tol: f64) -> Result<BiLMatrix> {
    let basis = s.basis();
    let n = basis.n();
    if n == 1 {
        return BiLMatrix::new(SquareMatrix::zeros(1), tol);
    }
    let xinv = checked_inverse(&s.operator(), "potential matrix")?;
    let mut r = basis.matrix() * xinv * basis.pseudo_inverse();
    let mut violation: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = r[(i, j)];
            let bad = if i == j { -x } else { x };
            violation = violation.max(bad);
        }
    }
    if violation > tol {
        return Err(Error::SignPattern { violation, context: "inverse potential is not a bi-L-matrix".into() });
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                r[(i, j)] = r[(i, j)].max(0.0);
            } else {
                r[(i, j)] = r[(i, j)].min(0.0);
            }
        }
    }
    BiLMatrix::new(SquareMatrix::from_dmatrix(&r)?, tol)
}

/// `⟨1_i - 1_j, S(1_i - 1_j)⟩ > tol` for every pair `i ≠ j`.
pub fn is_irreducible_potential(s: &PotentialMatrix, tol: f64) -> bool {
    let n = s.dim();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = ZeroSumVector::difference(n, i, j);
                if !(s.bilinear(v.values(), v.values()) > tol) {
                    return false;
                }
            }
        }
    }
    true
}

/// `e^{-tR}` by scaling and squaring with a truncated Taylor series.
pub fn matrix_exponential(r: &SquareMatrix, t: f64) -> Result<SquareMatrix> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Invalid(format!("t must be finite and nonnegative, got {t}")));
    }
    let n = r.n();
    let a = r.to_dmatrix() * (-t);
    let norm = (0..n).map(|j| (0..n).map(|i| a[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max);
    if norm > 1e6 {
        return Err(Error::Numerical(format!("t·‖R‖ = {norm:.3e} is too large for the exponential")));
    }
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let a = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=24 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    if sum.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("overflow in matrix exponential".into()));
    }
    SquareMatrix::from_dmatrix(&sum)
}

/// `∏_{k < ⌊t/ε⌋} (Id - εR + R_{ε,k})`, multiplied left to right.
///
/// `perturbation(k)` returns `R_{ε,k}`; `None` means zero.
pub fn perturbation_product<F>(r: &SquareMatrix, eps: f64, t: f64, mut perturbation: F) -> Result<SquareMatrix>
where
    F: FnMut(usize) -> Option<SquareMatrix>,
{
    if !(eps > 0.0) || !(t >= 0.0) {
        return Err(Error::Invalid("need ε > 0 and t ≥ 0".into()));
    }
    let n = r.n();
    let steps = (t / eps * (1.0 + 1e-12)).floor() as usize;
    let base = DMatrix::identity(n, n) - r.to_dmatrix() * eps;
    let mut prod = DMatrix::identity(n, n);
    for k in 0..steps {
        match perturbation(k) {
            Some(p) => {
                if p.n() != n {
                    return Err(Error::Invalid("perturbation dimension mismatch".into()));
                }
                prod = &prod * (&base + p.to_dmatrix());
            }
            None => prod = &prod * &base,
        }
    }
    SquareMatrix::from_dmatrix(&prod)
}

pub fn eigenvalues(m: &SquareMatrix) -> Vec<Complex64> {
    m.to_dmatrix().complex_eigenvalues().iter().copied().collect()
}

/// Whether 0 is a simple eigenvalue of `R` and every other eigenvalue has real part above `tol`.
pub fn has_l_spectrum(r: &SquareMatrix, tol: f64) -> bool {
    let ev = eigenvalues(r);
    let zeros = ev.iter().filter(|z| z.norm() < tol).count();
    zeros == 1 && ev.iter().filter(|z| z.norm() >= tol).all(|z| z.re > tol)
}

/// Random irreducible bi-L-matrix built from weighted directed cycles.
pub fn sample_irreducible_bil<R: Rng + ?Sized>(n: usize, rng: &mut R) -> BiLMatrix {
    let mut w = DMatrix::<f64>::zeros(n, n);
    let add_cycle = |nodes: &[usize], weight: f64, w: &mut DMatrix<f64>| {
        for k in 0..nodes.len() {
            let (a, b) = (nodes[k], nodes[(k + 1) % nodes.len()]);
            if a != b {
                w[(a, b)] += weight;
            }
        }
    };
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    if n > 1 {
        add_cycle(&perm, rng.gen_range(0.1..2.0), &mut w);
        for _ in 0..rng.gen_range(0..=n) {
            let len = rng.gen_range(2..=n);
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            add_cycle(&perm[..len], rng.gen_range(0.1..2.0), &mut w);
        }
    }
    let mut r = -w.clone();
    for i in 0..n {
        r[(i, i)] = w.row(i).sum();
    }
    BiLMatrix::new(SquareMatrix::from_dmatrix(&r).expect("finite"), DEFAULT_TOL).expect("cycle sums are balanced")
}
