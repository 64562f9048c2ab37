//! Small dense linear algebra for state-space analysis.
//!
//! Everything here is hand-rolled on purpose: the eigensolver must be
//! deterministic for identical inputs (fixed cyclic sweep order, fixed sign
//! convention) so that downstream subspace constructions are reproducible
//! byte-for-byte across runs and platforms.

use crate::tol;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    /// Input matrix is non-finite, non-square, or asymmetric beyond tolerance.
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    /// Jacobi did not reach the off-diagonal target within the sweep cap.
    #[error("eigensolver did not converge within {0} sweeps")]
    NoConvergence(usize),
    /// Supplied columns are not orthonormal within tolerance.
    #[error("columns not orthonormal: {0}")]
    NotOrthonormal(String),
    /// Too few samples to form the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

// ---------------------------------------------------------------------------
// vector helpers

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// ℓ1 distance between two equal-length vectors.
pub fn l1_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], k: f64) -> Vec<f64> {
    a.iter().map(|x| x * k).collect()
}

// ---------------------------------------------------------------------------
// symmetric matrices

/// Dense symmetric matrix, stored row-major with exact symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    a: Vec<f64>,
}

impl SymMatrix {
    /// Build from rows. Inputs must be square, finite, and symmetric within
    /// [`tol::SYMMETRY`]; construction then symmetrizes exactly by averaging.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let n = rows.len();
        if n == 0 {
            return Err(LinalgError::InvalidMatrix("empty matrix".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(LinalgError::InvalidMatrix(format!(
                    "row {i} has length {} in a {n}x{n} matrix",
                    r.len()
                )));
            }
        }
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let x = rows[i][j];
                let y = rows[j][i];
                if !x.is_finite() {
                    return Err(LinalgError::InvalidMatrix(format!(
                        "non-finite entry at ({i},{j})"
                    )));
                }
                if (x - y).abs() > tol::SYMMETRY {
                    return Err(LinalgError::InvalidMatrix(format!(
                        "asymmetric at ({i},{j}): {x} vs {y}"
                    )));
                }
                a[i * n + j] = 0.5 * (x + y);
            }
        }
        Ok(Self { n, a })
    }

    /// Zero matrix of dimension `n`.
    pub fn zeros(n: usize) -> Self {
        Self { n, a: vec![0.0; n * n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| dot(&self.a[i * self.n..(i + 1) * self.n], x))
            .collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Rows as owned vectors (testing / reporting convenience).
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| self.a[i * self.n..(i + 1) * self.n].to_vec())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// eigendecomposition (cyclic Jacobi)

/// Result of [`sym_eig`]: eigenvalues sorted non-increasing with matching
/// orthonormal eigenvectors (each stored as one `Vec<f64>` column).
#[derive(Debug, Clone)]
pub struct Eigensystem {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

impl Eigensystem {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Projector onto the span of eigenvectors `range` (by sorted position).
    pub fn projector_onto(&self, range: std::ops::Range<usize>) -> Projector {
        let cols: Vec<&[f64]> = self.vectors[range].iter().map(|v| v.as_slice()).collect();
        Projector::from_orthonormal_columns(self.dim(), &cols)
            .expect("eigenvectors are orthonormal by construction")
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Deterministic for identical input: sweeps visit (p, q) pairs in a fixed
/// order, eigenpairs are sorted by non-increasing eigenvalue with ties kept
/// in original column order, and each eigenvector is sign-fixed so its first
/// component larger than [`tol::SIGN_EPS`] in magnitude is positive.
pub fn sym_eig(m: &SymMatrix) -> Result<Eigensystem, LinalgError> {
    let n = m.n;
    let mut a = m.a.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale_ref = m
        .a
        .iter()
        .fold(0.0f64, |acc, x| acc.max(x.abs()))
        .max(1.0);

    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += a[p * n + q] * a[p * n + q];
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    for _sweep in 0..tol::JACOBI_MAX_SWEEPS {
        if off(&a) <= tol::JACOBI_OFF_TOL * scale_ref {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                // Classic two-sided rotation choosing the smaller angle root.
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                let app = a[p * n + p];
                let aqq = a[q * n + q];
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    if k != p && k != q {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = akp - s * (akq + tau * akp);
                        a[p * n + k] = a[k * n + p];
                        a[k * n + q] = akq + s * (akp - tau * akq);
                        a[q * n + k] = a[k * n + q];
                    }
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = vkp - s * (vkq + tau * vkp);
                    v[k * n + q] = vkq + s * (vkp - tau * vkq);
                }
            }
        }
    }
    if !converged && off(&a) > tol::JACOBI_OFF_TOL * scale_ref {
        return Err(LinalgError::NoConvergence(tol::JACOBI_MAX_SWEEPS));
    }

    // Sort by non-increasing eigenvalue; stable sort keeps original column
    // order on ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .expect("eigenvalues are finite")
    });

    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for &col in &order {
        values.push(a[col * n + col]);
        let mut vec_col: Vec<f64> = (0..n).map(|r| v[r * n + col]).collect();
        if let Some(first) = vec_col.iter().find(|x| x.abs() > tol::SIGN_EPS) {
            if *first < 0.0 {
                for x in &mut vec_col {
                    *x = -*x;
                }
            }
        }
        vectors.push(vec_col);
    }
    Ok(Eigensystem { values, vectors })
}

// ---------------------------------------------------------------------------
// projectors

/// Orthogonal projector `P = Σ v vᵀ` onto the span of orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    n: usize,
    a: Vec<f64>,
    rank: usize,
}

impl Projector {
    /// Projector onto the span of `columns` (each a `dim`-vector). An empty
    /// set yields the zero projector of rank 0.
    pub fn from_orthonormal_columns(
        dim: usize,
        columns: &[&[f64]],
    ) -> Result<Self, LinalgError> {
        for (i, c) in columns.iter().enumerate() {
            if c.len() != dim {
                return Err(LinalgError::NotOrthonormal(format!(
                    "column {i} has length {} (expected {dim})",
                    c.len()
                )));
            }
            let nrm = norm2(c);
            if (nrm - 1.0).abs() > tol::ORTHONORMALITY {
                return Err(LinalgError::NotOrthonormal(format!(
                    "column {i} has norm {nrm}"
                )));
            }
            for (j, d) in columns.iter().enumerate().skip(i + 1) {
                let g = dot(c, d);
                if g.abs() > tol::ORTHONORMALITY {
                    return Err(LinalgError::NotOrthonormal(format!(
                        "columns {i} and {j} have inner product {g}"
                    )));
                }
            }
        }
        let mut a = vec![0.0; dim * dim];
        for c in columns {
            for i in 0..dim {
                for j in 0..dim {
                    a[i * dim + j] += c[i] * c[j];
                }
            }
        }
        // Exact symmetry regardless of accumulation order.
        for i in 0..dim {
            for j in (i + 1)..dim {
                let m = 0.5 * (a[i * dim + j] + a[j * dim + i]);
                a[i * dim + j] = m;
                a[j * dim + i] = m;
            }
        }
        Ok(Self { n: dim, a, rank: columns.len() })
    }

    pub fn zero(dim: usize) -> Self {
        Self { n: dim, a: vec![0.0; dim * dim], rank: 0 }
    }

    pub fn identity(dim: usize) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = 1.0;
        }
        Self { n: dim, a, rank: dim }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| dot(&self.a[i * self.n..(i + 1) * self.n], x))
            .collect()
    }

    /// Complementary projector `I - P`.
    pub fn complement(&self) -> Self {
        let mut a = self.a.iter().map(|x| -x).collect::<Vec<_>>();
        for i in 0..self.n {
            a[i * self.n + i] += 1.0;
        }
        Self { n: self.n, a, rank: self.n - self.rank }
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.a[i * self.n + i]).sum()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    /// Max-entry magnitude of `P·Q` — zero for mutually annihilating pairs.
    pub fn product_max_abs(&self, other: &Self) -> f64 {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self.a[i * n + k] * other.a[k * n + j];
                }
                worst = worst.max(s.abs());
            }
        }
        worst
    }

    /// Row-major matrix entries (length `dim²`).
    pub fn entries(&self) -> &[f64] {
        &self.a
    }

    /// Rebuild a projector from stored entries, re-validating symmetry,
    /// idempotency, and trace ≈ rank.
    pub fn from_raw(dim: usize, rank: usize, entries: Vec<f64>) -> Result<Self, LinalgError> {
        if entries.len() != dim * dim {
            return Err(LinalgError::InvalidMatrix(format!(
                "projector entry count {} does not match dim {dim}",
                entries.len()
            )));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::InvalidMatrix("non-finite projector entry".into()));
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                if (entries[i * dim + j] - entries[j * dim + i]).abs() > tol::PROJECTOR {
                    return Err(LinalgError::InvalidMatrix(format!(
                        "projector asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        let p = Self { n: dim, a: entries, rank };
        if p.idempotency_defect() > tol::PROJECTOR {
            return Err(LinalgError::InvalidMatrix(format!(
                "idempotency defect {} exceeds tolerance",
                p.idempotency_defect()
            )));
        }
        if (p.trace() - rank as f64).abs() > 1e-6 {
            return Err(LinalgError::InvalidMatrix(format!(
                "trace {} does not match rank {rank}",
                p.trace()
            )));
        }
        Ok(p)
    }

    /// Max-entry magnitude of `P·P - P` — idempotency defect, for checks.
    pub fn idempotency_defect(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self.a[i * n + k] * self.a[k * n + j];
                }
                worst = worst.max((s - self.a[i * n + j]).abs());
            }
        }
        worst
    }

    /// Entrywise sum of projectors (used to verify resolutions of identity).
    pub fn sum(projectors: &[&Projector]) -> Option<Self> {
        let first = projectors.first()?;
        let n = first.n;
        let mut a = vec![0.0; n * n];
        let mut rank = 0;
        for p in projectors {
            assert_eq!(p.n, n);
            for (acc, x) in a.iter_mut().zip(&p.a) {
                *acc += x;
            }
            rank += p.rank;
        }
        Some(Self { n, a, rank })
    }

    /// Max-entry deviation from the identity matrix.
    pub fn max_dev_from_identity(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((self.a[i * n + j] - want).abs());
            }
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// covariance

/// Second-moment matrix `(1/n) Σ s sᵀ`, optionally after subtracting the
/// sample mean. Requires at least two samples.
pub fn covariance(samples: &[Vec<f64>], center: bool) -> Result<SymMatrix, LinalgError> {
    if samples.len() < 2 {
        return Err(LinalgError::InsufficientData(format!(
            "covariance needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    if d == 0 {
        return Err(LinalgError::InvalidMatrix("zero-dimensional samples".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.len() != d {
            return Err(LinalgError::InvalidMatrix(format!(
                "sample {i} has dimension {} (expected {d})",
                s.len()
            )));
        }
    }
    let n = samples.len() as f64;
    let mean: Vec<f64> = if center {
        let mut m = vec![0.0; d];
        for s in samples {
            for (acc, x) in m.iter_mut().zip(s) {
                *acc += x;
            }
        }
        m.into_iter().map(|x| x / n).collect()
    } else {
        vec![0.0; d]
    };
    let mut a = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            let si = s[i] - mean[i];
            for j in i..d {
                a[i * d + j] += si * (s[j] - mean[j]);
            }
        }
    }
    let mut rows = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let x = a[i * d + j] / n;
            rows[i][j] = x;
            rows[j][i] = x;
        }
    }
    SymMatrix::from_rows(&rows)
}

// ---------------------------------------------------------------------------
// dense linear solve (internal)

/// Solve `A x = b` by Gaussian elimination with partial pivoting. Returns
/// `None` when a pivot collapses (singular within working precision). The
/// systems solved internally (`I - γ P`) are strictly diagonally dominant,
/// so `None` signals a programming error upstream.
pub(crate) fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = a.len();
    assert_eq!(b.len(), n);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot_row][col].abs() < 1e-13 {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in (col + 1)..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing;

    fn seeded_sym(n: usize, seed: u64) -> SymMatrix {
        let mut rng = crate::seed::stream(seed, "linalg-test", n as u64);
        let mut rows = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let x = testing::gaussian(&mut rng);
                rows[i][j] = x;
                rows[j][i] = x;
            }
        }
        SymMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn diag_matrix_eigensystem_is_exact() {
        let m = SymMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let e = sym_eig(&m).unwrap();
        assert_eq!(e.values, vec![2.0, 1.0]);
        assert_eq!(e.vectors[0], vec![1.0, 0.0]);
        assert_eq!(e.vectors[1], vec![0.0, 1.0]);
    }

    #[test]
    fn identity_eigenvalues_all_one_vectors_orthonormal() {
        let m = SymMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let e = sym_eig(&m).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&e.vectors[i], &e.vectors[j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_4x4_matches_characteristic_polynomial_roots() {
        let m = seeded_sym(4, 2024);
        let e = sym_eig(&m).unwrap();
        let oracle = testing::char_poly_eigenvalues(&m);
        assert_eq!(oracle.len(), 4);
        for (got, want) in e.values.iter().zip(&oracle) {
            assert!(
                (got - want).abs() <= 1e-8,
                "eigenvalue {got} vs polynomial root {want}"
            );
        }
    }

    #[test]
    fn non_finite_entry_is_rejected() {
        let err = SymMatrix::from_rows(&[vec![1.0, f64::NAN], vec![f64::NAN, 1.0]])
            .unwrap_err();
        assert!(matches!(err, LinalgError::InvalidMatrix(_)));
    }

    #[test]
    fn asymmetric_beyond_tolerance_is_rejected() {
        let err =
            SymMatrix::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]).unwrap_err();
        assert!(matches!(err, LinalgError::InvalidMatrix(_)));
    }

    #[test]
    fn random_matrices_reconstruct_and_stay_orthonormal() {
        for seed in 0..40u64 {
            for &n in &[1usize, 2, 3, 5, 8] {
                let m = seeded_sym(n, 100 + seed);
                let e = sym_eig(&m).unwrap();
                // sorted non-increasing
                for w in e.values.windows(2) {
                    assert!(w[0] >= w[1] - 1e-12);
                }
                // orthonormal vectors
                for i in 0..n {
                    for j in 0..n {
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!(
                            (dot(&e.vectors[i], &e.vectors[j]) - want).abs() < 1e-9
                        );
                    }
                }
                // reconstruction V diag(λ) Vᵀ == A
                for r in 0..n {
                    for c in 0..n {
                        let mut s = 0.0;
                        for k in 0..n {
                            s += e.values[k] * e.vectors[k][r] * e.vectors[k][c];
                        }
                        assert!(
                            (s - m.get(r, c)).abs() <= tol::EIGEN_RECONSTRUCTION,
                            "reconstruction off at ({r},{c}) for n={n} seed={seed}"
                        );
                    }
                }
                // deterministic rerun, including signs
                let e2 = sym_eig(&m).unwrap();
                assert_eq!(e.values, e2.values);
                assert_eq!(e.vectors, e2.vectors);
            }
        }
    }

    #[test]
    fn projector_onto_first_basis_vector() {
        let e1 = vec![1.0, 0.0, 0.0];
        let p = Projector::from_orthonormal_columns(3, &[&e1]).unwrap();
        assert_eq!(p.rank(), 1);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == 0 && j == 0 { 1.0 } else { 0.0 };
                assert_eq!(p.get(i, j), want);
            }
        }
    }

    #[test]
    fn empty_projector_is_zero_rank_zero() {
        let p = Projector::from_orthonormal_columns(3, &[]).unwrap();
        assert_eq!(p.rank(), 0);
        assert_eq!(p.apply(&[1.0, 2.0, 3.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn projector_from_eigen_subspace_is_idempotent_with_trace_two() {
        let m = seeded_sym(4, 2024);
        let e = sym_eig(&m).unwrap();
        let p = e.projector_onto(2..4);
        assert!(p.idempotency_defect() <= tol::PROJECTOR);
        assert!((p.trace() - 2.0).abs() <= tol::PROJECTOR);
    }

    #[test]
    fn non_orthonormal_columns_rejected() {
        let v1 = vec![1.0, 0.0];
        let v2 = vec![0.8, 0.6];
        let err = Projector::from_orthonormal_columns(2, &[&v1, &v2]).unwrap_err();
        assert!(matches!(err, LinalgError::NotOrthonormal(_)));
        let long = vec![1.5, 0.0];
        let err = Projector::from_orthonormal_columns(2, &[&long]).unwrap_err();
        assert!(matches!(err, LinalgError::NotOrthonormal(_)));
    }

    #[test]
    fn complement_splits_identity_and_annihilates() {
        for seed in 0..10u64 {
            let m = seeded_sym(5, 300 + seed);
            let e = sym_eig(&m).unwrap();
            let p = e.projector_onto(0..2);
            let q = p.complement();
            let sum = Projector::sum(&[&p, &q]).unwrap();
            assert!(sum.max_dev_from_identity() <= tol::PROJECTOR);
            assert!(p.product_max_abs(&q) <= tol::PROJECTOR);
            assert_eq!(q.rank(), 3);
        }
    }

    #[test]
    fn covariance_uncentered_two_opposite_points() {
        let samples = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let c = covariance(&samples, false).unwrap();
        assert_eq!(c.rows(), vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn covariance_centered_constant_samples_is_zero() {
        let samples = vec![vec![3.0, -2.0]; 5];
        let c = covariance(&samples, true).unwrap();
        assert_eq!(c.rows(), vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn covariance_single_sample_is_insufficient() {
        let err = covariance(&[vec![1.0]], false).unwrap_err();
        assert!(matches!(err, LinalgError::InsufficientData(_)));
    }

    #[test]
    fn covariance_of_known_generator_matches_analytic_within_margin() {
        // s = A z with z standard normal; E[s sᵀ] = A Aᵀ.
        let a = [
            [1.0, 0.0, 0.0],
            [0.5, 0.8, 0.0],
            [-0.3, 0.2, 0.6],
        ];
        let mut rng = crate::seed::stream(7, "cov-oracle", 0);
        let mut samples = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            let z = [
                testing::gaussian(&mut rng),
                testing::gaussian(&mut rng),
                testing::gaussian(&mut rng),
            ];
            samples.push(
                (0..3)
                    .map(|i| (0..3).map(|k| a[i][k] * z[k]).sum())
                    .collect::<Vec<f64>>(),
            );
        }
        let c = covariance(&samples, false).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..3).map(|k| a[i][k] * a[j][k]).sum();
                assert!(
                    (c.get(i, j) - want).abs() <= 0.05,
                    "covariance entry ({i},{j}) = {} vs {want}",
                    c.get(i, j)
                );
            }
        }
    }

    #[test]
    fn solve_dense_recovers_known_solution() {
        let a = vec![
            vec![4.0, 1.0, 0.0],
            vec![1.0, 3.0, -1.0],
            vec![0.0, -1.0, 2.0],
        ];
        let x_true = vec![1.0, -2.0, 0.5];
        let b: Vec<f64> = (0..3).map(|i| dot(&a[i], &x_true)).collect();
        let x = solve_dense(a, b).unwrap();
        for (got, want) in x.iter().zip(&x_true) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_dense_reports_singularity() {
        let a = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert!(solve_dense(a, vec![1.0, 2.0]).is_none());
    }
}
