//! Independent check oracles shared by this crate's tests and by downstream
//! test binaries. Nothing here is used by production code paths.
//!
//! The eigenvalue oracle deliberately avoids the Jacobi code path: it builds
//! the characteristic polynomial by the Faddeev–LeVerrier trace recursion and
//! isolates its real roots by sign-change scanning plus bisection. It is only
//! suitable for small generic matrices (simple spectra); tests feed it seeded
//! dense matrices where eigenvalue collisions have probability zero.

use crate::linalg::SymMatrix;
use rand::Rng;

/// Standard normal draw via Box–Muller (keeps test dependencies minimal).
pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Coefficients `c_1..c_n` of `λ^n + c_1 λ^(n-1) + … + c_n` via the
/// Faddeev–LeVerrier recursion.
fn char_poly_coefficients(m: &SymMatrix) -> Vec<f64> {
    let n = m.dim();
    let a = m.rows();
    let mut mk = a.clone(); // M_1 = A
    let mut coeffs = Vec::with_capacity(n);
    let mut ck = -(0..n).map(|i| mk[i][i]).sum::<f64>(); // c_1 = -tr(A)
    coeffs.push(ck);
    for k in 2..=n {
        // M_k = A (M_{k-1} + c_{k-1} I)
        let mut shifted = mk.clone();
        for i in 0..n {
            shifted[i][i] += ck;
        }
        mk = mat_mul(&a, &shifted);
        ck = -(0..n).map(|i| mk[i][i]).sum::<f64>() / (k as f64);
        coeffs.push(ck);
    }
    coeffs
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    let mut p = 1.0;
    for c in coeffs {
        p = p * x + c;
    }
    p
}

/// All eigenvalues of a symmetric matrix with a simple spectrum, sorted
/// non-increasing, via characteristic-polynomial root isolation.
///
/// Panics if fewer than `dim` sign-separated roots are found (degenerate
/// spectrum) — callers must supply generic matrices.
pub fn char_poly_eigenvalues(m: &SymMatrix) -> Vec<f64> {
    let n = m.dim();
    let coeffs = char_poly_coefficients(m);
    // Gershgorin bound: all eigenvalues lie within max row sum of |entries|.
    let radius = (0..n)
        .map(|i| (0..n).map(|j| m.get(i, j).abs()).sum::<f64>())
        .fold(0.0f64, f64::max)
        .max(1.0)
        * 1.0001;
    let grid = 40_000;
    let mut roots = Vec::new();
    let mut prev_x = -radius;
    let mut prev_p = horner(&coeffs, prev_x);
    for g in 1..=grid {
        let x = -radius + 2.0 * radius * (g as f64) / (grid as f64);
        let p = horner(&coeffs, x);
        if prev_p == 0.0 {
            roots.push(prev_x);
        } else if prev_p * p < 0.0 {
            // bisect
            let (mut lo, mut hi, mut plo) = (prev_x, x, prev_p);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let pm = horner(&coeffs, mid);
                if pm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if plo * pm < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    plo = pm;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev_x = x;
        prev_p = p;
    }
    assert_eq!(
        roots.len(),
        n,
        "characteristic-polynomial oracle found {} roots for dimension {n}; \
         supply a matrix with a simple spectrum",
        roots.len()
    );
    roots.sort_by(|a, b| b.partial_cmp(a).unwrap());
    roots
}

/// Assert two slices agree elementwise within `tol`, with a readable message.
pub fn assert_slice_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "{what}: index {i}: got {g}, want {w} (tol {tol})"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_recovers_diagonal_spectrum() {
        let m = SymMatrix::from_rows(&[
            vec![3.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0],
            vec![0.0, 0.0, 0.5],
        ])
        .unwrap();
        let roots = char_poly_eigenvalues(&m);
        assert_slice_close(&roots, &[3.0, 0.5, -1.0], 1e-9, "diagonal spectrum");
    }

    #[test]
    fn oracle_recovers_2x2_closed_form() {
        // [[2, 1], [1, 2]] has eigenvalues 3 and 1.
        let m = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let roots = char_poly_eigenvalues(&m);
        assert_slice_close(&roots, &[3.0, 1.0], 1e-9, "2x2 spectrum");
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let mut rng = crate::seed::stream(1, "gauss", 0);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = gaussian(&mut rng);
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }
}
