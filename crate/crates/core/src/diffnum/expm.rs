//! Matrix exponential and the smooth acyclicity penalty built on it.
//!
//! The penalty is `b(W) = trace(e^{W o W}) - K` (`o` elementwise): it is zero
//! exactly when the nonzero pattern of `W` carries no directed cycle, because
//! `[S^k]_ii` counts weighted k-step closed walks.

use crate::diffnum::Matrix;
use crate::error::Result;

/// Taylor terms are accumulated until they drop below this infinity norm.
const TERM_TOL: f64 = 1e-16;

/// Hard cap on Taylor terms; at the post-scaling norm (<= 0.5) the series
/// converges in about a dozen terms, so hitting the cap means bad input.
const MAX_TERMS: usize = 120;

/// Matrix exponential via scaling-and-squaring with a truncated Taylor series.
pub fn matexp(s: &Matrix) -> Result<Matrix> {
    s.require_square_finite("matexp")?;
    let n = s.rows();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }

    // Halve until the norm is at most 0.5, then square back.
    let norm = s.inf_norm();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let scaled = s.scale(0.5f64.powi(squarings as i32));

    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=MAX_TERMS {
        term = term.matmul(&scaled).scale(1.0 / k as f64);
        sum = sum.add(&term);
        if term.inf_norm() < TERM_TOL {
            break;
        }
    }

    let mut result = sum;
    for _ in 0..squarings {
        result = result.matmul(&result);
    }
    Ok(result)
}

/// `trace(e^{W o W}) - K`; nonnegative, zero iff the pattern of `wc` is acyclic.
pub fn dag_penalty(wc: &Matrix) -> Result<f64> {
    wc.require_square_finite("dag_penalty")?;
    let s = wc.hadamard(wc);
    let e = matexp(&s)?;
    let b = e.trace() - wc.rows() as f64;
    // Exact arithmetic gives b >= 0; rounding can leave a dust-sized negative.
    Ok(b.max(0.0))
}

/// Analytic gradient of [`dag_penalty`]: `2 * (e^{W o W})^T o W`.
pub fn dag_penalty_grad(wc: &Matrix) -> Result<Matrix> {
    wc.require_square_finite("dag_penalty_grad")?;
    let s = wc.hadamard(wc);
    let e = matexp(&s)?;
    Ok(e.transpose().hadamard(wc).scale(2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(m: &Matrix, expect: &Matrix, tol: f64) {
        assert!(
            m.max_abs_diff(expect) <= tol,
            "max diff {} > {tol}\ngot {:?}\nexpected {:?}",
            m.max_abs_diff(expect),
            m,
            expect
        );
    }

    /// Independent reference: plain Taylor summation without scaling, adequate
    /// for the moderate norms used in these tests.
    fn taylor_reference(s: &Matrix, terms: usize) -> Matrix {
        let n = s.rows();
        let mut sum = Matrix::identity(n);
        let mut term = Matrix::identity(n);
        for k in 1..=terms {
            term = term.matmul(s).scale(1.0 / k as f64);
            sum = sum.add(&term);
        }
        sum
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let e = matexp(&Matrix::zeros(2, 2)).unwrap();
        assert_close(&e, &Matrix::identity(2), 0.0);
    }

    #[test]
    fn exp_of_nilpotent() {
        let s = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let e = matexp(&s).unwrap();
        assert_close(&e, &Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]), 1e-15);
    }

    #[test]
    fn trace_of_symmetric_swap_matches_eigenvalues() {
        // Eigenvalues of [[0,1],[1,0]] are +-1, so trace(e^S) = e + 1/e.
        let s = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let e = matexp(&s).unwrap();
        let expect = std::f64::consts::E + (-1.0f64).exp();
        assert!((e.trace() - expect).abs() < 1e-12, "trace {}", e.trace());
        assert!((e.trace() - 3.086_161).abs() < 1e-6);
        // Cross-check against the independent truncated-series reference.
        assert_close(&e, &taylor_reference(&s, 30), 1e-12);
    }

    #[test]
    fn matches_taylor_reference_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.5..1.5));
            let e = matexp(&s).unwrap();
            assert_close(&e, &taylor_reference(&s, 60), 1e-11);
        }
    }

    #[test]
    fn exp_inverse_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = Matrix::from_fn(5, 5, |_, _| rng.gen_range(-0.4..0.4));
            let prod = matexp(&s).unwrap().matmul(&matexp(&s.scale(-1.0)).unwrap());
            assert_close(&prod, &Matrix::identity(5), 1e-8);
        }
    }

    #[test]
    fn rejects_non_square_and_non_finite() {
        assert!(matches!(
            matexp(&Matrix::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 1, f64::NAN);
        assert!(matches!(matexp(&m), Err(Error::Numeric(_))));
    }

    #[test]
    fn penalty_zero_on_acyclic_patterns() {
        assert_eq!(dag_penalty(&Matrix::zeros(3, 3)).unwrap(), 0.0);
        let mut single = Matrix::zeros(2, 2);
        single.set(0, 1, 1.0);
        assert!(dag_penalty(&single).unwrap() < 1e-12);
    }

    #[test]
    fn penalty_positive_on_two_cycle() {
        let wc = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let b = dag_penalty(&wc).unwrap();
        let expect = std::f64::consts::E + (-1.0f64).exp() - 2.0;
        assert!((b - expect).abs() < 1e-12);
        assert!((b - 1.086_161).abs() < 1e-6);
    }

    #[test]
    fn penalty_grad_vanishes_on_single_edge() {
        // One edge cannot close a cycle, so the penalty is locally flat there.
        let wc = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let g = dag_penalty_grad(&wc).unwrap();
        assert_close(&g, &Matrix::zeros(2, 2), 1e-15);
    }

    #[test]
    fn penalty_grad_zero_at_zero() {
        let g = dag_penalty_grad(&Matrix::zeros(3, 3)).unwrap();
        assert_close(&g, &Matrix::zeros(3, 3), 0.0);
    }

    #[test]
    fn penalty_grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-5;
        for _ in 0..25 {
            let wc = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let grad = dag_penalty_grad(&wc).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let mut plus = wc.clone();
                    plus.set(i, j, wc.get(i, j) + h);
                    let mut minus = wc.clone();
                    minus.set(i, j, wc.get(i, j) - h);
                    let fd =
                        (dag_penalty(&plus).unwrap() - dag_penalty(&minus).unwrap()) / (2.0 * h);
                    let a = grad.get(i, j);
                    let denom = a.abs().max(fd.abs()).max(1.0);
                    assert!(
                        (a - fd).abs() / denom <= 1e-5,
                        "grad[{i}][{j}]: analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }
}
