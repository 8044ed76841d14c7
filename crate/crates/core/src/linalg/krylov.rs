use crate::error::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Result of a converged conjugate-gradient run.
#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||r_k|| / ||b||`, starting with the initial residual.
    pub residual_history: Vec<f64>,
    /// Quadratic objective `x.Ax/2 - b.x` along the iterates (nonincreasing).
    pub objective_history: Vec<f64>,
}

/// Conjugate gradient for `A x = b` from `x = 0`, with `A` given as a callback.
///
/// The callback may fail (it usually wraps PDE solves); its error is returned
/// unchanged. On exhaustion returns [`Error::CgMaxIterations`] carrying the
/// iterate with the smallest residual seen.
pub fn conjugate_gradient<F>(mut apply: F, b: &[f64], tol_rel: f64, max_iter: usize) -> Result<CgOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let b_norm = norm(b);
    if !b_norm.is_finite() {
        return Err(Error::NonFiniteBreakdown("conjugate gradient right-hand side"));
    }
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            residual_history: vec![0.0],
            objective_history: vec![0.0],
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut residual_history = vec![1.0];
    let mut objective_history = vec![0.0];
    let mut best = (1.0, x.clone());

    for it in 1..=max_iter {
        let ap = apply(&p)?;
        if ap.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                found: ap.len(),
            });
        }
        let pap = dot(&p, &ap);
        if !pap.is_finite() {
            return Err(Error::NonFiniteBreakdown("conjugate gradient curvature"));
        }
        if pap <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "operator is not positive definite (p.Ap = {pap:e} at iteration {it})"
            )));
        }
        let step = rr / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(Error::NonFiniteBreakdown("conjugate gradient residual"));
        }
        let rel = rr_new.sqrt() / b_norm;
        residual_history.push(rel);
        let last = objective_history[objective_history.len() - 1];
        objective_history.push(last - 0.5 * step * rr);
        if rel < best.0 {
            best = (rel, x.clone());
        }
        if rel <= tol_rel {
            return Ok(CgOutcome {
                x,
                iterations: it,
                residual_history,
                objective_history,
            });
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(Error::CgMaxIterations {
        iterations: max_iter,
        residual: best.0,
        best: best.1,
    })
}

/// Largest singular value of `A` by power iteration on `A^T A`.
///
/// Returns the running estimate (nondecreasing across iterations) and the
/// relative increment of the last iteration. A zero operator gives `(0, 0)`.
pub fn operator_norm<F, G>(mut apply: F, mut apply_adjoint: G, n: usize, iters: usize) -> Result<(f64, f64)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    // deterministic start with no special alignment to grid modes
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 1.618_033_988_75).sin()).collect();
    let xn = norm(&x);
    x.iter_mut().for_each(|v| *v /= xn);

    let mut estimate = 0.0_f64;
    let mut increment = 0.0;
    for _ in 0..iters {
        let y = apply(&x)?;
        let sigma = norm(&y);
        if !sigma.is_finite() {
            return Err(Error::NonFiniteBreakdown("power iteration"));
        }
        if sigma > estimate {
            increment = if estimate > 0.0 { (sigma - estimate) / sigma } else { 1.0 };
            estimate = sigma;
        } else {
            increment = 0.0;
        }
        if sigma == 0.0 {
            return Ok((0.0, 0.0));
        }
        let z = apply_adjoint(&y)?;
        let zn = norm(&z);
        if zn == 0.0 {
            break;
        }
        x = z.into_iter().map(|v| v / zn).collect();
    }
    Ok((estimate, increment))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_converges_in_one_step() {
        let b = vec![1.0, -2.0, 0.5];
        let out = conjugate_gradient(|p| Ok(p.to_vec()), &b, 1e-12, 10).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.x, b);
    }

    #[test]
    fn diagonal_terminates_within_dimension() {
        let d: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let b = vec![1.0; 10];
        let out = conjugate_gradient(|p| Ok(p.iter().zip(&d).map(|(a, b)| a * b).collect()), &b, 1e-10, 50).unwrap();
        assert!(out.iterations <= 10, "{}", out.iterations);
        for (x, di) in out.x.iter().zip(&d) {
            assert!((x - 1.0 / di).abs() < 1e-9);
        }
        assert!(out.residual_history.last().unwrap() <= &out.residual_history[0]);
        assert!(out.objective_history.windows(2).all(|w| w[1] <= w[0]));
        let quad: f64 = out.x.iter().zip(&d).map(|(x, di)| 0.5 * di * x * x - x).sum();
        assert!((out.objective_history.last().unwrap() - quad).abs() < 1e-10);
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let out = conjugate_gradient(|p| Ok(p.to_vec()), &[0.0; 4], 1e-10, 5).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x, vec![0.0; 4]);
    }

    #[test]
    fn max_iterations_carries_best_iterate() {
        let d: Vec<f64> = (1..=30).map(|i| (i * i) as f64).collect();
        let b = vec![1.0; 30];
        let err = conjugate_gradient(|p| Ok(p.iter().zip(&d).map(|(a, b)| a * b).collect()), &b, 1e-14, 3).unwrap_err();
        match err {
            Error::CgMaxIterations { iterations, best, residual } => {
                assert_eq!(iterations, 3);
                assert_eq!(best.len(), 30);
                assert!(residual < 1.0);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_finite_operator_is_detected() {
        let err = conjugate_gradient(|p| Ok(p.iter().map(|_| f64::NAN).collect()), &[1.0, 1.0], 1e-10, 5).unwrap_err();
        assert!(matches!(err, Error::NonFiniteBreakdown(_)));
    }

    #[test]
    fn operator_norm_of_zero_and_diagonal() {
        let (z, _) = operator_norm(|x| Ok(vec![0.0; x.len()]), |y| Ok(vec![0.0; y.len()]), 4, 10).unwrap();
        assert_eq!(z, 0.0);
        let diag = |x: &[f64]| Ok(vec![3.0 * x[0], x[1]]);
        let (s, inc) = operator_norm(diag, diag, 2, 50).unwrap();
        assert!((s - 3.0).abs() < 1e-8, "{s}");
        assert!(inc < 1e-8);
    }
}
