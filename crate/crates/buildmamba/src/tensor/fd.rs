//! Central-difference gradient oracle. Independent of the graph machinery on
//! purpose: it only ever calls a black-box closure, so it can referee the
//! analytic gradients of every op.

use crate::error::{Error, Result};

/// Full central-difference gradient of scalar-valued `f` at `x`.
pub fn fd_gradient(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::invalid("fd_gradient", "eps must be positive"));
    }
    let base = f(x)?;
    if !base.is_finite() {
        return Err(Error::NonFinite { op: "fd_gradient", msg: format!("f(x) = {}", base) });
    }
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe)?;
        probe[i] = orig - eps;
        let lo = f(&probe)?;
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite {
                op: "fd_gradient",
                msg: format!("perturbed f at coordinate {} = ({}, {})", i, hi, lo),
            });
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}

/// Central differences restricted to the given coordinates; entries for
/// unvisited coordinates are NaN. Used for large composites where a full
/// sweep is too slow.
pub fn fd_gradient_sampled(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    eps: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::invalid("fd_gradient", "eps must be positive"));
    }
    let mut grad = vec![f64::NAN; x.len()];
    let mut probe = x.to_vec();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe)?;
        probe[i] = orig - eps;
        let lo = f(&probe)?;
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite {
                op: "fd_gradient",
                msg: format!("perturbed f at coordinate {} = ({}, {})", i, hi, lo),
            });
        }
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Worst-case relative disagreement; NaN entries in `fd` are skipped.
pub fn max_rel_err(ad: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(ad.len(), fd.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&a, &b) in ad.iter().zip(fd) {
        if b.is_nan() {
            continue;
        }
        let denom = a.abs().max(b.abs()).max(1e-2);
        worst = worst.max((a - b).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f = sum x_i^2, grad = 2x
        let mut f = |v: &[f64]| Ok(v.iter().map(|x| x * x).sum());
        let x = vec![1.0, -2.0, 0.5];
        let g = fd_gradient(&mut f, &x, 1e-5).unwrap();
        for (gv, xv) in g.iter().zip(&x) {
            assert!((gv - 2.0 * xv).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut f = |_: &[f64]| Ok(f64::NAN);
        assert!(fd_gradient(&mut f, &[1.0], 1e-5).is_err());
    }

    #[test]
    fn sampled_leaves_nan_elsewhere() {
        let mut f = |v: &[f64]| Ok(v.iter().sum());
        let g = fd_gradient_sampled(&mut f, &[1.0, 2.0, 3.0], 1e-5, &[1]).unwrap();
        assert!(g[0].is_nan() && g[2].is_nan());
        assert!((g[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rel_err_catches_planted_bug() {
        let good = vec![1.0, 2.0, 3.0];
        let bad = vec![1.0, 2.1, 3.0];
        assert!(max_rel_err(&good, &good) < 1e-15);
        assert!(max_rel_err(&bad, &good) > 1e-2);
    }
}
