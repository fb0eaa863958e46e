//! Central finite-difference gradient checking.
//!
//! The checker is deliberately independent of the tape: it only needs a
//! closure that evaluates the scalar objective at a given input value, so it
//! exercises the same code path a fresh forward pass would.

use ndarray::ArrayD;
use rand::seq::SliceRandom;

use crate::rng::counter_rng;

/// Relative error between an analytic and a finite-difference derivative.
/// Near-zero pairs compare absolutely so noise below 1e-6 cannot fail.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Max relative error between `analytic` and central differences of `eval`
/// at `x0`. `coords`: how many coordinates to probe (None = all).
pub fn finite_diff_max_rel_err(
    eval: &dyn Fn(&ArrayD<f64>) -> f64,
    x0: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    eps: f64,
    coords: Option<usize>,
) -> f64 {
    assert_eq!(x0.shape(), analytic.shape(), "finite_diff: shape mismatch");
    let n = x0.len();
    let picked: Vec<usize> = match coords {
        Some(k) if k < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = counter_rng(0xFD, 0, n as u64);
            idx.shuffle(&mut rng);
            idx.truncate(k);
            idx
        }
        _ => (0..n).collect(),
    };
    let flat_analytic: Vec<f64> = analytic.iter().cloned().collect();
    let mut worst = 0.0f64;
    for i in picked {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        {
            let s = xp.as_slice_mut().unwrap();
            s[i] += eps;
        }
        {
            let s = xm.as_slice_mut().unwrap();
            s[i] -= eps;
        }
        let fd = (eval(&xp) - eval(&xm)) / (2.0 * eps);
        worst = worst.max(rel_err(flat_analytic[i], fd));
    }
    worst
}

/// Aggregate report over repeated randomized gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub trials: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            trials: self.trials + other.trials,
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
        }
    }
}
