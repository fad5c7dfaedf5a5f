//! Central finite-difference gradient checking. The production adjoints are
//! hand-written per layer, so this harness is the independent oracle that
//! certifies them.

/// Outcome of one gradient check sweep.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error seen over the probed coordinates.
    pub max_rel_err: f64,
    /// Coordinate where the largest error occurred.
    pub worst_index: usize,
    /// Analytic and numeric values at that coordinate.
    pub worst_pair: (f64, f64),
    /// Number of coordinates probed.
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with a guarded denominator: coordinates where both the
/// analytic and numeric values sit below the guard are compared absolutely
/// against guard*tolerance instead of amplifying finite-difference noise.
/// Central differences at eps=1e-5 on f64 carry roundoff around 1e-10, so a
/// 1e-3 guard with a 1e-6 tolerance still demands 1e-9 absolute agreement on
/// true-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares `analytic` against central differences of `loss` around `theta`.
///
/// `stride` probes every stride-th coordinate (1 checks everything); each
/// probe costs two loss evaluations, so large models use a coarser stride.
pub fn check_gradient(
    theta: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    eps: f64,
    stride: usize,
) -> GradCheck {
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    assert!(stride >= 1);
    let mut work = theta.to_vec();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    let mut i = 0;
    while i < theta.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let fp = loss(&work);
        work[i] = orig - eps;
        let fm = loss(&work);
        work[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let e = rel_err(analytic[i], numeric);
        if e > out.max_rel_err {
            out.max_rel_err = e;
            out.worst_index = i;
            out.worst_pair = (analytic[i], numeric);
        }
        out.checked += 1;
        i += stride;
    }
    out
}
