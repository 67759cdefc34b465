//! Central finite-difference verification of analytic gradients (64-bit).

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Step for central differences.
pub const STEP: f64 = 1e-6;
/// Maximum accepted relative error.
pub const REL_TOL: f64 = 1e-5;
/// Absolute error below which a coordinate always passes.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|a − n| / max(|a|, |n|, ABS_FLOOR / REL_TOL)`; a coordinate
    /// passes when this is at most [`REL_TOL`].
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        self.failures += other.failures;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
    }
}

/// Scaled error of one coordinate: `≤ REL_TOL` iff the relative error is
/// within `REL_TOL` or the absolute error is within `ABS_FLOOR`.
pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR / REL_TOL);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `f` around `x0`.
///
/// `sample = Some((k, seed))` checks `k` randomly chosen coordinates instead
/// of all of them.
pub fn check_gradient(
    x0: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    sample: Option<(usize, u64)>,
) -> GradCheck {
    assert_eq!(x0.shape(), analytic.shape(), "gradient shape");
    let coords: Vec<usize> = match sample {
        Some((k, seed)) if k < x0.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = index::sample(&mut rng, x0.len(), k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..x0.len()).collect(),
    };
    let mut report = GradCheck::default();
    let mut x = x0.clone();
    for i in coords {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + STEP;
        let up = f(&x);
        x.data_mut()[i] = orig - STEP;
        let down = f(&x);
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.data()[i];
        let err = scaled_error(a, numeric);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(err);
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        if err > REL_TOL || !err.is_finite() {
            report.failures += 1;
        }
    }
    report
}
