//! Central finite-difference checks for hand-written vjps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffOp, Tensor};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-6;
/// Absolute slack added to the relative test, covering finite-difference
/// truncation on entries whose true derivative is ~0.
pub const FD_ATOL: f64 = 1e-7;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_abs_err: f64,
    /// Largest `err - bound` seen; positive means at least one failure.
    pub worst_excess: f64,
    pub failures: usize,
    pub rtol_used: f64,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64, rtol: f64) {
        let err = (analytic - numeric).abs();
        let bound = rtol * analytic.abs().max(numeric.abs()) + FD_ATOL;
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(err);
        self.worst_excess = self.worst_excess.max(err - bound);
        if !(err <= bound) {
            self.failures += 1;
        }
    }

    pub fn passed(&self, rtol: f64) -> bool {
        self.rtol_used == rtol && self.failures == 0 && self.checked > 0
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.worst_excess = self.worst_excess.max(other.worst_excess);
        self.failures += other.failures;
        self.rtol_used = other.rtol_used;
    }
}

/// Checks every input entry of `op` against central differences of
/// `⟨op(x), g⟩` for a random probe `g`, at relative tolerance 1e-4.
pub fn check_op<O: DiffOp<f64> + ?Sized>(op: &O, inputs: &[&Tensor<f64>], seed: u64) -> Result<GradReport> {
    check_op_rtol(op, inputs, seed, 1e-4)
}

pub fn check_op_rtol<O: DiffOp<f64> + ?Sized>(
    op: &O,
    inputs: &[&Tensor<f64>],
    seed: u64,
    rtol: f64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let out = op.forward(inputs)?;
    let probe = Tensor::<f64>::randn(out.shape(), 1.0, &mut rng);
    let grads = op.vjp(inputs, &out, &probe)?;
    let mut report = GradReport {
        rtol_used: rtol,
        ..Default::default()
    };
    for (k, input) in inputs.iter().enumerate() {
        assert_eq!(grads[k].shape(), input.shape(), "{}: vjp shape", op.name());
        for i in 0..input.numel() {
            let mut plus = (*input).clone();
            plus.data_mut()[i] += FD_STEP;
            let mut minus = (*input).clone();
            minus.data_mut()[i] -= FD_STEP;
            let eval = |x: Tensor<f64>| -> Result<f64> {
                let mut args: Vec<&Tensor<f64>> = inputs.to_vec();
                args[k] = &x;
                Ok(op.forward(&args)?.dot(&probe))
            };
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
            report.record(grads[k].data()[i], numeric, rtol);
        }
    }
    Ok(report)
}

/// Finite-difference check of a scalar function of a flat parameter vector,
/// on the listed coordinates.
pub fn check_scalar_fn(
    f: &mut dyn FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    coords: &[usize],
    rtol: f64,
) -> GradReport {
    let mut report = GradReport {
        rtol_used: rtol,
        ..Default::default()
    };
    let mut x = point.to_vec();
    for &i in coords {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let fp = f(&x);
        x[i] = orig - FD_STEP;
        let fm = f(&x);
        x[i] = orig;
        report.record(analytic[i], (fp - fm) / (2.0 * FD_STEP), rtol);
    }
    report
}
