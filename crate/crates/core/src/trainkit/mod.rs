//! Desk-scale training of clipped binary networks.
//!
//! Binarization uses the straight-through estimator: the forward pass takes
//! the sign, the backward pass lets the gradient through only inside
//! `[-1, 1]`. Conv outputs can be clipped to the 8-bit range with the same
//! pass-inside, block-outside gradient rule.
//!
//! Training is split in two stages. The warmup stage has no range limits.
//! The clipped stage limits conv sums and residual sums to `[-127, 127]`.
//! [`bn_quantize_retrain`] then fixes BN layers to 16-bit Q-format values one
//! at a time, retraining the rest after each step.

mod net;
mod task;
mod train;

#[cfg(test)]
mod tests;

pub use net::{
    Architecture, BlockKind, BlockSpec, Readout, Stage, TrainConfig, TrainState, FEATURE_SCALE,
};
pub use task::{Dataset, ToyTask, ToyTaskConfig, CLASSES, IMAGE_CHANNELS, IMAGE_SIZE};
pub use train::{
    bn_quantize_retrain, netgraph_predictions, train_stage1, train_stage2, write_curves_csv,
    EpochRecord, QuantizeReport, Split,
};

/// Sign with the straight-through gradient mask `[-1 <= x <= 1]`.
#[inline]
pub fn ste_sign(x: f64) -> (f64, bool) {
    (if x >= 0.0 { 1.0 } else { -1.0 }, (-1.0..=1.0).contains(&x))
}

/// 8-bit range clip with gradient mask `[-127 <= x <= 127]`.
#[inline]
pub fn clip_i8_surrogate(x: f64) -> (f64, bool) {
    (x.clamp(-127.0, 127.0), (-127.0..=127.0).contains(&x))
}

/// Surrogate ops that [`grad_check`] knows how to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateOp {
    /// `A(x) = clamp(x, -1, 1)`, whose derivative is the STE mask.
    SignClamp,
    /// `clamp(x, -127, 127)`.
    ClipI8,
}

impl SurrogateOp {
    pub fn forward(self, x: f64) -> f64 {
        match self {
            Self::SignClamp => x.clamp(-1.0, 1.0),
            Self::ClipI8 => clip_i8_surrogate(x).0,
        }
    }

    /// Derivative used by backprop.
    pub fn gradient(self, x: f64) -> f64 {
        let pass = match self {
            Self::SignClamp => ste_sign(x).1,
            Self::ClipI8 => clip_i8_surrogate(x).1,
        };
        if pass {
            1.0
        } else {
            0.0
        }
    }

    /// Points where finite differences straddle a kink.
    pub fn near_kink(self, x: f64) -> bool {
        let a = x.abs();
        match self {
            Self::SignClamp => (0.99..=1.01).contains(&a),
            Self::ClipI8 => (126.0..=128.0).contains(&a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_near_kink: usize,
    pub max_abs_error: f64,
    /// Point with the largest error.
    pub worst_point: Option<f64>,
}

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Compare central differences of `op.forward` against `op.gradient`.
pub fn grad_check(op: SurrogateOp, points: &[f64]) -> GradCheckReport {
    let mut r = GradCheckReport {
        checked: 0,
        skipped_near_kink: 0,
        max_abs_error: 0.0,
        worst_point: None,
    };
    for &x in points {
        if op.near_kink(x) {
            r.skipped_near_kink += 1;
            continue;
        }
        let fd = (op.forward(x + FD_STEP) - op.forward(x - FD_STEP)) / (2.0 * FD_STEP);
        let err = (fd - op.gradient(x)).abs();
        r.checked += 1;
        if r.worst_point.is_none() || err > r.max_abs_error {
            r.max_abs_error = err;
            r.worst_point = Some(x);
        }
    }
    r
}
