//! Target assignment, the detection loss, plain SGD, and a synthetic-shapes
//! training loop.

mod loss;
mod synth;
mod targets;
mod toy;

use thiserror::Error;

use crate::anchors::AnchorError;
use crate::netdef::{NetError, NetGraph};
use crate::postprocess::{BoxLoss, EvalError};
use crate::tensor::{Scalar, Tensor};

pub use loss::{bce_with_logit, loss_and_grad, total_loss, LossReport, MAX_LOG_SCALE, PROB_EPS};
pub use synth::{Sample, ShapeKind, SynthConfig, SynthGenerator, PALETTE};
pub use targets::{assign_targets, ScaleTargets, SlotTarget, TargetAssignment, DEFAULT_LAMBDA_NOOBJ};
pub use toy::{detect_batch, evaluate_graph, head_grids, toy_graph, train_toy, EvalPoint, ToyConfig, ToyOutcome, TrainHistory};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("ground truth {index} has zero or invalid extent ({w}, {h})")]
    DegenerateBox { index: usize, w: f64, h: f64 },
    #[error("ground truth {index} centered at ({cx}, {cy}) lies outside the input")]
    OutsideCanvas { index: usize, cx: f64, cy: f64 },
    #[error("class id {class} out of range for {num_classes} classes")]
    ClassRange { class: usize, num_classes: usize },
    #[error("no free anchor slot left for the box centered at ({cx}, {cy})")]
    SlotsExhausted { cx: f64, cy: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid optimizer setting: {0}")]
    Config(String),
    #[error("loss diverged to {loss} at step {step}")]
    Diverged {
        step: usize,
        loss: f64,
        history: Box<TrainHistory>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Anchors(#[from] AnchorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Plain stochastic gradient descent settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    /// Learning rate.
    pub eta: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Running-statistics momentum of batch normalization.
    pub bn_momentum: f64,
    pub box_loss: BoxLoss,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            eta: 0.0002,
            batch_size: 8,
            steps: 500,
            bn_momentum: crate::nn::batchnorm::DEFAULT_MOMENTUM,
            box_loss: BoxLoss::Ciou,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(TrainError::Config(format!("eta must be finite and non-negative, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(TrainError::Config(format!("bn momentum must lie in [0, 1], got {}", self.bn_momentum)));
        }
        Ok(())
    }
}

/// One SGD step on `batch`. Returns the loss measured before the update.
///
/// A step whose gradient contains non-finite values is rejected and leaves
/// the graph untouched.
pub fn backward_and_step<T: Scalar>(
    g: &mut NetGraph<T>,
    batch: &Tensor<T>,
    targets: &[TargetAssignment],
    opt: &OptimizerConfig,
) -> Result<LossReport, TrainError> {
    opt.validate()?;
    if batch.shape().n != targets.len() {
        return Err(TrainError::Mismatch(format!(
            "batch of {} images with {} target sets",
            batch.shape().n,
            targets.len()
        )));
    }
    let pass = g.forward_train(batch)?;
    let heads = pass.heads(g);
    let (report, head_grads) = loss_and_grad(&heads, targets, opt.box_loss)?;
    let grads = g.backward(&pass, &head_grads)?;
    if !grads.is_finite() {
        return Err(TrainError::NonFinite(format!(
            "parameter gradients (loss {:.6}, largest finite entry {})",
            report.loss_total,
            grads.max_abs()
        )));
    }
    g.apply_sgd(&grads, T::from_f64(opt.eta))?;
    g.update_running_stats(&pass, T::from_f64(opt.bn_momentum))?;
    Ok(report)
}
