//! Semi-supervised training of one branch on a division produced by the other.

mod batch;
mod labels;
mod step;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::dataset::{AugmentationSpec, DataError};
use crate::features::FeatureError;

pub use batch::{predict_batch, predict_set, PreparedSet};
pub use labels::{
    align, align_batch, co_guess, co_refine, draw_mix_weight, entropy, interpolate, lambda_u,
    mix_pair, sharpen, AlignMode, AlignmentState, MixedPair, ALIGN_EPS,
};
pub use step::{
    batch_targets, ce_epoch, mixed_objective, ssl_epoch, warm_up, BranchState, ExchangedDivision,
    MixPlan, SslEpochStats, StepBatch, StepLoss,
};

#[derive(Debug, Error)]
pub enum SslError {
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("Beta parameter must be positive, got {0}")]
    Alpha(f64),
    #[error("distribution has no mass")]
    ZeroDistribution,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty sample set")]
    EmptySet,
    #[error("class {0} has no clean samples")]
    EmptyClean(usize),
    #[error("branch {branch} was handed its own division")]
    Provenance { branch: usize },
    #[error("non-finite loss in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Which class marginal guesses are aligned toward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMarginal {
    Uniform,
    /// Frequencies of the observed (noisy) training labels.
    Empirical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslHyper {
    pub temperature: f64,
    pub alpha: f64,
    pub lambda_u: f64,
    /// Epochs after warm-up over which the unlabeled weight ramps up.
    pub ramp_epochs: f64,
    pub augmentations: usize,
    pub batch_size: usize,
    pub alignment: AlignMode,
    pub target_marginal: TargetMarginal,
    pub augmentation: AugmentationSpec,
}

impl Default for SslHyper {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            alpha: 4.0,
            lambda_u: 25.0,
            ramp_epochs: 16.0,
            augmentations: 2,
            batch_size: 16,
            alignment: AlignMode::Joint,
            target_marginal: TargetMarginal::Uniform,
            augmentation: AugmentationSpec::default(),
        }
    }
}

impl SslHyper {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature > 0.0) {
            return Err(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.alpha > 0.0) {
            return Err(format!("alpha {} must be positive", self.alpha));
        }
        if !(self.lambda_u >= 0.0) || !(self.ramp_epochs >= 0.0) {
            return Err("lambda_u and ramp_epochs must be non-negative".into());
        }
        if self.augmentations == 0 || self.batch_size < 2 {
            return Err("need at least one augmentation and a batch of two".into());
        }
        self.augmentation.validate().map_err(|e| e.to_string())
    }

    /// Target marginal for `labels` over `classes`.
    pub fn target(&self, labels: &[usize], classes: usize) -> Vec<f64> {
        match self.target_marginal {
            TargetMarginal::Uniform => vec![1.0 / classes as f64; classes],
            TargetMarginal::Empirical => {
                let mut m = vec![0.0; classes];
                for &y in labels {
                    m[y] += 1.0 / labels.len() as f64;
                }
                m
            }
        }
    }
}
