//! Two-branch feature extraction and fusion.
//!
//! The image branch is a residual CNN over the amplitude image; the scattering
//! branch runs dynamic-graph convolutions over the scattering-center set. Their
//! pooled outputs are concatenated (scattering first) and classified.

mod image;
mod layers;
mod scattering;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asc_sim::{AmplitudeImage, ASC_PARAMS};
use crate::autodiff::{AutodiffError, ParamStore, Scalar, Tensor, Var};
use crate::dataset::{AscNormalizer, SarSample};

pub use image::{ImageBranch, ImageConfig};
pub use layers::{apply_running_stats, BatchNorm, Conv, Ctx, Linear, ResidualBlock, StatUpdate};
pub use scattering::{batch_edges, knn_graph, EdgeConv, ScatteringBranch, ScatteringConfig};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("need 1 <= K < P, got K={k}, P={p}")]
    Neighbours { k: usize, p: usize },
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub image: ImageConfig,
    pub scatter: ScatteringConfig,
    /// Weight on the old value when updating normalization running averages.
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image: ImageConfig::default(),
            scatter: ScatteringConfig::default(),
            bn_momentum: 0.9,
        }
    }
}

impl NetConfig {
    pub fn fused_dim(&self) -> usize {
        self.scatter.output_dim() + self.image.output_dim()
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub z_scatter: Var,
    pub z_image: Var,
    pub fused: Var,
    pub logits: Var,
}

/// Architecture of the fused classifier. Parameters live in a separate
/// [`ParamStore`] so the same structure runs at any precision.
#[derive(Clone, Debug)]
pub struct FusionNet {
    pub config: NetConfig,
    pub classes: usize,
    pub image: ImageBranch,
    pub scatter: ScatteringBranch,
    pub head: Linear,
}

impl FusionNet {
    pub fn new<S: Scalar, R: Rng>(
        config: &NetConfig,
        classes: usize,
        rng: &mut R,
    ) -> Result<(Self, ParamStore<S>), FeatureError> {
        config.image.validate()?;
        if config.scatter.widths.is_empty() || config.scatter.widths.iter().any(|&w| w == 0) || config.scatter.embed == 0 {
            return Err(FeatureError::Config(
                "scattering widths and embedding must be positive".into(),
            ));
        }
        if classes < 2 {
            return Err(FeatureError::Config(format!("{classes} classes")));
        }
        let mut store = ParamStore::new();
        let image = ImageBranch::new(&mut store, rng, &config.image);
        let scatter = ScatteringBranch::new(&mut store, rng, &config.scatter);
        let head = Linear::new(&mut store, rng, "head", config.fused_dim(), classes);
        Ok((
            Self {
                config: config.clone(),
                classes,
                image,
                scatter,
                head,
            },
            store,
        ))
    }

    pub fn image_features<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        images: Var,
    ) -> Result<Var, FeatureError> {
        self.image.forward(ctx, images)
    }

    pub fn scatter_features<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        asc: Var,
        n: usize,
    ) -> Result<Var, FeatureError> {
        self.scatter.forward(ctx, asc, n)
    }

    /// Concatenation `z_S ⊕ z_I`, no reweighting.
    pub fn fuse<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        z_scatter: Var,
        z_image: Var,
    ) -> Result<Var, FeatureError> {
        Ok(ctx.g.concat(&[z_scatter, z_image], 1)?)
    }

    pub fn classify<S: Scalar>(&self, ctx: &mut Ctx<S>, fused: Var) -> Result<Var, FeatureError> {
        Ok(self.head.forward(ctx, fused)?)
    }

    pub fn forward<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        images: Var,
        asc: Var,
    ) -> Result<FusionOutput, FeatureError> {
        let n = ctx.g.shape(images).first().copied().unwrap_or(0);
        let z_image = self.image_features(ctx, images)?;
        let z_scatter = self.scatter_features(ctx, asc, n)?;
        let fused = self.fuse(ctx, z_scatter, z_image)?;
        let logits = self.classify(ctx, fused)?;
        Ok(FusionOutput {
            z_scatter,
            z_image,
            fused,
            logits,
        })
    }
}

/// Stacks `(N, 1, H, W)` from images that all share one size.
pub fn image_batch<S: Scalar>(images: &[&AmplitudeImage]) -> Result<Tensor<S>, FeatureError> {
    let first = images
        .first()
        .ok_or_else(|| FeatureError::Input("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(FeatureError::Input(format!(
                "mixed image sizes {}x{} and {h}x{w}",
                img.height, img.width
            )));
        }
        data.extend(img.pixels.iter().map(|&v| S::lit(v as f64)));
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data)?)
}

/// Stacks normalized ASC tables into `(N·P, 7)`.
pub fn asc_batch<S: Scalar>(
    samples: &[&SarSample],
    norm: &AscNormalizer,
) -> Result<Tensor<S>, FeatureError> {
    let p = samples.first().map(|s| s.asc.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(samples.len() * p * ASC_PARAMS);
    for s in samples {
        if s.asc.len() != p {
            return Err(FeatureError::Input(format!(
                "sample {} has {} centers, expected {p}",
                s.id,
                s.asc.len()
            )));
        }
        data.extend(norm.apply(&s.asc).into_iter().map(|v| S::lit(v as f64)));
    }
    Ok(Tensor::new(vec![samples.len() * p, ASC_PARAMS], data)?)
}
