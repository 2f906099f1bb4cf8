use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv, Ctx, ResidualBlock};
use super::FeatureError;
use crate::autodiff::{ParamStore, Scalar, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    /// Side length of the square input.
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// Output channels of each residual block; every block halves the resolution.
    pub channels: Vec<usize>,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stem_channels: 16,
            stem_stride: 1,
            channels: vec![16, 32, 64, 128],
        }
    }
}

impl ImageConfig {
    pub fn output_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&self.stem_channels)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let mut side = self.input_size;
        if self.stem_stride == 0 || self.stem_channels == 0 || self.channels.iter().any(|&c| c == 0)
        {
            return Err(FeatureError::Config(
                "image branch widths and strides must be positive".into(),
            ));
        }
        side = side.div_ceil(self.stem_stride);
        for _ in &self.channels {
            side = side.div_ceil(2);
        }
        if side == 0 || self.input_size < 8 {
            return Err(FeatureError::Config(format!(
                "input {} is too small for {} blocks",
                self.input_size,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Residual CNN followed by global average pooling.
#[derive(Clone, Debug)]
pub struct ImageBranch {
    pub config: ImageConfig,
    stem: Conv,
    stem_bn: BatchNorm,
    blocks: Vec<ResidualBlock>,
}

impl ImageBranch {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        config: &ImageConfig,
    ) -> Self {
        let stem = Conv::new(
            store,
            rng,
            "image.stem",
            1,
            config.stem_channels,
            3,
            config.stem_stride,
        );
        let stem_bn = BatchNorm::new(store, "image.stem_bn", config.stem_channels);
        let mut cin = config.stem_channels;
        let blocks = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let b = ResidualBlock::new(store, rng, &format!("image.block{i}"), cin, cout, 2);
                cin = cout;
                b
            })
            .collect();
        Self {
            config: config.clone(),
            stem,
            stem_bn,
            blocks,
        }
    }

    /// `(N, 1, s, s)` images to `(N, d_I)` features.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, images: Var) -> Result<Var, FeatureError> {
        let s = ctx.g.shape(images);
        let n = self.config.input_size;
        if s.len() != 4 || s[1] != 1 || s[2] != n || s[3] != n {
            return Err(FeatureError::Input(format!(
                "image batch {s:?}, expected (N, 1, {n}, {n})"
            )));
        }
        let h = self.stem.forward(ctx, images)?;
        let h = self.stem_bn.forward(ctx, h)?;
        let mut h = ctx.g.relu(h)?;
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        Ok(ctx.g.global_avg_pool(h)?)
    }
}
