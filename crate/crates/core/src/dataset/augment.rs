use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::asc_sim::AmplitudeImage;
use crate::rng::seeded;

/// Upper clamp for augmented pixel values.
pub const AUGMENT_CEILING: f32 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub crop_size: usize,
    /// Side of the centered region the crop is drawn from.
    pub crop_region: usize,
    /// Multiplicative contrast range.
    pub contrast: [f32; 2],
    /// Additive brightness range.
    pub brightness: [f32; 2],
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop_size: 64,
            crop_region: 96,
            contrast: [0.8, 1.2],
            brightness: [-0.1, 0.1],
        }
    }
}

impl AugmentationSpec {
    /// No photometric jitter; the crop position is still random.
    pub fn crop_only(crop_size: usize, crop_region: usize) -> Self {
        Self {
            crop_size,
            crop_region,
            contrast: [1.0, 1.0],
            brightness: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidAugmentation(m));
        if self.crop_size == 0 || self.crop_size > self.crop_region {
            return bad(format!(
                "crop {} does not fit region {}",
                self.crop_size, self.crop_region
            ));
        }
        for (name, r) in [("contrast", self.contrast), ("brightness", self.brightness)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return bad(format!("{name} range {r:?}"));
            }
        }
        if self.contrast[0] < 0.0 {
            return bad("negative contrast".into());
        }
        Ok(())
    }

    /// Number of distinct crop offsets per axis.
    pub fn positions(&self) -> usize {
        self.crop_region - self.crop_size + 1
    }
}

/// Random crop inside the centered region, then contrast and brightness jitter.
pub fn augment(
    image: &AmplitudeImage,
    spec: &AugmentationSpec,
    seed: u64,
) -> Result<AmplitudeImage, DataError> {
    augment_with(image, spec, &mut seeded(seed))
}

/// [`augment`] drawing from a caller-owned generator.
pub fn augment_with<R: Rng>(
    image: &AmplitudeImage,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<AmplitudeImage, DataError> {
    spec.validate()?;
    if image.height < spec.crop_region || image.width < spec.crop_region {
        return Err(DataError::ImageTooSmall {
            h: image.height,
            w: image.width,
            region: spec.crop_region,
        });
    }
    let slack = spec.crop_region - spec.crop_size;
    let top = (image.height - spec.crop_region) / 2 + rng.gen_range(0..=slack);
    let left = (image.width - spec.crop_region) / 2 + rng.gen_range(0..=slack);
    let contrast = draw(rng, spec.contrast);
    let brightness = draw(rng, spec.brightness);
    let mut out = image.crop(top, left, spec.crop_size, spec.crop_size);
    if contrast != 1.0 || brightness != 0.0 {
        for p in out.pixels.iter_mut() {
            *p = (*p * contrast + brightness).clamp(0.0, AUGMENT_CEILING);
        }
    }
    Ok(out)
}

fn draw<R: Rng>(rng: &mut R, range: [f32; 2]) -> f32 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}
