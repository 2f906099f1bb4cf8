use rand::Rng;

use crate::asc_sim::{AmplitudeImage, ASC_PARAMS};
use crate::autodiff::{ParamStore, Scalar, Tensor};
use crate::dataset::{augment_with, AscNormalizer, AugmentationSpec, SarSample};
use crate::features::{Ctx, FusionNet};

use super::SslError;

/// Training or test samples held in network-ready form.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub ids: Vec<u64>,
    /// Labels the learner sees (possibly corrupted).
    pub labels: Vec<usize>,
    pub true_labels: Vec<usize>,
    pub images: Vec<AmplitudeImage>,
    /// Normalized ASC tables, `len · centers · 7` values.
    pub asc: Vec<f32>,
    pub centers: usize,
    pub classes: usize,
}

impl PreparedSet {
    pub fn new(
        samples: &[SarSample],
        norm: &AscNormalizer,
        classes: usize,
    ) -> Result<Self, SslError> {
        let centers = samples
            .first()
            .map(|s| s.asc.len())
            .ok_or(SslError::EmptySet)?;
        let mut asc = Vec::with_capacity(samples.len() * centers * ASC_PARAMS);
        for s in samples {
            if s.asc.len() != centers {
                return Err(SslError::Shape(format!(
                    "sample {} has {} centers, expected {centers}",
                    s.id,
                    s.asc.len()
                )));
            }
            if s.train_label >= classes || s.true_label >= classes {
                return Err(SslError::Shape(format!(
                    "sample {} label outside {classes} classes",
                    s.id
                )));
            }
            asc.extend(norm.apply(&s.asc));
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.id).collect(),
            labels: samples.iter().map(|s| s.train_label).collect(),
            true_labels: samples.iter().map(|s| s.true_label).collect(),
            images: samples.iter().map(|s| s.image.clone()).collect(),
            asc,
            centers,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mislabeled(&self) -> Vec<bool> {
        self.labels
            .iter()
            .zip(&self.true_labels)
            .map(|(a, b)| a != b)
            .collect()
    }

    /// `(idx.len() · centers, 7)` ASC rows.
    pub fn asc_tensor<S: Scalar>(&self, idx: &[usize]) -> Tensor<S> {
        let w = self.centers * ASC_PARAMS;
        let data = idx
            .iter()
            .flat_map(|&i| {
                self.asc[i * w..(i + 1) * w]
                    .iter()
                    .map(|&v| S::lit(v as f64))
            })
            .collect();
        Tensor::new(vec![idx.len() * self.centers, ASC_PARAMS], data).expect("row width")
    }

    /// `(n, 1, size, size)` center crops.
    pub fn center_images<S: Scalar>(
        &self,
        idx: &[usize],
        size: usize,
    ) -> Result<Tensor<S>, SslError> {
        let mut data = Vec::with_capacity(idx.len() * size * size);
        for &i in idx {
            let img = &self.images[i];
            if img.height < size || img.width < size {
                return Err(SslError::Shape(format!(
                    "{}x{} image, crop {size}",
                    img.height, img.width
                )));
            }
            data.extend(
                img.center_crop(size)
                    .pixels
                    .iter()
                    .map(|&v| S::lit(v as f64)),
            );
        }
        Ok(Tensor::new(vec![idx.len(), 1, size, size], data)?)
    }

    /// One random augmentation per index, flattened row-major.
    pub fn augmented_pixels<R: Rng>(
        &self,
        idx: &[usize],
        spec: &AugmentationSpec,
        rng: &mut R,
    ) -> Result<Vec<f32>, SslError> {
        let mut out = Vec::with_capacity(idx.len() * spec.crop_size * spec.crop_size);
        for &i in idx {
            out.extend(augment_with(&self.images[i], spec, rng)?.pixels);
        }
        Ok(out)
    }
}

/// Softmax rows of one eval-mode pass.
pub fn predict_batch<S: Scalar>(
    net: &FusionNet,
    params: &ParamStore<S>,
    images: &Tensor<S>,
    asc: &Tensor<S>,
) -> Result<Vec<Vec<f64>>, SslError> {
    let mut ctx = Ctx::new(params, false);
    let iv = ctx.g.constant(images);
    let av = ctx.g.constant(asc);
    let out = net.forward(&mut ctx, iv, av)?;
    let p = ctx.g.softmax(out.logits)?;
    Ok(ctx
        .g
        .value(p)
        .chunks(net.classes)
        .map(|r| r.iter().map(|v| v.f64()).collect())
        .collect())
}

/// Eval-mode class probabilities on center crops, `len × C` flattened.
pub fn predict_set<S: Scalar>(
    net: &FusionNet,
    params: &ParamStore<S>,
    set: &PreparedSet,
    crop: usize,
    chunk: usize,
) -> Result<Vec<f64>, SslError> {
    let all: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len() * net.classes);
    for idx in all.chunks(chunk.max(1)) {
        let images = set.center_images::<S>(idx, crop)?;
        let asc = set.asc_tensor::<S>(idx);
        for row in predict_batch(net, params, &images, &asc)? {
            out.extend(row);
        }
    }
    Ok(out)
}
