//! Samples, splits, label-noise injection and training-time augmentation.

mod augment;
mod io;
mod noise;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asc_sim::{generate_class_sample, AmplitudeImage, AscError, AscSet, SimConfig};
use crate::rng::{derive_seed, seeded};

pub use augment::{augment, augment_with, AugmentationSpec};
pub use io::{
    load_dataset, read_audit, read_split, save_dataset, write_audit, write_split, AuditRow,
    Manifest, AUDIT_FILE, MANIFEST_FILE, SPLIT_FILE,
};
pub use noise::{default_pair_map, inject_noise, NoiseKind, NoiseSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Asc(#[from] AscError),
    #[error("class {class} has {have} samples, {need} needed")]
    InsufficientSamples {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("invalid noise specification: {0}")]
    InvalidNoise(String),
    #[error("labels are already corrupted (sample {0})")]
    AlreadyNoisy(u64),
    #[error("image {h}x{w} is smaller than the {region}x{region} augmentation region")]
    ImageTooSmall { h: usize, w: usize, region: usize },
    #[error("invalid augmentation: {0}")]
    InvalidAugmentation(String),
    #[error("duplicate sample id {0}")]
    DuplicateId(u64),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One target: paired scattering centers and image, with labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SarSample {
    pub id: u64,
    pub asc: AscSet,
    pub image: AmplitudeImage,
    pub true_label: usize,
    /// Label used for training; equals `true_label` until noise is injected.
    pub train_label: usize,
}

impl SarSample {
    pub fn is_mislabeled(&self) -> bool {
        self.train_label != self.true_label
    }
}

/// Generates `per_class` samples of every class, ids assigned in class-major order.
pub fn generate_dataset(
    sim: &SimConfig,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<SarSample>, DataError> {
    let mut out = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        for i in 0..per_class {
            let sample_seed = derive_seed(seed, (class * per_class + i) as u64);
            let mut s = generate_class_sample(class, sample_seed, sim)?;
            s.id = (class * per_class + i) as u64;
            out.push(s);
        }
    }
    Ok(out)
}

/// Per-class disjoint train/test split; both outputs are ordered by id.
pub fn split(
    samples: &[SarSample],
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(Vec<SarSample>, Vec<SarSample>), DataError> {
    let mut by_class: BTreeMap<usize, Vec<&SarSample>> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for s in samples {
        if !seen.insert(s.id) {
            return Err(DataError::DuplicateId(s.id));
        }
        by_class.entry(s.true_label).or_default().push(s);
    }
    let need = train_per_class + test_per_class;
    let mut train = Vec::with_capacity(classes * train_per_class);
    let mut test = Vec::with_capacity(classes * test_per_class);
    for class in 0..classes {
        let mut members = by_class.remove(&class).unwrap_or_default();
        if members.len() < need {
            return Err(DataError::InsufficientSamples {
                class,
                have: members.len(),
                need,
            });
        }
        members.sort_by_key(|s| s.id);
        members.shuffle(&mut seeded(derive_seed(seed, class as u64)));
        train.extend(members[..train_per_class].iter().map(|s| (*s).clone()));
        test.extend(members[train_per_class..need].iter().map(|s| (*s).clone()));
    }
    train.sort_by_key(|s| s.id);
    test.sort_by_key(|s| s.id);
    Ok((train, test))
}

/// Per-column min and max of the raw ASC parameters over a sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscNormalizer {
    pub min: [f64; 7],
    pub max: [f64; 7],
}

impl AscNormalizer {
    pub fn fit(samples: &[SarSample]) -> Self {
        let mut min = [f64::INFINITY; 7];
        let mut max = [f64::NEG_INFINITY; 7];
        for s in samples {
            for c in &s.asc.centers {
                for (k, v) in c.to_array().into_iter().enumerate() {
                    min[k] = min[k].min(v);
                    max[k] = max[k].max(v);
                }
            }
        }
        for k in 0..7 {
            if !min[k].is_finite() {
                min[k] = 0.0;
                max[k] = 1.0;
            }
        }
        Self { min, max }
    }

    /// Maps each column to `[0, 1]` (constant columns map to 0).
    pub fn apply(&self, asc: &AscSet) -> Vec<f32> {
        asc.centers
            .iter()
            .flat_map(|c| {
                c.to_array().into_iter().enumerate().map(|(k, v)| {
                    let span = self.max[k] - self.min[k];
                    if span > 0.0 {
                        ((v - self.min[k]) / span) as f32
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    }
}
