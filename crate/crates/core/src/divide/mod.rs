//! Loss-based clean/noisy division with per-class two-component mixtures.

mod gmm;

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gmm::{fit_gmm, GaussianMixture1D, MAX_ITERATIONS, TOLERANCE, VARIANCE_FLOOR};

/// Losses above this (and non-finite ones) are clamped.
pub const LOSS_CLAMP: f64 = 50.0;

#[derive(Debug, Error)]
pub enum DivideError {
    #[error("no values to fit")]
    Empty,
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("log-likelihood decreased at iteration {iteration}: {before} -> {after}")]
    LikelihoodDecreased {
        iteration: usize,
        before: f64,
        after: f64,
    },
    #[error("no mixture for class {0}")]
    MissingClass(usize),
    #[error("{0}")]
    Shape(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Per-sample cross-entropy under one branch, with the training labels used.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLedger {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub losses: Vec<f64>,
    pub classes: usize,
}

impl LossLedger {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Positions of the samples labeled `class`.
    pub fn class_members(&self, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }
}

/// `−log p[y]` per row of a row-major `N × C` probability matrix.
///
/// Non-finite or oversized losses are clamped to [`LOSS_CLAMP`] with one summary warning.
pub fn per_sample_losses(
    probs: &[f64],
    ids: &[u64],
    labels: &[usize],
    classes: usize,
) -> Result<LossLedger, DivideError> {
    if probs.len() != ids.len() * classes || labels.len() != ids.len() {
        return Err(DivideError::Shape(format!(
            "{} probabilities, {} ids, {} labels, {classes} classes",
            probs.len(),
            ids.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(DivideError::Shape(format!(
            "label {bad} for {classes} classes"
        )));
    }
    let mut clamped = Vec::new();
    let losses = probs
        .chunks(classes)
        .zip(labels)
        .zip(ids)
        .map(|((row, &y), &id)| {
            let l = -row[y].ln();
            if !l.is_finite() || l > LOSS_CLAMP {
                clamped.push(id);
                LOSS_CLAMP
            } else {
                l.max(0.0)
            }
        })
        .collect();
    if let Some(first) = clamped.first() {
        log::warn!(
            "{} losses clamped to {LOSS_CLAMP} (first: sample {first})",
            clamped.len()
        );
    }
    Ok(LossLedger {
        ids: ids.to_vec(),
        labels: labels.to_vec(),
        losses,
        classes,
    })
}

/// A class's mixture together with the min-max range used to normalize its losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassFit {
    pub class: usize,
    pub min: f64,
    pub max: f64,
    pub mixture: GaussianMixture1D,
}

impl ClassFit {
    pub fn normalize(&self, loss: f64) -> f64 {
        if self.max > self.min {
            (loss - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }

    /// Probability that a sample with this loss is correctly labeled.
    pub fn clean_probability(&self, loss: f64) -> f64 {
        self.mixture.low_posterior(self.normalize(loss))
    }
}

/// Min-max normalizes each class's losses to `[0, 1]` and fits its mixture.
/// A class without samples gets a degenerate fit.
pub fn fit_class_mixtures(ledger: &LossLedger) -> Result<Vec<ClassFit>, DivideError> {
    (0..ledger.classes)
        .map(|class| {
            let losses: Vec<f64> = ledger
                .class_members(class)
                .iter()
                .map(|&i| ledger.losses[i])
                .collect();
            if losses.is_empty() {
                return Ok(ClassFit {
                    class,
                    min: 0.0,
                    max: 0.0,
                    mixture: fit_gmm(&[0.0])?,
                });
            }
            let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut fit = ClassFit {
                class,
                min,
                max,
                mixture: fit_gmm(&[0.0])?,
            };
            let normalized: Vec<f64> = losses.iter().map(|&l| fit.normalize(l)).collect();
            fit.mixture = fit_gmm(&normalized)?;
            Ok(fit)
        })
        .collect()
}

/// One labeled sample kept for supervised training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanEntry {
    /// Position in the ledger / training set.
    pub index: usize,
    pub id: u64,
    pub label: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Division {
    pub clean: Vec<CleanEntry>,
    /// Ledger positions of the samples whose labels are dropped.
    pub noisy: Vec<usize>,
    pub threshold: f64,
    /// Clean probability of every ledger position.
    pub probs: Vec<f64>,
}

impl Division {
    pub fn clean_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.probs.len()];
        for e in &self.clean {
            mask[e.index] = true;
        }
        mask
    }
}

/// Samples with clean probability `>= threshold` keep their label.
///
/// If a class would end up with fewer than `min_clean_per_class` clean samples,
/// its most probable samples are promoted until it has that many (or runs out).
pub fn divide(
    ledger: &LossLedger,
    fits: &[ClassFit],
    threshold: f64,
    min_clean_per_class: usize,
) -> Result<Division, DivideError> {
    let mut probs = Vec::with_capacity(ledger.len());
    for (&loss, &label) in ledger.losses.iter().zip(&ledger.labels) {
        let fit = fits
            .iter()
            .find(|f| f.class == label)
            .ok_or(DivideError::MissingClass(label))?;
        probs.push(fit.clean_probability(loss));
    }
    let mut is_clean: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    for class in 0..ledger.classes {
        let mut members = ledger.class_members(class);
        let have = members.iter().filter(|&&i| is_clean[i]).count();
        if have >= min_clean_per_class {
            continue;
        }
        members.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        for &i in members.iter().take(min_clean_per_class) {
            is_clean[i] = true;
        }
    }
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for i in 0..ledger.len() {
        if is_clean[i] {
            clean.push(CleanEntry {
                index: i,
                id: ledger.ids[i],
                label: ledger.labels[i],
                prob: probs[i],
            });
        } else {
            noisy.push(i);
        }
    }
    Ok(Division {
        clean,
        noisy,
        threshold,
        probs,
    })
}

/// `(division_accuracy, division_error)`; NaN when a denominator is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisionMetrics {
    /// Share of correctly labeled samples placed in the clean subset.
    pub accuracy: f64,
    /// Share of mislabeled samples placed in the clean subset.
    pub error: f64,
}

/// `mislabeled[i]` tells whether ledger position `i` carries a wrong label.
pub fn division_metrics(clean_mask: &[bool], mislabeled: &[bool]) -> DivisionMetrics {
    let mut counts = [[0usize; 2]; 2];
    for (&c, &m) in clean_mask.iter().zip(mislabeled) {
        counts[m as usize][c as usize] += 1;
    }
    let ratio = |row: [usize; 2]| {
        let total = row[0] + row[1];
        if total == 0 {
            f64::NAN
        } else {
            row[1] as f64 / total as f64
        }
    };
    DivisionMetrics {
        accuracy: ratio(counts[0]),
        error: ratio(counts[1]),
    }
}

/// One line of the per-epoch division report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisionReportRow {
    pub epoch: usize,
    pub branch: usize,
    pub class: usize,
    pub weight_low: f64,
    pub weight_high: f64,
    pub mean_low: f64,
    pub mean_high: f64,
    pub var_low: f64,
    pub var_high: f64,
    pub degenerate: bool,
    pub clean_count: usize,
    pub division_accuracy: f64,
    pub division_error: f64,
}

/// Rows for every class of one branch's division.
pub fn report_rows(
    epoch: usize,
    branch: usize,
    ledger: &LossLedger,
    fits: &[ClassFit],
    division: &Division,
    mislabeled: &[bool],
) -> Vec<DivisionReportRow> {
    let mask = division.clean_mask();
    fits.iter()
        .map(|f| {
            let members = ledger.class_members(f.class);
            let cm: Vec<bool> = members.iter().map(|&i| mask[i]).collect();
            let ml: Vec<bool> = members.iter().map(|&i| mislabeled[i]).collect();
            let m = division_metrics(&cm, &ml);
            let g = &f.mixture;
            DivisionReportRow {
                epoch,
                branch,
                class: f.class,
                weight_low: g.weights[0],
                weight_high: g.weights[1],
                mean_low: g.means[0],
                mean_high: g.means[1],
                var_low: g.variances[0],
                var_high: g.variances[1],
                degenerate: g.degenerate,
                clean_count: cm.iter().filter(|&&c| c).count(),
                division_accuracy: m.accuracy,
                division_error: m.error,
            }
        })
        .collect()
}

/// Appends rows to a CSV file, writing the header only when the file is new.
pub fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), DivideError> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn ledger(losses: Vec<f64>, labels: Vec<usize>, classes: usize) -> LossLedger {
        LossLedger {
            ids: (0..losses.len() as u64).collect(),
            labels,
            losses,
            classes,
        }
    }

    #[test]
    fn loss_values() {
        let l = per_sample_losses(&[1.0, 0.0, 0.0], &[0], &[0], 3).unwrap();
        assert_eq!(l.losses, vec![0.0]);
        let uniform = vec![0.1; 10];
        let l = per_sample_losses(&uniform, &[0], &[4], 10).unwrap();
        assert!((l.losses[0] - 10f64.ln()).abs() < 1e-12);
        let l = per_sample_losses(&[0.0, 1.0], &[7], &[0], 2).unwrap();
        assert_eq!(l.losses[0], LOSS_CLAMP);
    }

    #[test]
    fn partition_sizes_sum_to_n() {
        let l = ledger(vec![0.1; 30], (0..30).map(|i| i % 4).collect(), 4);
        let total: usize = (0..4).map(|c| l.class_members(c).len()).sum();
        assert_eq!(total, 30);
    }

    #[test]
    fn two_clusters_divide_exactly() {
        let losses: Vec<f64> = (0..100).map(|i| if i < 50 { 0.1 } else { 2.0 }).collect();
        let l = ledger(losses, vec![0; 100], 1);
        let fits = fit_class_mixtures(&l).unwrap();
        let d = divide(&l, &fits, 0.6, 1).unwrap();
        assert_eq!(
            d.clean.iter().map(|e| e.index).collect::<Vec<_>>(),
            (0..50).collect::<Vec<_>>()
        );
        assert_eq!(d.noisy, (50..100).collect::<Vec<_>>());
    }

    #[test]
    fn threshold_extremes_and_boundary() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let losses: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..3.0)).collect();
        let l = ledger(losses, (0..40).map(|i| i % 2).collect(), 2);
        let fits = fit_class_mixtures(&l).unwrap();
        assert_eq!(divide(&l, &fits, 0.0, 0).unwrap().clean.len(), 40);
        assert_eq!(divide(&l, &fits, 1.01, 0).unwrap().noisy.len(), 40);
        let d = divide(&l, &fits, 0.5, 0).unwrap();
        let exact = d.probs[7];
        let at = divide(&l, &fits, exact, 0).unwrap();
        assert!(at.clean_mask()[7]);
        assert_eq!(at.clean.len() + at.noisy.len(), 40);
    }

    #[test]
    fn every_class_keeps_an_anchor() {
        let l = ledger(vec![0.1, 0.2, 3.0, 4.0, 5.0], vec![0, 0, 1, 1, 1], 2);
        let fits = fit_class_mixtures(&l).unwrap();
        let d = divide(&l, &fits, 1.01, 1).unwrap();
        let labels: Vec<usize> = d.clean.iter().map(|e| e.label).collect();
        assert!(labels.contains(&0) && labels.contains(&1));
        assert_eq!(d.clean.len(), 2);
    }

    #[test]
    fn classes_are_fitted_independently() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let losses: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..3.0)).collect();
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let a = ledger(losses.clone(), labels.clone(), 3);
        let mut perturbed = losses;
        for i in (0..60).filter(|i| i % 3 != 0) {
            perturbed[i] *= 1.7;
        }
        let b = ledger(perturbed, labels, 3);
        let pa = divide(&a, &fit_class_mixtures(&a).unwrap(), 0.6, 1)
            .unwrap()
            .probs;
        let pb = divide(&b, &fit_class_mixtures(&b).unwrap(), 0.6, 1)
            .unwrap()
            .probs;
        for i in (0..60).filter(|i| i % 3 == 0) {
            assert_eq!(pa[i], pb[i]);
        }
    }

    #[test]
    fn missing_mixture_is_an_error() {
        let l = ledger(vec![0.1, 0.2], vec![0, 1], 2);
        let fits = fit_class_mixtures(&l).unwrap();
        assert!(matches!(
            divide(&l, &fits[..1], 0.5, 0),
            Err(DivideError::MissingClass(1))
        ));
    }

    #[test]
    fn metric_cases() {
        let mislabeled = [false, false, true, true];
        assert_eq!(
            division_metrics(&[true, true, false, false], &mislabeled),
            DivisionMetrics {
                accuracy: 1.0,
                error: 0.0
            }
        );
        assert_eq!(
            division_metrics(&[true; 4], &mislabeled),
            DivisionMetrics {
                accuracy: 1.0,
                error: 1.0
            }
        );
        let m = division_metrics(&[true, false], &[false, false]);
        assert_eq!(m.accuracy, 0.5);
        assert!(m.error.is_nan());
    }

    #[test]
    fn random_assignment_gives_half() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mislabeled: Vec<bool> = (0..1000).map(|i| i < 400).collect();
        let mask: Vec<bool> = (0..1000).map(|_| rng.gen_bool(0.5)).collect();
        let m = division_metrics(&mask, &mislabeled);
        assert!(
            (m.accuracy - 0.5).abs() <= 0.05 && (m.error - 0.5).abs() <= 0.05,
            "{m:?}"
        );
    }

    #[test]
    fn report_appends_with_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("division.csv");
        let l = ledger(vec![0.1, 0.2, 3.0, 4.0, 0.3], vec![0, 0, 0, 0, 1], 2);
        let fits = fit_class_mixtures(&l).unwrap();
        let d = divide(&l, &fits, 0.6, 1).unwrap();
        let rows = report_rows(1, 0, &l, &fits, &d, &[false, false, true, true, false]);
        append_csv(&path, &rows).unwrap();
        append_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(text.lines().filter(|l| l.starts_with("epoch")).count(), 1);
    }
}
