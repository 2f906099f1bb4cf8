use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cotrain::{Phase, RunReport};

use super::HarnessError;

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, HarnessError> {
    let file = File::create(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn finish<W: std::io::Write>(mut w: csv::Writer<W>, path: &Path) -> Result<(), HarnessError> {
    w.flush().map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Data(format!("{}: {e}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(
        File::create(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?,
    ));
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    finish(w, path)
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    phase: Phase,
    lr: f64,
    accuracy: f64,
    branch: usize,
    branch_accuracy: f64,
    ce_loss: f64,
    mse_loss: f64,
    lambda_u: f64,
    clean: usize,
    noisy: usize,
    division_accuracy: f64,
    division_error: f64,
    consumed_from: Option<usize>,
}

const CURVE_HEADER: &[&str] = &[
    "epoch",
    "phase",
    "lr",
    "accuracy",
    "branch",
    "branch_accuracy",
    "ce_loss",
    "mse_loss",
    "lambda_u",
    "clean",
    "noisy",
    "division_accuracy",
    "division_error",
    "consumed_from",
];

/// One row per epoch and branch.
pub fn write_curves(path: &Path, report: &RunReport) -> Result<(), HarnessError> {
    let mut rows = Vec::new();
    for e in &report.epochs {
        for b in 0..e.ce_loss.len() {
            rows.push(CurveRow {
                epoch: e.epoch,
                phase: e.phase,
                lr: e.lr,
                accuracy: e.accuracy,
                branch: b,
                branch_accuracy: e.branch_accuracy[b],
                ce_loss: e.ce_loss[b],
                mse_loss: e.mse_loss[b],
                lambda_u: e.lambda_u[b],
                clean: e.clean[b],
                noisy: e.noisy[b],
                division_accuracy: e.division_accuracy[b],
                division_error: e.division_error[b],
                consumed_from: e.consumed_from.get(b).copied(),
            });
        }
    }
    write_rows(path, CURVE_HEADER, &rows)
}

/// Square matrix with a `true_class` column followed by one column per predicted class.
pub fn write_confusion(path: &Path, confusion: &[Vec<usize>]) -> Result<(), HarnessError> {
    let mut w = writer(path)?;
    let mut header = vec!["true_class".to_string()];
    header.extend((0..confusion.len()).map(|c| format!("pred_{c}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for (c, row) in confusion.iter().enumerate() {
        let mut rec = vec![c.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    finish(w, path)
}

/// `export-plots`: accuracy, loss and division-quality series from a report.
pub fn export_plots(report: &RunReport, dir: &Path) -> Result<Vec<String>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::Data(format!("{}: {e}", dir.display())))?;
    let branches = report.epochs.first().map_or(0, |e| e.ce_loss.len());

    let mut header = vec!["epoch".to_string(), "ensemble".to_string()];
    header.extend((0..branches).map(|b| format!("branch_{b}")));
    let path = dir.join("accuracy.csv");
    let mut w = writer(&path)?;
    w.write_record(&header).map_err(csv_err(&path))?;
    for e in &report.epochs {
        let mut rec = vec![e.epoch.to_string(), e.accuracy.to_string()];
        rec.extend(e.branch_accuracy.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    finish(w, &path)?;

    #[derive(Serialize)]
    struct LossRow {
        epoch: usize,
        branch: usize,
        ce_loss: f64,
        mse_loss: f64,
        lambda_u: f64,
    }
    #[derive(Serialize)]
    struct DivisionRow {
        epoch: usize,
        branch: usize,
        division_accuracy: f64,
        division_error: f64,
    }
    let mut losses = Vec::new();
    let mut division = Vec::new();
    for e in &report.epochs {
        for b in 0..branches {
            losses.push(LossRow {
                epoch: e.epoch,
                branch: b,
                ce_loss: e.ce_loss[b],
                mse_loss: e.mse_loss[b],
                lambda_u: e.lambda_u[b],
            });
            if e.phase == Phase::SemiSupervised {
                division.push(DivisionRow {
                    epoch: e.epoch,
                    branch: b,
                    division_accuracy: e.division_accuracy[b],
                    division_error: e.division_error[b],
                });
            }
        }
    }
    write_rows(&dir.join("losses.csv"), &["epoch", "branch", "ce_loss", "mse_loss", "lambda_u"], &losses)?;
    write_rows(
        &dir.join("division_quality.csv"),
        &["epoch", "branch", "division_accuracy", "division_error"],
        &division,
    )?;
    Ok(vec!["accuracy.csv".into(), "losses.csv".into(), "division_quality.csv".into()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub branch: usize,
    pub class: usize,
    pub bin_low: f64,
    pub bin_high: f64,
    pub clean: usize,
    pub mislabeled: usize,
}

/// Counts normalized losses (in [0, 1]) per observed class into equal-width bins.
pub fn loss_histogram(
    branch: usize,
    normalized: &[f64],
    labels: &[usize],
    mislabeled: &[bool],
    classes: usize,
    bins: usize,
) -> Vec<HistogramRow> {
    let mut rows: Vec<HistogramRow> = (0..classes)
        .flat_map(|class| {
            (0..bins).map(move |b| HistogramRow {
                branch,
                class,
                bin_low: b as f64 / bins as f64,
                bin_high: (b + 1) as f64 / bins as f64,
                clean: 0,
                mislabeled: 0,
            })
        })
        .collect();
    for ((&v, &y), &bad) in normalized.iter().zip(labels).zip(mislabeled) {
        let bin = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        let row = &mut rows[y * bins + bin];
        if bad {
            row.mislabeled += 1;
        } else {
            row.clean += 1;
        }
    }
    rows
}

pub fn write_histogram(path: &Path, rows: &[HistogramRow]) -> Result<(), HarnessError> {
    write_rows(path, &["branch", "class", "bin_low", "bin_high", "clean", "mislabeled"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins_cover_unit_interval() {
        let rows = loss_histogram(0, &[0.0, 0.49, 0.5, 1.0, 0.2], &[0, 0, 1, 1, 1], &[false, false, true, true, false], 2, 2);
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].clean, rows[0].mislabeled), (2, 0));
        assert_eq!((rows[2].clean, rows[2].mislabeled), (1, 0));
        assert_eq!((rows[3].clean, rows[3].mislabeled), (0, 2));
        let total: usize = rows.iter().map(|r| r.clean + r.mislabeled).sum();
        assert_eq!(total, 5);
    }
}
