//! Two-branch co-training: warm-up, cross-branch division exchange,
//! semi-supervised epochs and ensemble evaluation.

mod checkpoint;

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, SgdConfig};
use crate::divide::{
    divide, division_metrics, fit_class_mixtures, per_sample_losses, report_rows, ClassFit, DivideError,
    DivisionMetrics, DivisionReportRow, LossLedger,
};
use crate::features::NetConfig;
use crate::rng::derive_seed;
use crate::ssl::{
    ce_epoch, predict_set, ssl_epoch, AlignmentState, BranchState, ExchangedDivision, PreparedSet, SslError,
    SslEpochStats, SslHyper,
};

pub use checkpoint::{load_branches, save_branches};

#[derive(Debug, Error)]
pub enum CotrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("sample {0} appears in both the training and the test set")]
    Leakage(u64),
    #[error("empty test set")]
    EmptyTestSet,
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Divide(#[from] DivideError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Full two-branch method.
    Clsdf,
    /// One network trained with plain cross-entropy on the observed labels.
    Ce,
}

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "clsdf" => Ok(Self::Clsdf),
            "ce" => Ok(Self::Ce),
            other => Err(format!("unknown baseline {other:?} (expected ce or clsdf)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// Epochs including warm-up.
    pub total_epochs: usize,
    pub warm_up_epochs: usize,
    pub lr: f64,
    /// Epoch from which the learning rate is halved; `None` means mid-run.
    pub lr_drop_epoch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Initialization seeds of the two branches.
    pub branch_seeds: [u64; 2],
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_epochs: 60,
            warm_up_epochs: 5,
            lr: 0.02,
            lr_drop_epoch: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            branch_seeds: [1, 2],
            checkpoint_every: 0,
        }
    }
}

impl Schedule {
    pub fn sgd(&self, epoch: usize) -> SgdConfig {
        let drop = self.lr_drop_epoch.unwrap_or(self.total_epochs / 2);
        SgdConfig {
            lr: if epoch >= drop { self.lr / 2.0 } else { self.lr },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivideConfig {
    /// Clean-probability threshold.
    pub threshold: f64,
    pub min_clean_per_class: usize,
}

impl Default for DivideConfig {
    fn default() -> Self {
        Self {
            threshold: 0.6,
            min_clean_per_class: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub ssl: SslHyper,
    pub schedule: Schedule,
    pub divide: DivideConfig,
    pub baseline: Baseline,
    /// Train the two branches concurrently each epoch, each seeing the other's
    /// parameters from the start of the epoch.
    pub parallel: bool,
    /// Rows per evaluation pass.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            ssl: SslHyper::default(),
            schedule: Schedule::default(),
            divide: DivideConfig::default(),
            baseline: Baseline::Clsdf,
            parallel: false,
            eval_batch: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CotrainError> {
        let bad = |m: String| Err(CotrainError::Config(m));
        let s = &self.schedule;
        if s.total_epochs == 0 {
            return bad("total_epochs must be positive".into());
        }
        if self.baseline == Baseline::Clsdf && s.warm_up_epochs >= s.total_epochs {
            return bad(format!(
                "warm_up_epochs {} must be below total_epochs {}",
                s.warm_up_epochs, s.total_epochs
            ));
        }
        if s.branch_seeds.iter().any(|&x| x > i64::MAX as u64) {
            return bad("branch seeds must fit a signed 64-bit integer".into());
        }
        if s.branch_seeds[0] == s.branch_seeds[1] {
            return bad("branch seeds must differ".into());
        }
        if !(s.lr > 0.0) || !(s.momentum >= 0.0) || !(s.weight_decay >= 0.0) {
            return bad("learning rate must be positive, momentum and decay non-negative".into());
        }
        if !(self.divide.threshold >= 0.0) {
            return bad(format!("threshold {}", self.divide.threshold));
        }
        if self.eval_batch == 0 {
            return bad("eval_batch must be positive".into());
        }
        self.ssl.validate().map_err(CotrainError::Config)?;
        if self.ssl.augmentation.crop_size != self.net.image.input_size {
            return bad(format!(
                "crop size {} differs from network input {}",
                self.ssl.augmentation.crop_size, self.net.image.input_size
            ));
        }
        if self.net.scatter.k == 0 {
            return bad("neighbour count must be positive".into());
        }
        Ok(())
    }

    fn crop(&self) -> usize {
        self.ssl.augmentation.crop_size
    }
}

/// Errors on the first test id that also occurs in training.
pub fn check_leakage(train_ids: &[u64], test_ids: &[u64]) -> Result<(), CotrainError> {
    let train: HashSet<u64> = train_ids.iter().copied().collect();
    match test_ids.iter().find(|id| train.contains(id)) {
        Some(&id) => Err(CotrainError::Leakage(id)),
        None => Ok(()),
    }
}

/// Ensemble accuracy and confusion matrix (rows are true classes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub branch_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Predicts with the mean of the branches' eval-mode softmax outputs.
pub fn evaluate(
    branches: &[&BranchState],
    set: &PreparedSet,
    crop: usize,
    chunk: usize,
) -> Result<Evaluation, CotrainError> {
    if set.is_empty() {
        return Err(CotrainError::EmptyTestSet);
    }
    let first = branches
        .first()
        .ok_or_else(|| CotrainError::Config("no branches to evaluate".into()))?;
    let c = first.net.classes;
    let probs = branches
        .iter()
        .map(|b| predict_set(&b.net, &b.params, set, crop, chunk))
        .collect::<Result<Vec<_>, _>>()?;
    let accuracy_of = |pred: &dyn Fn(usize) -> usize| {
        (0..set.len()).filter(|&i| pred(i) == set.true_labels[i]).count() as f64 / set.len() as f64
    };
    let mut mean = vec![0.0; set.len() * c];
    for p in &probs {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / probs.len() as f64);
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for i in 0..set.len() {
        confusion[set.true_labels[i]][argmax(&mean[i * c..(i + 1) * c])] += 1;
    }
    Ok(Evaluation {
        accuracy: accuracy_of(&|i| argmax(&mean[i * c..(i + 1) * c])),
        branch_accuracy: probs
            .iter()
            .map(|p| accuracy_of(&|i| argmax(&p[i * c..(i + 1) * c])))
            .collect(),
        confusion,
    })
}

/// Loss ledger, per-class fits and the division one branch proposes.
#[derive(Clone, Debug)]
pub struct BranchDivision {
    pub ledger: LossLedger,
    pub fits: Vec<ClassFit>,
    pub exchanged: ExchangedDivision,
    pub metrics: DivisionMetrics,
}

pub fn propose_division(
    branch: &BranchState,
    set: &PreparedSet,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<BranchDivision, CotrainError> {
    let probs = predict_set(&branch.net, &branch.params, set, cfg.crop(), cfg.eval_batch)?;
    let ledger = per_sample_losses(&probs, &set.ids, &set.labels, set.classes)?;
    let fits = fit_class_mixtures(&ledger)?;
    let division = divide(&ledger, &fits, cfg.divide.threshold, cfg.divide.min_clean_per_class)?;
    let metrics = division_metrics(&division.clean_mask(), &set.mislabeled());
    Ok(BranchDivision {
        ledger,
        fits,
        exchanged: ExchangedDivision {
            producer: branch.id,
            epoch,
            division,
        },
        metrics,
    })
}

/// Mean per-class min-max normalized loss of clean and of mislabeled samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSeparation {
    pub clean_mean: f64,
    pub mislabeled_mean: f64,
}

impl LossSeparation {
    pub fn gap(&self) -> f64 {
        self.mislabeled_mean - self.clean_mean
    }
}

/// Per-sample normalized losses of one branch, in set order.
pub fn normalized_losses(
    branch: &BranchState,
    set: &PreparedSet,
    crop: usize,
    chunk: usize,
) -> Result<Vec<f64>, CotrainError> {
    let probs = predict_set(&branch.net, &branch.params, set, crop, chunk)?;
    let ledger = per_sample_losses(&probs, &set.ids, &set.labels, set.classes)?;
    let fits = fit_class_mixtures(&ledger)?;
    Ok((0..ledger.len())
        .map(|i| {
            let fit = fits.iter().find(|f| f.class == ledger.labels[i]).expect("fit per class");
            fit.normalize(ledger.losses[i])
        })
        .collect())
}

pub fn loss_separation(normalized: &[f64], mislabeled: &[bool]) -> LossSeparation {
    let mean = |flag: bool| {
        let v: Vec<f64> = normalized
            .iter()
            .zip(mislabeled)
            .filter(|(_, &m)| m == flag)
            .map(|(&x, _)| x)
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    LossSeparation {
        clean_mean: mean(false),
        mislabeled_mean: mean(true),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    WarmUp,
    SemiSupervised,
    CrossEntropy,
}

/// Per-epoch record; per-branch arrays are indexed by branch id (the
/// cross-entropy baseline fills slot 0 only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub accuracy: f64,
    pub branch_accuracy: Vec<f64>,
    pub ce_loss: Vec<f64>,
    pub mse_loss: Vec<f64>,
    pub lambda_u: Vec<f64>,
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    /// Quality of the division each branch produced this epoch.
    pub division_accuracy: Vec<f64>,
    pub division_error: Vec<f64>,
    /// Producer of the division each branch consumed; empty outside
    /// semi-supervised epochs.
    pub consumed_from: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub baseline: Baseline,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub final_branch_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    /// Separation of normalized losses right after warm-up, per branch.
    pub warm_up_separation: Vec<LossSeparation>,
    /// Divisions proposed from the final parameters, per branch.
    pub final_division: Vec<DivisionMetrics>,
    #[serde(skip)]
    pub division_rows: Vec<DivisionReportRow>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Serialized form without timing, for bit-level comparison of runs.
    pub fn fingerprint(&self) -> String {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        let mut s = toml::to_string(&r).expect("report serializes");
        for row in &self.division_rows {
            s.push_str(&format!("{row:?}\n"));
        }
        s
    }
}

/// Both branches, or the single cross-entropy network.
pub struct Trained {
    pub branches: Vec<BranchState>,
    pub report: RunReport,
}

/// Freshly initialized branches (one for the cross-entropy baseline).
pub fn init_branches(cfg: &TrainConfig, classes: usize, labels: &[usize]) -> Result<Vec<BranchState>, CotrainError> {
    let count = match cfg.baseline {
        Baseline::Clsdf => 2,
        Baseline::Ce => 1,
    };
    (0..count)
        .map(|id| {
            let seed = cfg.schedule.branch_seeds[id];
            let mut align = AlignmentState::uniform(classes, cfg.ssl.alignment);
            align.target = cfg.ssl.target(labels, classes);
            Ok(BranchState::new(id, &cfg.net, classes, seed, derive_seed(seed, 0x5eed), align)?)
        })
        .collect()
}

/// Runs the whole schedule and evaluates on `test` after every epoch.
/// `on_epoch` sees the branches after each epoch (for checkpoints and logs).
pub fn run(
    cfg: &TrainConfig,
    train: &PreparedSet,
    test: &PreparedSet,
    mut on_epoch: impl FnMut(&EpochRecord, &[BranchState]) -> Result<(), CotrainError>,
) -> Result<Trained, CotrainError> {
    let started = Instant::now();
    cfg.validate()?;
    check_leakage(&train.ids, &test.ids)?;
    if train.is_empty() {
        return Err(CotrainError::Config("empty training set".into()));
    }
    if test.is_empty() {
        return Err(CotrainError::EmptyTestSet);
    }
    if train.classes != test.classes || train.centers != test.centers {
        return Err(CotrainError::Config("training and test sets differ in classes or centers".into()));
    }
    if train.centers <= cfg.net.scatter.k {
        return Err(CotrainError::Config(format!(
            "{} neighbours need more than {} centers",
            cfg.net.scatter.k, train.centers
        )));
    }
    let crop = cfg.crop();
    let mut branches = init_branches(cfg, train.classes, &train.labels)?;
    let n = branches.len();
    let mislabeled = train.mislabeled();
    let mut report = RunReport {
        baseline: cfg.baseline,
        epochs: Vec::new(),
        final_accuracy: f64::NAN,
        best_accuracy: f64::NAN,
        final_branch_accuracy: Vec::new(),
        confusion: Vec::new(),
        warm_up_separation: Vec::new(),
        final_division: Vec::new(),
        division_rows: Vec::new(),
        wall_clock_secs: 0.0,
    };

    for epoch in 0..cfg.schedule.total_epochs {
        let sgd = cfg.schedule.sgd(epoch);
        let mut rec = EpochRecord {
            epoch,
            phase: Phase::CrossEntropy,
            lr: sgd.lr,
            accuracy: f64::NAN,
            branch_accuracy: Vec::new(),
            ce_loss: vec![f64::NAN; n],
            mse_loss: vec![f64::NAN; n],
            lambda_u: vec![f64::NAN; n],
            clean: vec![0; n],
            noisy: vec![0; n],
            division_accuracy: vec![f64::NAN; n],
            division_error: vec![f64::NAN; n],
            consumed_from: Vec::new(),
        };
        let warm = epoch < cfg.schedule.warm_up_epochs;
        if cfg.baseline == Baseline::Ce || warm {
            rec.phase = if cfg.baseline == Baseline::Ce {
                Phase::CrossEntropy
            } else {
                Phase::WarmUp
            };
            for b in branches.iter_mut() {
                rec.ce_loss[b.id] = ce_epoch(b, train, sgd, cfg.ssl.batch_size, crop)?;
            }
        } else {
            rec.phase = Phase::SemiSupervised;
            let proposals = branches
                .iter()
                .map(|b| propose_division(b, train, cfg, epoch))
                .collect::<Result<Vec<_>, _>>()?;
            for p in &proposals {
                let id = p.exchanged.producer;
                rec.division_accuracy[id] = p.metrics.accuracy;
                rec.division_error[id] = p.metrics.error;
                report.division_rows.extend(report_rows(
                    epoch,
                    id,
                    &p.ledger,
                    &p.fits,
                    &p.exchanged.division,
                    &mislabeled,
                ));
            }
            let progress = (epoch - cfg.schedule.warm_up_epochs) as f64;
            let stats = train_exchanged(&mut branches, &proposals, train, cfg, sgd, progress)?;
            for (id, (s, from)) in stats.into_iter().enumerate() {
                rec.ce_loss[id] = s.ce;
                rec.mse_loss[id] = s.mse;
                rec.lambda_u[id] = s.lambda_u;
                rec.clean[id] = s.clean;
                rec.noisy[id] = s.noisy;
                rec.consumed_from.push(from);
            }
        }
        let refs: Vec<&BranchState> = branches.iter().collect();
        let eval = evaluate(&refs, test, crop, cfg.eval_batch)?;
        rec.accuracy = eval.accuracy;
        rec.branch_accuracy = eval.branch_accuracy.clone();
        report.best_accuracy = if report.best_accuracy.is_nan() {
            eval.accuracy
        } else {
            report.best_accuracy.max(eval.accuracy)
        };
        report.final_accuracy = eval.accuracy;
        report.final_branch_accuracy = eval.branch_accuracy;
        report.confusion = eval.confusion;
        log::info!(
            "epoch {epoch} {:?}: acc {:.4} branches {:?} ce {:?} mse {:?}",
            rec.phase,
            rec.accuracy,
            rec.branch_accuracy,
            rec.ce_loss,
            rec.mse_loss
        );
        if cfg.baseline == Baseline::Clsdf && epoch + 1 == cfg.schedule.warm_up_epochs {
            for b in &branches {
                let norm = normalized_losses(b, train, crop, cfg.eval_batch)?;
                report.warm_up_separation.push(loss_separation(&norm, &mislabeled));
            }
        }
        on_epoch(&rec, &branches)?;
        report.epochs.push(rec);
    }
    if cfg.baseline == Baseline::Clsdf {
        for b in &branches {
            let p = propose_division(b, train, cfg, cfg.schedule.total_epochs)?;
            report.final_division.push(p.metrics);
        }
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(Trained { branches, report })
}

/// Branch `i` trains on the division proposed by the other branch.
fn train_exchanged(
    branches: &mut [BranchState],
    proposals: &[BranchDivision],
    train: &PreparedSet,
    cfg: &TrainConfig,
    sgd: SgdConfig,
    progress: f64,
) -> Result<Vec<(SslEpochStats, usize)>, CotrainError> {
    let (a, b) = branches.split_at_mut(1);
    let (a, b) = (&mut a[0], &mut b[0]);
    let (from_a, from_b) = (&proposals[0].exchanged, &proposals[1].exchanged);
    if cfg.parallel {
        let (a_prev, b_prev) = (a.clone(), b.clone());
        let (ra, rb) = std::thread::scope(|s| {
            let ha = s.spawn(|| ssl_epoch(a, &b_prev, train, from_b, &cfg.ssl, sgd, progress));
            let hb = s.spawn(|| ssl_epoch(b, &a_prev, train, from_a, &cfg.ssl, sgd, progress));
            (ha.join().expect("branch thread"), hb.join().expect("branch thread"))
        });
        Ok(vec![(ra?, from_b.producer), (rb?, from_a.producer)])
    } else {
        let sa = ssl_epoch(a, b, train, from_b, &cfg.ssl, sgd, progress)?;
        let sb = ssl_epoch(b, a, train, from_a, &cfg.ssl, sgd, progress)?;
        Ok(vec![(sa, from_b.producer), (sb, from_a.producer)])
    }
}
