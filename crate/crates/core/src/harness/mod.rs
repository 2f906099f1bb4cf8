//! Experiment configuration, dataset preparation and run-directory output.

mod output;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asc_sim::SimConfig;
use crate::autodiff::AutodiffError;
use crate::cotrain::{self, Baseline, CotrainError, RunReport, TrainConfig, Trained};
use crate::dataset::{
    generate_dataset, inject_noise, load_dataset, read_audit, read_split, save_dataset, split, write_audit,
    write_split, AscNormalizer, DataError, NoiseKind, NoiseSpec, SarSample, AUDIT_FILE, SPLIT_FILE,
};
use crate::divide::DivideError;
use crate::rng::derive_seed;
use crate::ssl::{PreparedSet, SslError};

pub use output::{
    export_plots, loss_histogram, write_confusion, write_curves, write_histogram, HistogramRow,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.toml";
pub const CURVES_FILE: &str = "curves.csv";
pub const DIVISION_FILE: &str = "division.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const WARM_UP_MODEL_FILE: &str = "warmup.ckpt";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidNoise(_) | DataError::InvalidAugmentation(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<AutodiffError> for HarnessError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite { .. } => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<SslError> for HarnessError {
    fn from(e: SslError) -> Self {
        match e {
            SslError::NonFinite(_) => Self::Numeric(e.to_string()),
            SslError::Autodiff(a) => a.into(),
            SslError::Data(d) => d.into(),
            SslError::Temperature(_) | SslError::Alpha(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<DivideError> for HarnessError {
    fn from(e: DivideError) -> Self {
        match e {
            DivideError::NonFinite(_) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<CotrainError> for HarnessError {
    fn from(e: CotrainError) -> Self {
        match e {
            CotrainError::Config(m) => Self::Config(m),
            CotrainError::Ssl(s) => s.into(),
            CotrainError::Divide(d) => d.into(),
            CotrainError::Autodiff(a) => a.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Data(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Seed of sample generation and of the train/test split.
    pub seed: u64,
    pub sim: SimConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 200,
            test_per_class: 50,
            seed: 0,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Asymmetric flip targets; empty means neighbouring classes swap.
    pub pair_map: Vec<usize>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            rate: 0.4,
            pair_map: Vec::new(),
        }
    }
}

impl NoiseConfig {
    pub fn spec(&self, classes: usize) -> NoiseSpec {
        let mut spec = match self.kind {
            NoiseKind::Symmetric => NoiseSpec::symmetric(self.rate),
            NoiseKind::Asymmetric => NoiseSpec::asymmetric(self.rate, classes),
        };
        if !self.pair_map.is_empty() {
            spec.pair_map = self.pair_map.clone();
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of label noise, branch initialization and shuffling.
    pub seed: u64,
    pub data: DataConfig,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            data: DataConfig::default(),
            noise: NoiseConfig::default(),
            train: TrainConfig::default(),
            out: None,
        };
        cfg.set_seed(0);
        cfg
    }
}

const NOISE_STREAM: u64 = 0x6e6f;
const BRANCH_STREAM: u64 = 0x6272;
/// Seeds are stored as TOML integers, which are signed.
const SEED_MASK: u64 = i64::MAX as u64;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.message().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Single-CPU benchmark: the default data and noise with a narrow network
    /// and a 15-epoch schedule (5 warm-up, 10 semi-supervised).
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        let net = &mut cfg.train.net;
        net.image.input_size = 64;
        net.image.stem_channels = 8;
        net.image.stem_stride = 2;
        net.image.channels = vec![8, 16, 32, 64];
        net.scatter.k = 8;
        net.scatter.widths = vec![32, 32, 64];
        net.scatter.embed = 64;
        cfg.train.schedule.total_epochs = 15;
        cfg.train.schedule.warm_up_epochs = 5;
        cfg
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the run seed and the branch seeds derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        let base = derive_seed(seed, BRANCH_STREAM);
        self.train.schedule.branch_seeds = [derive_seed(base, 0) & SEED_MASK, derive_seed(base, 1) & SEED_MASK];
    }

    pub fn noise_seed(&self) -> u64 {
        derive_seed(self.seed, NOISE_STREAM)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let d = &self.data;
        if self.seed > SEED_MASK || d.seed > SEED_MASK {
            return Err(HarnessError::Config(format!("seeds must not exceed {SEED_MASK}")));
        }
        if d.classes < 2 || d.train_per_class == 0 || d.test_per_class == 0 {
            return Err(HarnessError::Config(
                "need at least two classes and non-empty train and test sets".into(),
            ));
        }
        d.sim.radar.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.noise
            .spec(d.classes)
            .validate(d.classes)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.train.ssl.augmentation.crop_region > d.sim.image_size {
            return Err(HarnessError::Config(format!(
                "augmentation region {} exceeds image size {}",
                self.train.ssl.augmentation.crop_region, d.sim.image_size
            )));
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Clean dataset plus its train/test split.
#[derive(Clone, Debug)]
pub struct CleanData {
    pub train: Vec<SarSample>,
    pub test: Vec<SarSample>,
}

pub fn generate_clean(data: &DataConfig) -> Result<CleanData, HarnessError> {
    let all = generate_dataset(
        &data.sim,
        data.classes,
        data.train_per_class + data.test_per_class,
        data.seed,
    )?;
    let (train, test) = split(
        &all,
        data.classes,
        data.train_per_class,
        data.test_per_class,
        derive_seed(data.seed, 1),
    )?;
    Ok(CleanData { train, test })
}

/// Network-ready sets after label noise; the normalizer sees training data only.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: PreparedSet,
    pub test: PreparedSet,
    pub noisy_train: Vec<SarSample>,
}

pub fn prepare(cfg: &ExperimentConfig, clean: &CleanData) -> Result<Prepared, HarnessError> {
    let noisy = if clean.train.iter().any(|s| s.is_mislabeled()) {
        clean.train.clone()
    } else {
        inject_noise(&clean.train, &cfg.noise.spec(cfg.data.classes), cfg.data.classes, cfg.noise_seed())?
    };
    prepare_noisy(cfg.data.classes, noisy, &clean.test)
}

fn prepare_noisy(classes: usize, noisy: Vec<SarSample>, test: &[SarSample]) -> Result<Prepared, HarnessError> {
    let norm = AscNormalizer::fit(&noisy);
    Ok(Prepared {
        train: PreparedSet::new(&noisy, &norm, classes)?,
        test: PreparedSet::new(test, &norm, classes)?,
        noisy_train: noisy,
    })
}

/// `gen-data`: dataset directory with manifest, records, split and a clean audit.
pub fn gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<usize, HarnessError> {
    cfg.validate()?;
    let clean = generate_clean(&cfg.data)?;
    let mut all: Vec<SarSample> = clean.train.iter().chain(&clean.test).cloned().collect();
    all.sort_by_key(|s| s.id);
    save_dataset(dir, &all, cfg.data.classes, &cfg.data.sim, cfg.data.seed)?;
    write_split(&dir.join(SPLIT_FILE), &clean.train, &clean.test)?;
    write_audit(&dir.join(AUDIT_FILE), &clean.train)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    Ok(all.len())
}

/// `inject-noise`: rewrites the audit with corrupted training labels.
pub fn inject_noise_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<usize, HarnessError> {
    let clean = load_data_dir(dir, false)?;
    let spec = cfg.noise.spec(cfg.data.classes);
    let noisy = inject_noise(&clean.train, &spec, cfg.data.classes, cfg.noise_seed())?;
    write_audit(&dir.join(AUDIT_FILE), &noisy)?;
    Ok(noisy.iter().filter(|s| s.is_mislabeled()).count())
}

/// Loads a dataset directory; with `labels_from_audit` training labels come from the audit.
pub fn load_data_dir(dir: &Path, labels_from_audit: bool) -> Result<CleanData, HarnessError> {
    let (_, samples) = load_dataset(dir)?;
    let (train_ids, test_ids) = read_split(&dir.join(SPLIT_FILE))?;
    let mut by_id: HashMap<u64, SarSample> = samples.into_iter().map(|s| (s.id, s)).collect();
    let mut take = |ids: &[u64]| {
        ids.iter()
            .map(|id| {
                by_id
                    .remove(id)
                    .ok_or_else(|| HarnessError::Data(format!("split lists missing or repeated sample {id}")))
            })
            .collect::<Result<Vec<_>, _>>()
    };
    let mut train = take(&train_ids)?;
    let test = take(&test_ids)?;
    if labels_from_audit {
        let audit: HashMap<u64, usize> = read_audit(&dir.join(AUDIT_FILE))?
            .into_iter()
            .map(|r| (r.id, r.train_label))
            .collect();
        for s in &mut train {
            s.train_label = *audit
                .get(&s.id)
                .ok_or_else(|| HarnessError::Data(format!("audit has no row for sample {}", s.id)))?;
        }
    }
    Ok(CleanData { train, test })
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Loads data for a run: from `data_dir` (labels from its audit) or generated from the config.
pub fn run_data(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<Prepared, HarnessError> {
    match data_dir {
        Some(dir) => {
            let data = load_data_dir(dir, true)?;
            prepare_noisy(cfg.data.classes, data.train, &data.test)
        }
        None => prepare(cfg, &generate_clean(&cfg.data)?),
    }
}

/// Trains on prepared data and writes the run directory when `out` is set.
pub fn train_prepared(cfg: &ExperimentConfig, data: &Prepared, out: Option<&Path>) -> Result<Trained, HarnessError> {
    cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    }
    let train_cfg = &cfg.train;
    let trained = cotrain::run(train_cfg, &data.train, &data.test, |rec, branches| {
        let Some(dir) = out else { return Ok(()) };
        let save = |name: String| {
            cotrain::save_branches(&dir.join(name), train_cfg, branches)
        };
        if train_cfg.baseline == Baseline::Clsdf && rec.epoch + 1 == train_cfg.schedule.warm_up_epochs {
            save(WARM_UP_MODEL_FILE.into())?;
        }
        let every = train_cfg.schedule.checkpoint_every;
        if every > 0 && (rec.epoch + 1) % every == 0 {
            save(format!("epoch_{:04}.ckpt", rec.epoch + 1))?;
        }
        Ok(())
    })?;
    if let Some(dir) = out {
        write_run(dir, &trained.report)?;
        cotrain::save_branches(&dir.join(MODEL_FILE), train_cfg, &trained.branches)?;
    }
    Ok(trained)
}

/// `train`: generates or loads data, then trains.
pub fn train(cfg: &ExperimentConfig, data_dir: Option<&Path>, out: Option<&Path>) -> Result<Trained, HarnessError> {
    cfg.validate()?;
    let data = run_data(cfg, data_dir)?;
    train_prepared(cfg, &data, out)
}

pub fn write_run(dir: &Path, report: &RunReport) -> Result<(), HarnessError> {
    let text = toml::to_string_pretty(report).map_err(|e| HarnessError::Data(e.to_string()))?;
    write_text(&dir.join(REPORT_FILE), &text)?;
    write_curves(&dir.join(CURVES_FILE), report)?;
    write_confusion(&dir.join(CONFUSION_FILE), &report.confusion)?;
    let division = dir.join(DIVISION_FILE);
    if division.exists() {
        fs::remove_file(&division).map_err(|e| io_error(&division, e))?;
    }
    crate::divide::append_csv(&division, &report.division_rows)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    toml::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {}", path.display(), e.message())))
}

/// `eval`: ensemble accuracy of a checkpoint on the test split.
pub fn eval_checkpoint(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    data_dir: Option<&Path>,
) -> Result<cotrain::Evaluation, HarnessError> {
    let (train_cfg, branches) = cotrain::load_branches(checkpoint)?;
    let data = run_data(cfg, data_dir)?;
    let refs: Vec<_> = branches.iter().collect();
    Ok(cotrain::evaluate(
        &refs,
        &data.test,
        train_cfg.ssl.augmentation.crop_size,
        train_cfg.eval_batch,
    )?)
}

/// `loss-hist`: per-class histograms of normalized training loss, split by audit status.
pub fn loss_hist(
    checkpoint: &Path,
    cfg: &ExperimentConfig,
    data_dir: Option<&Path>,
    bins: usize,
) -> Result<Vec<HistogramRow>, HarnessError> {
    if bins == 0 {
        return Err(HarnessError::Config("bins must be positive".into()));
    }
    let (train_cfg, branches) = cotrain::load_branches(checkpoint)?;
    let data = run_data(cfg, data_dir)?;
    let crop = train_cfg.ssl.augmentation.crop_size;
    let mut rows = Vec::new();
    for b in &branches {
        let norm = cotrain::normalized_losses(b, &data.train, crop, train_cfg.eval_batch)?;
        rows.extend(loss_histogram(
            b.id,
            &norm,
            &data.train.labels,
            &data.train.mislabeled(),
            data.train.classes,
            bins,
        ));
    }
    Ok(rows)
}

