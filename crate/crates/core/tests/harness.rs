mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use clsdf::cotrain::{init_branches, save_branches};
use clsdf::dataset::{load_dataset, read_audit, NoiseKind};
use clsdf::harness::{
    self, export_plots, gen_data, inject_noise_dir, read_report, train, ExperimentConfig, HarnessError,
};
use common::tiny_experiment;

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clsdf"))
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

#[test]
fn gen_data_writes_every_record_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(10, 200, 50, 2, 1);
    assert_eq!(gen_data(&cfg, dir.path()).unwrap(), 2500);
    let (manifest, samples) = load_dataset(dir.path()).unwrap();
    assert_eq!(samples.len(), 2500);
    assert_eq!(manifest.classes, 10);
    assert_eq!(manifest.sim, cfg.data.sim);
    let stored = ExperimentConfig::load(&dir.path().join(harness::CONFIG_FILE)).unwrap();
    assert_eq!(stored, cfg);
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = tiny_experiment(3, 10, 5, 4, 2);
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let err = ExperimentConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    assert_eq!(err.exit_code(), 2);
    let partial = ExperimentConfig::from_toml("[noise]\nkind = \"asym\"\nrate = 0.3\n").unwrap();
    assert_eq!(partial.noise.kind, NoiseKind::Asymmetric);
    assert_eq!(partial.data, ExperimentConfig::default().data);
}

#[test]
fn composed_commands_train_from_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let mut cfg = tiny_experiment(3, 12, 4, 3, 1);
    gen_data(&cfg, &data).unwrap();
    cfg.noise.rate = 0.25;
    assert_eq!(inject_noise_dir(&cfg, &data).unwrap(), 9);
    let audit = read_audit(&data.join("noise_audit.csv")).unwrap();
    assert_eq!(audit.iter().filter(|r| r.true_label != r.train_label).count(), 9);

    let run = dir.path().join("run");
    let trained = train(&cfg, Some(&data), Some(&run)).unwrap();
    assert_eq!(trained.branches.len(), 2);
    for f in ["config.toml", "report.toml", "curves.csv", "confusion.csv", "division.csv", "model.ckpt", "warmup.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report = read_report(&run.join("report.toml")).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert_eq!(report.final_accuracy, trained.report.final_accuracy);
    assert!(header(&run.join("curves.csv")).starts_with("epoch,phase,lr,accuracy,branch"));
    assert_eq!(fs::read_to_string(run.join("curves.csv")).unwrap().lines().count(), 1 + 3 * 2);

    let plots = dir.path().join("plots");
    let files = export_plots(&report, &plots).unwrap();
    assert_eq!(files.len(), 3);
    assert_eq!(header(&plots.join("accuracy.csv")), "epoch,ensemble,branch_0,branch_1");
    assert_eq!(fs::read_to_string(plots.join("division_quality.csv")).unwrap().lines().count(), 1 + 2 * 2);
}

#[test]
fn stored_config_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(3, 10, 4, 3, 1);
    let first = train(&cfg, None, Some(dir.path())).unwrap();
    let stored = ExperimentConfig::load(&dir.path().join(harness::CONFIG_FILE)).unwrap();
    let again = train(&stored, None, None).unwrap();
    assert_eq!(first.report.fingerprint(), again.report.fingerprint());
}

#[test]
fn untrained_checkpoint_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment(10, 2, 20, 2, 1);
    let data = harness::run_data(&cfg, None).unwrap();
    let branches = init_branches(&cfg.train, 10, &data.train.labels).unwrap();
    let ckpt = dir.path().join("fresh.ckpt");
    save_branches(&ckpt, &cfg.train, &branches).unwrap();
    let eval = harness::eval_checkpoint(&ckpt, &cfg, None).unwrap();
    assert!((0.05..=0.20).contains(&eval.accuracy), "{}", eval.accuracy);
    assert_eq!(eval.confusion.iter().map(|r| r.iter().sum::<usize>()).sum::<usize>(), 200);
}

#[test]
fn warm_up_histograms_separate_mislabeled_samples() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(3, 40, 4, 4, 3);
    cfg.noise.rate = 0.2;
    train(&cfg, None, Some(dir.path())).unwrap();
    let rows = harness::loss_hist(&dir.path().join("warmup.ckpt"), &cfg, None, 10).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 10);
    let mean = |pick: &dyn Fn(&harness::HistogramRow) -> usize| {
        let (s, n) = rows.iter().fold((0.0, 0usize), |(s, n), r| {
            (s + pick(r) as f64 * 0.5 * (r.bin_low + r.bin_high), n + pick(r))
        });
        s / n as f64
    };
    let (clean, bad) = (mean(&|r| r.clean), mean(&|r| r.mislabeled));
    assert!(bad > clean + 0.1, "clean {clean}, mislabeled {bad}");
}

#[test]
fn cli_failures_exit_with_class_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nunknown_key = 3\n").unwrap();
    let out = cli().args(["gen-data", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");

    let missing = cli()
        .args(["eval", "--checkpoint"])
        .arg(dir.path().join("none.ckpt"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));

    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, tiny_experiment(2, 4, 2, 2, 1).to_toml()).unwrap();
    let out = cli()
        .args(["inject-noise", "--noise-rate", "1.5", "--out"])
        .arg(dir.path())
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let ok = cli().args(["gen-data", "--noise-kind", "asym", "--out"]).arg(dir.path().join("d")).arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
}

#[test]
fn shipped_desk_config_matches_the_preset() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    let expected = ExperimentConfig::desk();
    if std::env::var_os("UPDATE_CONFIGS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, expected.to_toml()).unwrap();
    }
    let shipped = ExperimentConfig::load(&path).unwrap();
    assert_eq!(shipped.to_toml(), expected.to_toml());
}
