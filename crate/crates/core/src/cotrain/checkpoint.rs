use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, write_checkpoint, AutodiffError, Checkpoint};
use crate::ssl::{AlignmentState, BranchState};

use super::{CotrainError, TrainConfig};

#[derive(Serialize, Deserialize)]
struct Metadata {
    classes: usize,
    branches: usize,
    epoch: usize,
    config: TrainConfig,
}

fn io_err(path: &Path, e: std::io::Error) -> CotrainError {
    CotrainError::Autodiff(AutodiffError::Checkpoint(format!("{}: {e}", path.display())))
}

/// Writes the parameters of every branch plus the configuration needed to rebuild them.
pub fn save_branches(path: &Path, cfg: &TrainConfig, branches: &[BranchState]) -> Result<(), CotrainError> {
    let first = branches
        .first()
        .ok_or_else(|| CotrainError::Config("no branches to save".into()))?;
    let meta = Metadata {
        classes: first.net.classes,
        branches: branches.len(),
        epoch: first.epoch,
        config: cfg.clone(),
    };
    let mut ckpt = Checkpoint {
        metadata: toml::to_string(&meta).map_err(|e| CotrainError::Config(e.to_string()))?,
        entries: Vec::new(),
    };
    for b in branches {
        ckpt.push_store(&format!("branch{}.", b.id), &b.params);
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    write_checkpoint(BufWriter::new(file), &ckpt)?;
    Ok(())
}

/// Rebuilds branches saved by [`save_branches`].
pub fn load_branches(path: &Path) -> Result<(TrainConfig, Vec<BranchState>), CotrainError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let ckpt = read_checkpoint(BufReader::new(file))?;
    let meta: Metadata = toml::from_str(&ckpt.metadata)
        .map_err(|e| CotrainError::Config(format!("checkpoint metadata: {e}")))?;
    let cfg = meta.config;
    let mut branches = Vec::with_capacity(meta.branches);
    for id in 0..meta.branches {
        let seed = cfg.schedule.branch_seeds[id];
        let mut b = BranchState::new(
            id,
            &cfg.net,
            meta.classes,
            seed,
            seed,
            AlignmentState::uniform(meta.classes, cfg.ssl.alignment),
        )?;
        ckpt.load_store(&format!("branch{id}."), &mut b.params)?;
        b.epoch = meta.epoch;
        branches.push(b);
    }
    Ok((cfg, branches))
}
