use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, SarSample};
use crate::asc_sim::{AmplitudeImage, AscSet, SimConfig, ASC_PARAMS};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SPLIT_FILE: &str = "split.csv";
pub const AUDIT_FILE: &str = "noise_audit.csv";
const SAMPLE_DIR: &str = "samples";

/// Human-readable description of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: usize,
    pub centers: usize,
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    pub seed: u64,
    pub ids: Vec<u64>,
    pub sim: SimConfig,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn record_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(SAMPLE_DIR).join(format!("{id:06}.bin"))
}

/// Writes `manifest.toml` and one little-endian record per sample.
pub fn save_dataset(
    dir: &Path,
    samples: &[SarSample],
    classes: usize,
    sim: &SimConfig,
    seed: u64,
) -> Result<Manifest, DataError> {
    let (height, width) = samples
        .first()
        .map(|s| (s.image.height, s.image.width))
        .unwrap_or((sim.image_size, sim.image_size));
    let manifest = Manifest {
        classes,
        centers: sim.centers,
        height,
        width,
        samples: samples.len(),
        seed,
        ids: samples.iter().map(|s| s.id).collect(),
        sim: sim.clone(),
    };
    let sample_dir = dir.join(SAMPLE_DIR);
    fs::create_dir_all(&sample_dir).map_err(io_err(&sample_dir))?;
    for s in samples {
        if s.asc.len() != manifest.centers || s.image.height != height || s.image.width != width {
            return Err(DataError::Malformed(format!(
                "sample {} does not match the manifest shape",
                s.id
            )));
        }
        let path = record_path(dir, s.id);
        let mut bytes =
            Vec::with_capacity(4 * (manifest.centers * ASC_PARAMS + height * width + 1));
        for v in s.asc.to_table() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for p in &s.image.pixels {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        bytes.extend_from_slice(&(s.true_label as i32).to_le_bytes());
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text =
        toml::to_string_pretty(&manifest).map_err(|e| DataError::Malformed(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Reads a directory written by [`save_dataset`]; labels come back clean.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<SarSample>), DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| DataError::Malformed(format!("{}: {e}", path.display())))?;
    if manifest.ids.len() != manifest.samples {
        return Err(DataError::Malformed(
            "manifest id list does not match sample count".into(),
        ));
    }
    let table_len = manifest.centers * ASC_PARAMS;
    let image_len = manifest.height * manifest.width;
    let expected = 4 * (table_len + image_len + 1);
    let mut samples = Vec::with_capacity(manifest.samples);
    for &id in &manifest.ids {
        let path = record_path(dir, id);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() != expected {
            return Err(DataError::Malformed(format!(
                "{} has {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let words: Vec<[u8; 4]> = bytes
            .chunks_exact(4)
            .map(|c| c.try_into().unwrap())
            .collect();
        let table: Vec<f64> = words[..table_len]
            .iter()
            .map(|w| f32::from_le_bytes(*w) as f64)
            .collect();
        let pixels: Vec<f32> = words[table_len..table_len + image_len]
            .iter()
            .map(|w| f32::from_le_bytes(*w))
            .collect();
        let label = i32::from_le_bytes(words[table_len + image_len]);
        if label < 0 || label as usize >= manifest.classes {
            return Err(DataError::Malformed(format!(
                "{} has label {label}",
                path.display()
            )));
        }
        let label = label as usize;
        samples.push(SarSample {
            id,
            asc: AscSet::from_table(&table, label),
            image: AmplitudeImage {
                height: manifest.height,
                width: manifest.width,
                pixels,
            },
            true_label: label,
            train_label: label,
        });
    }
    Ok((manifest, samples))
}

/// One row of the noise audit: the label a sample is trained with versus its truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: u64,
    pub true_label: usize,
    pub train_label: usize,
}

pub fn write_audit(path: &Path, samples: &[SarSample]) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for s in samples {
        w.serialize(AuditRow {
            id: s.id,
            true_label: s.true_label,
            train_label: s.train_label,
        })?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRow>, DataError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(DataError::from))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SplitRow {
    id: u64,
    subset: String,
}

/// `id,subset` rows with subset `train` or `test`.
pub fn write_split(path: &Path, train: &[SarSample], test: &[SarSample]) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for (subset, set) in [("train", train), ("test", test)] {
        for s in set {
            w.serialize(SplitRow {
                id: s.id,
                subset: subset.into(),
            })?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Returns `(train_ids, test_ids)`.
pub fn read_split(path: &Path) -> Result<(Vec<u64>, Vec<u64>), DataError> {
    let mut r = csv::Reader::from_path(path)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for row in r.deserialize() {
        let row: SplitRow = row?;
        match row.subset.as_str() {
            "train" => train.push(row.id),
            "test" => test.push(row.id),
            other => return Err(DataError::Malformed(format!("unknown subset '{other}'"))),
        }
    }
    Ok((train, test))
}
