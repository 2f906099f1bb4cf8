//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CLSDFCKP" | u32 version | u32 metadata_len | metadata (UTF-8)
//! u32 entry_count
//! per entry: u16 name_len | name | u8 trainable | u8 ndim | u32 dims[ndim] | u64 offset
//! f32 payload (offsets count f32 elements from the payload start)
//! ```

use std::io::{Read, Write};

use super::{AutodiffError, ParamStore, Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CLSDFCKP";

#[derive(Clone, Debug)]
pub struct CheckpointEntry {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    /// Free-form text stored alongside the tensors (the model configuration).
    pub metadata: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    /// Appends every parameter of `store`, with `prefix` prepended to names.
    pub fn push_store<S: Scalar>(&mut self, prefix: &str, store: &ParamStore<S>) {
        for p in store.iter() {
            self.entries.push(CheckpointEntry {
                name: format!("{prefix}{}", p.name),
                trainable: p.trainable,
                tensor: p.value.cast(),
            });
        }
    }

    /// Overwrites the values of `store` from entries named `prefix + name`.
    pub fn load_store<S: Scalar>(
        &self,
        prefix: &str,
        store: &mut ParamStore<S>,
    ) -> Result<(), AutodiffError> {
        for p in store.iter_mut() {
            let name = format!("{prefix}{}", p.name);
            let entry = self
                .entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing tensor {name}")))?;
            if entry.tensor.shape() != p.value.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "checkpoint",
                    detail: format!(
                        "{name}: stored {:?}, model {:?}",
                        entry.tensor.shape(),
                        p.value.shape()
                    ),
                });
            }
            p.value = entry.tensor.cast();
            p.grad = None;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<(), AutodiffError> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(ckpt.metadata.len() as u32).to_le_bytes())?;
    w.write_all(ckpt.metadata.as_bytes())?;
    w.write_all(&(ckpt.entries.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for e in &ckpt.entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| AutodiffError::Checkpoint(format!("name too long: {}", e.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[u8::from(e.trainable), e.tensor.shape().len() as u8])?;
        for &d in e.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += e.tensor.len() as u64;
    }
    for e in &ckpt.entries {
        for v in e.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], AutodiffError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, AutodiffError> {
    if &take::<8>(&mut r)? != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let meta_len = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let metadata = String::from_utf8(meta)
        .map_err(|_| AutodiffError::Checkpoint("metadata is not UTF-8".into()))?;
    let count = u32::from_le_bytes(take(&mut r)?) as usize;

    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| AutodiffError::Checkpoint("name is not UTF-8".into()))?;
        let [trainable, ndim] = take::<2>(&mut r)?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut r)?) as usize);
        }
        let offset = u64::from_le_bytes(take(&mut r)?);
        index.push((name, trainable != 0, shape, offset));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 {
        return Err(AutodiffError::Checkpoint("truncated payload".into()));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut entries = Vec::with_capacity(count);
    for (name, trainable, shape, offset) in index {
        let n: usize = shape.iter().product();
        let start = offset as usize;
        let data = floats
            .get(start..start + n)
            .ok_or_else(|| AutodiffError::Checkpoint(format!("payload too short for {name}")))?
            .to_vec();
        entries.push(CheckpointEntry {
            name,
            trainable,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(Checkpoint { metadata, entries })
}
