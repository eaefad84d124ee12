//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PVCK" | version u32 | endianness tag u8 (1 = little)
//! config length u32 | config TOML bytes
//! group count u32 | per group: code u8, SHA-256 of the group (32 bytes)
//! tensor count u32 | per tensor: name length u16, name, group u8,
//!                    rows u32, cols u32, frozen u8, rows*cols f32 values
//! SHA-256 of every preceding byte (32 bytes)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::harness::config::ExperimentConfig;
use crate::model::Model;
use crate::numerics::{Group, Matrix, ParamStore};

pub const MAGIC: &[u8; 4] = b"PVCK";
pub const VERSION: u32 = 1;
const LITTLE_ENDIAN: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("unsupported endianness tag {0}")]
    Endianness(u8),
    #[error("file digest mismatch (truncated or corrupted)")]
    DigestMismatch,
    #[error("group `{0}` digest does not match its tensors")]
    GroupDigest(Group),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("shape mismatch in group `{group}` for `{name}`: checkpoint {found:?}, model {expected:?}")]
    Shape {
        group: Group,
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("tensor set differs from the model: {0}")]
    TensorSet(String),
    #[error("embedded config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub group: Group,
    pub frozen: bool,
    pub value: Matrix<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub digests: BTreeMap<Group, [u8; 32]>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, config: &ExperimentConfig) -> Self {
        Self {
            version: VERSION,
            config: config.clone(),
            digests: Group::ALL.iter().map(|&g| (g, store.group_digest(g))).collect(),
            tensors: store
                .iter()
                .map(|(_, t)| TensorRecord {
                    name: t.name.clone(),
                    group: t.group,
                    frozen: t.frozen,
                    value: t.value.clone(),
                })
                .collect(),
        }
    }

    pub fn hex_digests(&self) -> BTreeMap<Group, String> {
        self.digests.iter().map(|(g, d)| (*g, hex::encode(d))).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(LITTLE_ENDIAN);
        let config = self.config.to_toml();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.digests.len() as u32).to_le_bytes());
        for (g, d) in &self.digests {
            out.push(g.code());
            out.extend_from_slice(d);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.group.code());
            out.extend_from_slice(&(t.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.value.cols() as u32).to_le_bytes());
            out.push(u8::from(t.frozen));
            out.extend_from_slice(&t.value.le_bytes());
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 32 {
            return Err(CheckpointError::DigestMismatch);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::DigestMismatch);
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let endian = r.u8()?;
        if endian != LITTLE_ENDIAN {
            return Err(CheckpointError::Endianness(endian));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let config = ExperimentConfig::parse(text).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let mut digests = BTreeMap::new();
        for _ in 0..r.u32()? {
            let g = r.group()?;
            let d: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            digests.insert(g, d);
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let group = r.group()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let frozen = r.u8()? != 0;
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let value = Matrix::from_vec(rows, cols, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push(TensorRecord {
                name,
                group,
                frozen,
                value,
            });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        let ckpt = Self {
            version,
            config,
            digests,
            tensors,
        };
        let store = ckpt.to_store();
        for (g, d) in &ckpt.digests {
            if &store.group_digest(*g) != d {
                return Err(CheckpointError::GroupDigest(*g));
            }
        }
        Ok(ckpt)
    }

    fn to_store(&self) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            // Names are unique in anything this module wrote.
            let _ = store.insert(&t.name, t.group, t.value.clone(), t.frozen);
        }
        store
    }

    /// Copies the stored tensors into `model`, which must have exactly the
    /// same tensor names and shapes.
    pub fn restore_into(&self, model: &mut Model<f32>) -> Result<(), CheckpointError> {
        if model.store.len() != self.tensors.len() {
            return Err(CheckpointError::TensorSet(format!(
                "checkpoint holds {} tensors, model {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for t in &self.tensors {
            let target = model
                .store
                .by_name(&t.name)
                .ok_or_else(|| CheckpointError::TensorSet(format!("model has no tensor `{}`", t.name)))?;
            if target.value.shape() != t.value.shape() {
                return Err(CheckpointError::Shape {
                    group: t.group,
                    name: t.name.clone(),
                    expected: target.value.shape(),
                    found: t.value.shape(),
                });
            }
        }
        for t in &self.tensors {
            let target = model.store.by_name_mut(&t.name).expect("checked above");
            target.value = t.value.clone();
            target.frozen = t.frozen;
        }
        Ok(())
    }

    /// Rebuilds the model described by the embedded config and loads the
    /// tensors into it.
    pub fn to_model(&self) -> crate::error::Result<Model<f32>> {
        let mut model = Model::new(&self.config.model_config(), self.config.seed)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn group(&mut self) -> Result<Group, CheckpointError> {
        let code = self.u8()?;
        Group::from_code(code).ok_or_else(|| CheckpointError::Malformed(format!("unknown group code {code}")))
    }
}

pub fn save_checkpoint(
    store: &ParamStore<f32>,
    config: &ExperimentConfig,
    path: impl AsRef<Path>,
) -> crate::error::Result<Checkpoint> {
    let ckpt = Checkpoint::from_store(store, config);
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> crate::error::Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ExperimentConfig, Model<f32>) {
        let c = ExperimentConfig::default_with_seed(3);
        let m = Model::new(&c.model_config(), c.seed).unwrap();
        (c, m)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (c, m) = tiny();
        let ckpt = Checkpoint::from_store(&m.store, &c);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        let model = back.to_model().unwrap();
        assert_eq!(model.store.digests(), m.store.digests());
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let (c, m) = tiny();
        let bytes = Checkpoint::from_store(&m.store, &c).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 100]).unwrap_err();
        assert!(matches!(err, CheckpointError::DigestMismatch));
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped).unwrap_err(), CheckpointError::DigestMismatch));
        assert!(matches!(Checkpoint::from_bytes(&[]).unwrap_err(), CheckpointError::DigestMismatch));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (c, m) = tiny();
        let mut bytes = Checkpoint::from_store(&m.store, &c).to_bytes();
        bytes[4] = 9;
        let n = bytes.len() - 32;
        let d: [u8; 32] = Sha256::digest(&bytes[..n]).into();
        bytes[n..].copy_from_slice(&d);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            CheckpointError::Version { found: 9 }
        ));
    }

    #[test]
    fn loading_into_a_wider_model_names_the_group() {
        let (c, m) = tiny();
        let ckpt = Checkpoint::from_store(&m.store, &c);
        let mut other = c.clone();
        other.decoder.d_model = 32;
        let other = other.validated().unwrap();
        let mut wide = Model::new(&other.model_config(), 3).unwrap();
        let err = ckpt.restore_into(&mut wide).unwrap_err();
        match err {
            CheckpointError::Shape { group, .. } => assert_ne!(group, Group::Expert),
            e => panic!("unexpected {e}"),
        }
        assert!(err_text(&ckpt, &mut wide).contains("group"));
    }

    fn err_text(ckpt: &Checkpoint, m: &mut Model<f32>) -> String {
        ckpt.restore_into(m).unwrap_err().to_string()
    }
}
