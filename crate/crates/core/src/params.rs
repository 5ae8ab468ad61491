//! Named parameter storage, initialization and the checkpoint blob.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group; the backbone trains with a lower learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Rest,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    groups: Vec<ParamGroup>,
    decay: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it for weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        self.decay.push(decay);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copies every parameter whose name and shape match one in `other`.
    /// Returns the number copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(&oid) = other.index.get(name) {
                let src = &other.values[oid.0];
                if src.shape() == self.values[i].shape() {
                    self.values[i] = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Writes the versioned checkpoint blob.
    ///
    /// Layout: magic `MCITCKPT`, `u32` version, `u64` manifest length, UTF-8
    /// JSON manifest, then every parameter as little-endian `f64` in manifest
    /// order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, model_config: &serde_json::Value) -> Result<()> {
        let mut offset = 0usize;
        let params: Vec<ManifestEntry> = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: [v.rows(), v.cols()],
                    dtype: "f64".into(),
                    offset,
                };
                offset += v.len();
                e
            })
            .collect();
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            model: model_config.clone(),
            params,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in &self.values {
            let mut buf = Vec::with_capacity(v.len() * 8);
            for x in v.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint into a store laid out like `self`. Every parameter
    /// of `self` must be present with the same shape.
    pub fn load_checkpoint_values(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let t = ckpt
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCITCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Offset in elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

/// A parsed checkpoint: manifest plus named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if manifest.version != version {
            return Err(Error::Checkpoint("manifest version disagrees with header".into()));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut tensors = HashMap::new();
        for e in &manifest.params {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("unsupported dtype {}", e.dtype)));
            }
            let n = e.shape[0] * e.shape[1];
            let start = e.offset * 8;
            let end = start + n * 8;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("truncated data for {}", e.name)));
            }
            let vals = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], vals));
        }
        Ok(Self { manifest, tensors })
    }
}

/// Normal(0, std) matrix.
pub fn normal_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Linear weight `(fan_in, fan_out)` with std `gain / sqrt(fan_in)`.
pub fn linear_init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    normal_init(rng, fan_in, fan_out, gain / (fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::from_rows(&[vec![1.5, -2.25], vec![f64::MIN_POSITIVE, 3.0]]), ParamGroup::Backbone, true);
        s.add("b", Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]), ParamGroup::Rest, false);
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf, &serde_json::json!({"k": 1})).unwrap();
        let ck = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(ck.manifest.version, CHECKPOINT_VERSION);
        assert_eq!(ck.manifest.params[1].shape, [1, 3]);
        let mut t = s.clone();
        for id in t.ids().collect::<Vec<_>>() {
            t.value_mut(id).scale_assign(0.0);
        }
        t.load_checkpoint_values(&ck).unwrap();
        for id in s.ids() {
            assert_eq!(s.value(id), t.value(id));
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_version() {
        assert!(Checkpoint::read(&b"NOTACKPT\x01\x00\x00\x00"[..]).is_err());
        let mut buf = Vec::new();
        ParamStore::new().write_checkpoint(&mut buf, &serde_json::Value::Null).unwrap();
        buf[8] = 9;
        assert!(matches!(Checkpoint::read(buf.as_slice()), Err(Error::Checkpoint(_))));
    }
}
