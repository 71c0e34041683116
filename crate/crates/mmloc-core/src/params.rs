//! Named parameter tensors, their initialization, the SGD-with-momentum
//! optimizer, and the on-disk tensor archive.
//!
//! Archive layout: magic `MMLC`, a little-endian u64 header length, a JSON
//! header (schema, model metadata, tensor index with shapes), then the tensor
//! payloads as little-endian f64 in index order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::prelude::*;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Tensor};
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"MMLC";
pub const SCHEMA_VERSION: u32 = 1;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Default)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), value.into_shared());
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let slot = self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        *slot = value.into_shared();
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Uniform fan-in init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`: keeps the
    /// activation variance roughly constant through ReLU conv stacks, so the
    /// toy backbones neither vanish nor explode over their four layers.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound));
        self.insert(name, value);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    /// True when parameter values are element-for-element identical.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        if self.tensors.len() != other.tensors.len() {
            return false;
        }
        self.tensors.iter().all(|(k, v)| {
            other.tensors.get(k).is_some_and(|o| {
                o.shape() == v.shape()
                    && o.iter().zip(v.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
            })
        })
    }
}

/// SGD with momentum and stepwise learning-rate decay.
pub struct SgdOptimizer {
    pub lr: f64,
    pub momentum: f64,
    velocity: HashMap<String, ArrayD<f64>>,
}

impl SgdOptimizer {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// `v = momentum * v + g; p -= lr * v`
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) {
        for (name, g) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            v.zip_mut_with(g, |vi, &gi| *vi = self.momentum * *vi + gi);
            let current = params.get(name).to_owned();
            let updated = current - &v.map(|x| self.lr * x);
            params.set(name, updated);
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

/// Scales the whole gradient map so its global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.map_inplace(|v| *v *= scale);
        }
    }
    norm
}

/// Accumulates per-sample gradient maps into a batch mean.
#[derive(Default)]
pub struct GradAccumulator {
    sums: GradMap,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: GradMap) {
        for (name, g) in grads {
            match self.sums.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    self.sums.insert(name, g);
                }
            }
        }
        self.count += 1;
    }

    pub fn mean(mut self) -> GradMap {
        let n = self.count.max(1) as f64;
        for (_, g) in self.sums.iter_mut() {
            g.map_inplace(|x| *x /= n);
        }
        self.sums
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// JSON header of the archive. `meta` carries caller-defined fields
/// (model dims, seeds, training state, ...).
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct ArchiveHeader {
    pub schema_version: u32,
    pub meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_archive(path: &Path, params: &ParamSet, meta: serde_json::Value) -> Result<()> {
    let header = ArchiveHeader {
        schema_version: SCHEMA_VERSION,
        meta,
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(ARCHIVE_MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, tensor) in params.iter() {
        for v in tensor.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<(ParamSet, ArchiveHeader)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: ArchiveHeader = serde_json::from_slice(&header_bytes)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported schema version {}",
            header.schema_version
        )));
    }
    let mut params = ParamSet::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        params.insert(&entry.name, arr);
    }
    Ok((params, header))
}
