use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A trainable tensor with its gradient accumulator and adaptive-moment state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    m: Matrix,
    v: Matrix,
    pub group: String,
}

impl Param {
    fn new(value: Matrix, group: &str) -> Self {
        let (r, c) = value.shape();
        Param {
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            group: group.to_string(),
        }
    }
}

/// Named parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: &str, value: Matrix) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params.insert(name.to_string(), Param::new(value, group));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Value of a registered parameter. Panics on unknown names, which are programming errors.
    pub fn value(&self, name: &str) -> &Matrix {
        &self.param(name).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .grad
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn coordinate_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Adds `grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &Grads) -> Result<()> {
        for (name, g) in &grads.0 {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if p.grad.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient shape for {name}")));
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }

    /// One adaptive-moment update over every parameter, then zeroes the gradients.
    pub fn adam_step(&mut self, config: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - config.beta1.powi(t);
        let bias2 = 1.0 - config.beta2.powi(t);
        for p in self.params.values_mut() {
            let lr = config.learning_rate(&p.group);
            let values = p.value.as_mut_slice();
            let grads = p.grad.as_mut_slice();
            let m = p.m.as_mut_slice();
            let v = p.v.as_mut_slice();
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
                grads[i] = 0.0;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }
}

/// Gradient buffers produced by a backward pass, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads(pub BTreeMap<String, Matrix>);

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero buffer shaped like the parameter, created on first use.
    pub fn entry(&mut self, name: &str, rows: usize, cols: usize) -> &mut Matrix {
        self.0
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(rows, cols))
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn merge(&mut self, other: Grads) {
        for (name, g) in other.0 {
            match self.0.get_mut(&name) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    self.0.insert(name, g);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub default_lr: f64,
    pub group_lr: BTreeMap<String, f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            default_lr: 0.001,
            group_lr: BTreeMap::new(),
        }
    }
}

impl AdamConfig {
    pub fn with_group(mut self, group: &str, lr: f64) -> Self {
        self.group_lr.insert(group.to_string(), lr);
        self
    }

    pub fn learning_rate(&self, group: &str) -> f64 {
        self.group_lr.get(group).copied().unwrap_or(self.default_lr)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    hyperparameters: serde_json::Value,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    group: String,
    rows: usize,
    cols: usize,
    file: String,
}

/// Writes `manifest.json` plus one little-endian `f64` blob per parameter into `dir`.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    store: &ParamStore,
    hyperparameters: &serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, p) in store.iter() {
        let file = format!("{name}.f64");
        let bytes: Vec<u8> = p
            .value
            .as_slice()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            name: name.to_string(),
            group: p.group.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            file,
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        hyperparameters: hyperparameters.clone(),
        params: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`]. Optimizer state is not restored.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ParamStore, serde_json::Value)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let mut store = ParamStore::new();
    for entry in manifest.params {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != entry.rows * entry.cols * 8 {
            return Err(Error::Data(format!("{}: blob size mismatch", entry.name)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(
            &entry.name,
            &entry.group,
            Matrix::from_vec(entry.rows, entry.cols, data)?,
        )?;
    }
    Ok((store, manifest.hyperparameters))
}
