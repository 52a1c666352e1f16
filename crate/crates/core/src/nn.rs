//! Named parameters, layer helpers, the Adam optimizer and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{Dtype, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    value: Arc<Tensor>,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn value_arc(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }
}

/// Flat name → tensor dictionary. Non-trainable entries hold buffers such as
/// normalization running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                value: Arc::new(value),
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| e.value())
    }

    pub fn get_entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replace a value, keeping its shape contract.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| config_err!("unknown parameter '{name}'"))?;
        if entry.value.shape() != value.shape() {
            return Err(dim_err!(
                "parameter '{}' has shape {:?}, got {:?}",
                name,
                entry.value.shape(),
                value.shape()
            ));
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| Arc::make_mut(&mut e.value))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Fold batch statistics into running averages.
    pub fn apply_stat_updates(&mut self, updates: Vec<(String, Tensor)>) -> Result<()> {
        for (name, batch) in updates {
            let running = self
                .value_mut(&name)
                .ok_or_else(|| config_err!("unknown statistics buffer '{name}'"))?;
            for (r, b) in running.data_mut().iter_mut().zip(batch.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and exact bit patterns of every entry.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in e.value.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn add_conv3d(&mut self, name: &str, kernel: [usize; 3], cin: usize, cout: usize, rng: &mut impl Rng) {
        let fan_in = kernel.iter().product::<usize>() * cin;
        let shape = [kernel[0], kernel[1], kernel[2], cin, cout];
        self.insert(format!("{name}.weight"), kaiming_normal(&shape, fan_in, rng), true);
    }

    pub fn add_batch_norm(&mut self, name: &str, ch: usize) {
        self.insert(format!("{name}.gamma"), Tensor::ones(&[ch]), true);
        self.insert(format!("{name}.beta"), Tensor::zeros(&[ch]), true);
        self.insert(format!("{name}.running_mean"), Tensor::zeros(&[ch]), false);
        self.insert(format!("{name}.running_var"), Tensor::ones(&[ch]), false);
    }

    pub fn add_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert(
            format!("{name}.weight"),
            Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..bound)),
            true,
        );
        if bias {
            self.insert(
                format!("{name}.bias"),
                Tensor::from_fn(&[fan_out], |_| rng.gen_range(-bound..bound)),
                true,
            );
        }
    }

    /// Write `manifest.json` plus `params.vtns` (one container per entry, in
    /// manifest order) into `dir`.
    pub fn save(&self, dir: &Path, fingerprint: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, e) in &self.entries {
            e.value.write_container(&mut w, Dtype::F64)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            });
        }
        w.flush()?;
        let manifest = Manifest {
            fingerprint: fingerprint.to_string(),
            entries,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest).map_err(io_json)?)?;
        Ok(())
    }

    /// Load a checkpoint, refusing it when its fingerprint differs from `expected`.
    pub fn load(dir: &Path, expected: &str) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::data(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(&manifest_path, e))?;
        if manifest.fingerprint != expected {
            return Err(config_err!(
                "checkpoint fingerprint {} does not match config fingerprint {}",
                manifest.fingerprint,
                expected
            ));
        }
        let params_path = dir.join(PARAMS_FILE);
        let mut r = BufReader::new(File::open(&params_path).map_err(|e| Error::data(&params_path, e))?);
        let mut store = ParamStore::new();
        for entry in manifest.entries {
            let t = Tensor::read_container(&mut r).map_err(|e| Error::data(&params_path, e))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::data(
                    &params_path,
                    format!("entry '{}' has shape {:?}, manifest says {:?}", entry.name, t.shape(), entry.shape),
                ));
            }
            store.insert(entry.name, t, entry.trainable);
        }
        Ok(store)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.vtns";

#[derive(Serialize, Deserialize)]
struct Manifest {
    fingerprint: String,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

fn io_json(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn kaiming_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

pub fn conv3d(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    g.conv3d(x, w, stride, pad)
}

/// Batch statistics in training graphs, running statistics otherwise.
pub fn batch_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    let mean_key = format!("{name}.running_mean");
    let var_key = format!("{name}.running_var");
    if g.is_train() {
        let (y, mean, var) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
        g.record_stat(mean_key, mean);
        g.record_stat(var_key, var);
        Ok(y)
    } else {
        let missing = || config_err!("missing running statistics for '{name}'");
        let mean = store.get(&mean_key).ok_or_else(missing)?.clone();
        let var = store.get(&var_key).ok_or_else(missing)?.clone();
        g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
    }
}

/// Affine map over the last axis: `(.., in) -> (.., out)`.
pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let s = g.shape(x).to_vec();
    let (fan_in, fan_out) = (g.shape(w)[0], g.shape(w)[1]);
    if s.last() != Some(&fan_in) {
        return Err(dim_err!("linear '{}': input {:?}, expected last dim {}", name, s, fan_in));
    }
    let rows = s.iter().product::<usize>() / fan_in;
    let flat = g.reshape(x, &[rows, fan_in])?;
    let mut y = g.matmul(flat, w)?;
    let bias_key = format!("{name}.bias");
    if store.contains(&bias_key) {
        let b = g.param(store, &bias_key)?;
        y = g.add_trailing(y, b)?;
    }
    let mut out_shape = s;
    *out_shape.last_mut().unwrap() = fan_out;
    g.reshape(y, &out_shape)
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let trainable = store.get_entry(name).map(|e| e.trainable).unwrap_or(false);
            if !trainable {
                continue;
            }
            let param = store.value_mut(name).expect("checked above");
            if param.shape() != grad.shape() {
                return Err(dim_err!("gradient for '{}' has shape {:?}", name, grad.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p -= self.lr * update;
            }
        }
        Ok(())
    }
}
