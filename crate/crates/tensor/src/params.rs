//! Named trainable parameters with gradient slots and adaptive-moment
//! optimizer state.

use crate::graph::Shape;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("unknown parameter name {0:?}")]
    UnknownName(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    moment1: Vec<f64>,
    moment2: Vec<f64>,
}

/// Optimizer settings for [`ParameterStore::optimizer_step`].
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Uniquely named parameter tensors; shapes are fixed at creation.
#[derive(Default)]
pub struct ParameterStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].values
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    fn insert(&mut self, name: &str, shape: Shape, values: Vec<f64>) -> Result<ParamId, ParamError> {
        if self.by_name.contains_key(name) {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        debug_assert_eq!(shape.len(), values.len());
        let n = values.len();
        self.params.push(Param {
            name: name.to_string(),
            shape,
            values,
            grad: vec![0.0; n],
            moment1: vec![0.0; n],
            moment2: vec![0.0; n],
        });
        let id = self.params.len() - 1;
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Matrix parameter drawn uniformly from ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_matrix<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId, ParamError> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Shape::Matrix { rows, cols }, values)
    }

    pub fn add_vector_zeros(&mut self, name: &str, n: usize) -> Result<ParamId, ParamError> {
        self.insert(name, Shape::Vector(n), vec![0.0; n])
    }

    pub fn add_vector_values(&mut self, name: &str, values: Vec<f64>) -> Result<ParamId, ParamError> {
        self.insert(name, Shape::Vector(values.len()), values)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        for (o, gi) in self.params[id.0].grad.iter_mut().zip(g) {
            *o += gi;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// One adaptive-moment update over all parameters from the current
    /// gradient slots. Increments the step counter and clears gradients.
    pub fn optimizer_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for p in &mut self.params {
            for i in 0..p.values.len() {
                let g = p.grad[i];
                p.moment1[i] = cfg.beta1 * p.moment1[i] + (1.0 - cfg.beta1) * g;
                p.moment2[i] = cfg.beta2 * p.moment2[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = p.moment1[i] / bc1;
                let v_hat = p.moment2[i] / bc2;
                p.values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                p.grad[i] = 0.0;
            }
        }
    }

    /// Deep copy of all parameter values (moments and grads excluded).
    pub fn snapshot_values(&self) -> BTreeMap<String, Vec<f64>> {
        self.params.iter().map(|p| (p.name.clone(), p.values.clone())).collect()
    }

    pub fn restore_values(&mut self, snap: &BTreeMap<String, Vec<f64>>) -> Result<(), ParamError> {
        for (name, vals) in snap {
            let id = self.lookup(name).ok_or_else(|| ParamError::UnknownName(name.clone()))?;
            self.params[id.0].values.copy_from_slice(vals);
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Checkpoint container
    // ------------------------------------------------------------------

    /// Serialize name → shape → values as JSON (UTF-8, sorted keys).
    /// f64 values use shortest round-trip decimal form, so save/load is
    /// lossless.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), ParamError> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            step: self.step,
            params: self
                .params
                .iter()
                .map(|p| {
                    (p.name.clone(), ParamEntry { shape: p.shape.dims(), values: p.values.clone() })
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| ParamError::Format(e.to_string()))?;
        w.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn save_path(&self, path: &Path) -> Result<(), ParamError> {
        self.save(std::fs::File::create(path)?)
    }

    /// Load values into a store with identical names and shapes.
    pub fn load_into<R: Read>(&mut self, mut r: R) -> Result<(), ParamError> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| ParamError::Format(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(ParamError::Format(format!("unsupported format {:?}", file.format)));
        }
        if file.params.len() != self.params.len() {
            return Err(ParamError::Format(format!(
                "parameter count mismatch: file has {}, store has {}",
                file.params.len(),
                self.params.len()
            )));
        }
        for (name, entry) in &file.params {
            let id = self.lookup(name).ok_or_else(|| ParamError::UnknownName(name.clone()))?;
            let p = &mut self.params[id.0];
            if p.shape.dims() != entry.shape || entry.values.len() != p.values.len() {
                return Err(ParamError::Format(format!(
                    "shape mismatch for {name:?}: file {:?}, store {:?}",
                    entry.shape,
                    p.shape.dims()
                )));
            }
            p.values.copy_from_slice(&entry.values);
        }
        self.step = file.step;
        Ok(())
    }

    pub fn load_path(&mut self, path: &Path) -> Result<(), ParamError> {
        self.load_into(std::fs::File::open(path)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "tgrec-params-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    step: u64,
    params: BTreeMap<String, ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
}
