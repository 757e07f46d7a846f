use std::collections::HashMap;

use super::tape::GradMap;
use super::tensor::Tensor;
use super::DiffError;
use crate::rng::Rng;
use rand::Rng as _;

/// AdamW hyperparameters. The learning rate is passed per step so schedules
/// stay outside the optimizer.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    adam: Option<AdamState>,
}

/// Named parameters with paired gradient buffers and optimizer state.
///
/// Entries keep insertion order; every bulk operation (gradient application,
/// optimizer steps, checkpoint serialization) iterates in that order, which
/// makes training bit-reproducible for a fixed seed.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParam {
                name: name.to_string(),
            });
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
            adam: None,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].grad)
    }

    /// Overwrite a parameter value, keeping its shape. Used by checkpoint
    /// restore.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam {
                name: name.to_string(),
            })?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set_value",
                lhs: self.entries[i].value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.entries[i].value = value;
        Ok(())
    }

    /// Parameter names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// `(name, value)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Number of parameters (tensors).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = Tensor::zeros(e.value.shape());
        }
    }

    fn check_grad(&self, name: &str, g: &Tensor, have: &Tensor) -> Result<(), DiffError> {
        if g.shape() != have.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "apply_grads",
                lhs: have.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.data().iter().all(|v| v.is_finite()) {
            let _ = name;
            return Err(DiffError::NonFinite { op: "gradient" });
        }
        Ok(())
    }

    /// Replace all gradient buffers with the values in `grads`; parameters
    /// absent from the map get zero gradients. Unknown names error.
    pub fn set_grads(&mut self, grads: &GradMap) -> Result<(), DiffError> {
        self.validate_names(grads)?;
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            match grads.get(&name) {
                Some(g) => {
                    self.check_grad(&name, g, &self.entries[i].value)?;
                    self.entries[i].grad = g.clone();
                }
                None => {
                    self.entries[i].grad = Tensor::zeros(self.entries[i].value.shape());
                }
            }
        }
        Ok(())
    }

    /// Add `grads` into the existing gradient buffers (for accumulation over
    /// a batch). Unknown names error.
    pub fn accumulate_grads(&mut self, grads: &GradMap) -> Result<(), DiffError> {
        self.validate_names(grads)?;
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            if let Some(g) = grads.get(&name) {
                self.check_grad(&name, g, &self.entries[i].value)?;
                let summed: Vec<f64> = self.entries[i]
                    .grad
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &b)| a + b)
                    .collect();
                self.entries[i].grad =
                    Tensor::from_parts(self.entries[i].value.shape().to_vec(), summed);
            }
        }
        Ok(())
    }

    fn validate_names(&self, grads: &GradMap) -> Result<(), DiffError> {
        for name in grads.keys() {
            if !self.index.contains_key(name) {
                return Err(DiffError::UnknownParam { name: name.clone() });
            }
        }
        Ok(())
    }

    /// Multiply every gradient buffer by `s` (e.g. `1 / batch_size`).
    pub fn scale_grads(&mut self, s: f64) {
        for e in &mut self.entries {
            e.grad = e.grad.map(|v| v * s);
        }
    }

    /// One decoupled-weight-decay Adam step over all parameters, in insertion
    /// order.
    ///
    /// Parameters whose gradient buffer is identically zero are skipped
    /// entirely: no moment update, no weight decay, no step-count increase.
    /// A loss term with zero weight therefore leaves its parameters
    /// bit-identical, which keeps ablations honest.
    pub fn adamw_step(&mut self, cfg: &AdamW, lr: f64) {
        for e in &mut self.entries {
            if e.grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let n = e.value.len();
            let adam = e.adam.get_or_insert_with(|| AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                steps: 0,
            });
            adam.steps += 1;
            let bc1 = 1.0 - cfg.beta1.powi(adam.steps as i32);
            let bc2 = 1.0 - cfg.beta2.powi(adam.steps as i32);
            let mut new_value = e.value.data().to_vec();
            for ((p, &g), (m, v)) in new_value
                .iter_mut()
                .zip(e.grad.data())
                .zip(adam.m.iter_mut().zip(adam.v.iter_mut()))
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
            }
            e.value = Tensor::from_parts(e.value.shape().to_vec(), new_value);
        }
    }
}

/// Xavier/Glorot uniform initialization for a `[rows, cols]` weight matrix.
pub fn xavier_uniform(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Zero-mean Gaussian initialization with the given standard deviation.
pub fn normal_init(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| crate::rng::standard_normal(rng) * std)
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
