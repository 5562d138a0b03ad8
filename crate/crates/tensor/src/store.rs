use crate::kernels;
use crate::tensor::{Shape, Tensor};
use crate::{Result, TensorError};
use indexmap::IndexMap;
use rand::Rng;

/// Handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u32);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0 as usize
    }
}

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
    moment1: Tensor,
    moment2: Tensor,
    step: u64,
}

/// Named trainable tensors with gradient accumulators and Adam moments.
///
/// Iteration order is registration order, which keeps every downstream
/// traversal (updates, snapshots, checkpoints) deterministic.
pub struct ParamStore {
    index: IndexMap<String, ParamId>,
    entries: Vec<ParamEntry>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            index: IndexMap::new(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.entries.len() as u32);
        let shape = value.shape();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(shape),
            moment1: Tensor::zeros(shape),
            moment2: Tensor::zeros(shape),
            step: 0,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn register_xavier<R: Rng>(&mut self, name: &str, shape: Shape, rng: &mut R) -> Result<ParamId> {
        self.register(name, xavier_init(shape, rng))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.index()].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.index()].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.index()].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.index()].grad
    }

    /// Adds accumulated per-name gradients into the store's accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let id = self.id(name)?;
            let entry = &mut self.entries[id.index()];
            if entry.grad.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "accumulate",
                    lhs: entry.grad.shape().to_string(),
                    rhs: g.shape().to_string(),
                });
            }
            kernels::axpy(entry.grad.data_mut(), 1.0, g.data());
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad.data_mut().fill(0.0);
        }
    }

    /// One Adam update with bias correction; consumes and zeroes the
    /// gradient accumulators.
    pub fn adam_step(&mut self, hp: &AdamParams) {
        for entry in &mut self.entries {
            entry.step += 1;
            let t = entry.step as i32;
            let bc1 = 1.0 - hp.beta1.powi(t);
            let bc2 = 1.0 - hp.beta2.powi(t);
            let g = entry.grad.data();
            let m = entry.moment1.data_mut();
            let v = entry.moment2.data_mut();
            let w = entry.value.data_mut();
            for i in 0..g.len() {
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
            entry.grad.data_mut().fill(0.0);
        }
    }

    /// Clones every parameter value in registration order.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Restores parameter values from a snapshot; shapes must match.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in values {
            let id = self.id(name)?;
            let entry = &mut self.entries[id.index()];
            if entry.value.shape() != tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values",
                    lhs: entry.value.shape().to_string(),
                    rhs: tensor.shape().to_string(),
                });
            }
            entry.value = tensor.clone();
        }
        Ok(())
    }
}

/// Adam hyperparameters. Defaults follow the standard formulation with the
/// project-wide initial learning rate.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            ..Default::default()
        }
    }
}

/// Per-name gradient buffers produced by a backward pass.
#[derive(Default)]
pub struct Gradients {
    map: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Gradients::default()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn entry(&mut self, name: &str, shape: Shape) -> &mut Tensor {
        self.map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape))
    }

    pub(crate) fn accumulate(&mut self, name: &str, shape: Shape, data: &[f64]) {
        kernels::axpy(self.entry(name, shape).data_mut(), 1.0, data);
    }
}

/// Uniform Xavier/Glorot initialization: values in ±sqrt(6 / (fan_in + fan_out)).
///
/// Rank-2 shapes use (rows, cols) as (fan_out, fan_in); rank-1 shapes use the
/// length for both fans.
pub fn xavier_init<R: Rng>(shape: Shape, rng: &mut R) -> Tensor {
    let (fan_out, fan_in) = if shape.rank() == 2 {
        (shape.rows(), shape.cols())
    } else {
        (shape.len(), shape.len())
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
    t
}
