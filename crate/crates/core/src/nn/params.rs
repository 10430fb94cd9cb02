use std::collections::HashMap;

use super::tensor::{Scalar, Tensor};

/// Named parameters in insertion order, with one gradient buffer each.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    grads: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), grads: Vec::new(), index: HashMap::new() }
    }

    /// Registers `name`; panics on duplicates.
    pub fn add(&mut self, name: &str, value: Tensor<F>) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.grads.push(Tensor::zeros(&value.shape));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: usize) -> &Tensor<F> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<F> {
        &mut self.values[id]
    }

    pub fn grad(&self, id: usize) -> &Tensor<F> {
        &self.grads[id]
    }

    pub fn grad_mut(&mut self, id: usize) -> &mut Tensor<F> {
        &mut self.grads[id]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<F: Scalar>(config: AdamWConfig, params: &ParamStore<F>) -> Self {
        let zeros = || (0..params.len()).map(|i| vec![0.0; params.value(i).len()]).collect();
        AdamW { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter for which `trainable(id)` holds.
    pub fn step<F: Scalar>(&mut self, params: &mut ParamStore<F>, trainable: impl Fn(usize) -> bool) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in 0..params.len() {
            if !trainable(id) {
                continue;
            }
            let g = params.grads[id].data.iter().map(|v| v.f64()).collect::<Vec<_>>();
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for (k, p) in params.values[id].data.iter_mut().enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let mut x = p.f64() * (1.0 - c.lr * c.weight_decay);
                x -= c.lr * mhat / (vhat.sqrt() + c.eps);
                *p = F::c(x);
            }
        }
    }
}
