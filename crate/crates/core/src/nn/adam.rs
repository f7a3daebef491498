//! Named parameter storage with gradients and bias-corrected Adam state.

use crate::error::{Error, Result};
use crate::nn::graph::BnBatchStats;
use crate::nn::real::Real;
use crate::nn::tensor::Tensor;
use std::collections::HashMap;

pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub trainable: bool,
}

static STORE_IDS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

/// One optimizer-scoped set of parameters (a network keeps its own store so
/// bias correction counts only its own steps). Stores carry a unique id so a
/// graph mixing several stores hands each its own gradients.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
    pub step: u64,
    id: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
            id: STORE_IDS.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> usize {
        let name = name.into();
        assert!(
            !name.contains(char::is_whitespace),
            "parameter names must not contain whitespace: {name:?}"
        );
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name:?}"
        );
        let shape = value.shape.clone();
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.clone(),
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            value,
            trainable,
        });
        self.by_name.insert(name, idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.entries[idx].value
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry<T> {
        &self.entries[idx]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn add_grad(&mut self, idx: usize, grad: &[T]) {
        let entry = &mut self.entries[idx];
        debug_assert_eq!(entry.grad.numel(), grad.len());
        for (g, &c) in entry.grad.data.iter_mut().zip(grad) {
            *g += c;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in &mut e.grad.data {
                *g = T::zero();
            }
        }
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Fold training-mode batch-norm statistics into the running buffers:
    /// `run = momentum * run + (1 - momentum) * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnBatchStats<T>], momentum: T) {
        let one_minus = T::one() - momentum;
        for u in updates {
            for (buf, stat) in [
                (u.running_mean_param, &u.mean),
                (u.running_var_param, &u.var),
            ] {
                let value = &mut self.entries[buf].value;
                for (r, &b) in value.data.iter_mut().zip(stat) {
                    *r = momentum * *r + one_minus * b;
                }
            }
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-5,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every trainable entry, in place.
/// Gradients are consumed (zeroed).
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, cfg: &AdamConfig) -> Result<()> {
    for e in &store.entries {
        if e.trainable && e.grad.data.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter {}",
                e.name
            )));
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let (lr, b1, b2, eps) = (
        T::of_f64(cfg.lr),
        T::of_f64(cfg.beta1),
        T::of_f64(cfg.beta2),
        T::of_f64(cfg.eps),
    );
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for e in &mut store.entries {
        if !e.trainable {
            continue;
        }
        for i in 0..e.value.data.len() {
            let g = e.grad.data[i];
            e.adam_m.data[i] = b1 * e.adam_m.data[i] + (T::one() - b1) * g;
            e.adam_v.data[i] = b2 * e.adam_v.data[i] + (T::one() - b2) * g * g;
            let m_hat = e.adam_m.data[i] / bc1;
            let v_hat = e.adam_v.data[i] / bc2;
            e.value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            e.grad.data[i] = T::zero();
        }
    }
    Ok(())
}
