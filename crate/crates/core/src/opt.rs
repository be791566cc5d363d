//! Optimizers and the warmup / inverse-sqrt learning-rate schedule shared by
//! every training loop in the crate.

use ndarray::Array2;

use crate::error::{FunctaError, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone)]
pub struct ParamSet {
    entries: Vec<(String, Array2<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), &mut *v))
    }

    pub fn values(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam state: first/second moments aligned with a parameter list, plus the
/// step counter. β1=0.9, β2=0.999, ε=1e-8.
#[derive(Clone)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.values().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.values().map(|p| Array2::zeros(p.dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update with bias correction, in place. Grads must align with
    /// the parameter order used at construction.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != params.len() {
            return Err(FunctaError::Shape(format!(
                "adam: {} grads for {} params",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.dim() != g.dim() {
                return Err(FunctaError::Shape(format!(
                    "adam: grad shape {:?} for param '{name}' of shape {:?}",
                    g.dim(),
                    p.dim()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(FunctaError::Numerical(format!(
                    "adam: non-finite gradient for param '{name}' at step {}",
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = &grads[i];
            self.m[i] = &self.m[i] * self.beta1 + g * (1.0 - self.beta1);
            self.v[i] = &self.v[i] * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);
            let mhat = &self.m[i] / bc1;
            let vhat = &self.v[i] / bc2;
            *p -= &(mhat / (vhat.mapv(f64::sqrt) + self.eps) * lr);
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_iters`, then inverse-sqrt
/// decay `base_lr * sqrt(warmup_iters / iter)`, which is continuous at the
/// warmup boundary.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_iters: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_iters: u64) -> Self {
        LrSchedule {
            base_lr,
            warmup_iters,
        }
    }

    pub fn lr(&self, iter: u64) -> f64 {
        if self.warmup_iters == 0 {
            return self.base_lr;
        }
        if iter <= self.warmup_iters {
            self.base_lr * iter as f64 / self.warmup_iters as f64
        } else {
            self.base_lr * (self.warmup_iters as f64 / iter as f64).sqrt()
        }
    }
}
