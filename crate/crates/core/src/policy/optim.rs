use serde::{Deserialize, Serialize};

use crate::nn::{Gradients, ParamStore};

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            state: AdamState {
                m: zeros.clone(),
                v: zeros,
                t: 0,
            },
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let s = &mut self.state;
        s.t += 1;
        let bc1 = 1.0 - self.beta1.powf(s.t as f64);
        let bc2 = 1.0 - self.beta2.powf(s.t as f64);
        let step = self.lr * bc2.sqrt() / bc1;
        for (i, (tensor, g)) in store.tensors_mut().iter_mut().zip(grads.iter()).enumerate() {
            let (m, v) = (&mut s.m[i], &mut s.v[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *p -= step * m[j] / (v[j].sqrt() + self.eps * bc2.sqrt());
            }
        }
    }
}

/// Rescale so the global L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / (norm + 1e-6));
    }
    norm
}
