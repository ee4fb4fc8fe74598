use atsc_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments for every parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value().shape().to_vec()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }

    /// Bias-corrected Adam update from the accumulated gradients, which are
    /// then zeroed. Non-finite gradients abort before anything changes.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if !params.grads_finite() {
            return Err(Error::Divergence {
                step: self.t as usize + 1,
                what: "gradient",
            });
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.eps as f32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (value, grad) = params.value_and_grad_mut(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut().iter_mut())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * *g;
                *v = b2 * *v + (1.0 - b2) * *g * *g;
                *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
                *g = 0.0;
            }
        }
        Ok(())
    }
}

/// Rescales gradients to global norm `max_norm` if they exceed it and
/// returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm.is_finite() && norm > max_norm {
        params.scale_grads((max_norm / norm) as f32);
    }
    norm
}
