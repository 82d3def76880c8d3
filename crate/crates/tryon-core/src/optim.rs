//! AdamW optimizer over named parameter maps.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
/// name so the full optimizer state can be checkpointed and restored.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advance the step counter; call once per batch before `update`.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updated value for one parameter given its gradient. Parameters
    /// without gradients must simply not be passed in.
    pub fn update(&mut self, name: &str, param: &Tensor, grad: &[f64]) -> Tensor {
        debug_assert!(self.t > 0, "begin_step before update");
        let n = param.numel();
        debug_assert_eq!(grad.len(), n);
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        let mut out = param.data().to_vec();
        for i in 0..n {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            out[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * out[i]);
        }
        Tensor::from_vec(out, param.shape().to_vec())
    }
}
