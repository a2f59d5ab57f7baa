//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// AdamW over named f32 parameters. Moments are kept per parameter name;
/// updates run in name order, so a fixed seed gives bit-identical training.
#[derive(Debug)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamW {
            lr: lr as f64,
            weight_decay: weight_decay as f64,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update. `grad_of` yields the gradient buffer for a
    /// parameter name; parameters without a gradient are left untouched.
    pub fn step<'a>(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grad_of: impl Fn(&str) -> Option<&'a [f32]>,
    ) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = grad_of(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; tensor.numel()], vec![0.0; tensor.numel()]));
            let mut data: Vec<f32> = tensor.data().to_vec();
            for i in 0..data.len() {
                let gi = grad[i] as f64;
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let p = data[i] as f64;
                data[i] = (p - self.lr * (m_hat / (v_hat.sqrt() + EPS) + self.weight_decay * p))
                    as f32;
            }
            *tensor = Tensor::from_vec(tensor.shape().to_vec(), data)
                .expect("update preserves shape");
        }
    }
}
