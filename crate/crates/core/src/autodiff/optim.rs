use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::Tensor;
use crate::linalg::Matrix;

/// Hyperparameters of the decoupled-weight-decay Adam update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Matrix,
    second: Matrix,
    steps: u64,
}

/// AdamW with per-parameter moment state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable tensor with a populated gradient.
    /// Frozen tensors are never touched.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor)>) {
        let c = self.config;
        for (name, p) in params {
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            let (rows, cols) = p.value.shape();
            let st = self.state.entry(name).or_insert_with(|| Moments {
                first: Matrix::zeros(rows, cols),
                second: Matrix::zeros(rows, cols),
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(st.steps as i32);
            let decay = 1.0 - c.lr * c.weight_decay;
            let data = p.value.data_mut();
            let m = st.first.data_mut();
            let v = st.second.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = data[i] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}
