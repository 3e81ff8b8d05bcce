use serde::{Deserialize, Serialize};

use super::param::ParamStore;

/// First-order optimizer selection. Adam is the default for adversarial
/// training; plain SGD is retained as a configuration option.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

/// Serializable optimizer state (moment estimates, step counter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer bound to the flat layout of one `ParamStore`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, param_len: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Adam { .. } => (vec![0.0; param_len], vec![0.0; param_len]),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer { kind, t: 0, m, v }
    }

    /// Apply one update from the store's accumulated gradients, then clear
    /// them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                let grads: Vec<f64> = store.grads().to_vec();
                for (p, g) in store.values_mut().iter_mut().zip(grads.iter()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2 } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let grads: Vec<f64> = store.grads().to_vec();
                for (i, (p, g)) in store
                    .values_mut()
                    .iter_mut()
                    .zip(grads.iter())
                    .enumerate()
                {
                    let m = beta1 * self.m[i] + (1.0 - beta1) * g;
                    let v = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    self.m[i] = m;
                    self.v[i] = v;
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        store.zero_grad();
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            kind: self.kind,
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_state(state: OptimizerState, param_len: usize) -> crate::Result<Self> {
        match state.kind {
            OptimizerKind::Adam { .. }
                if state.m.len() != param_len || state.v.len() != param_len =>
            {
                Err(crate::Error::CheckpointIntegrity(format!(
                    "optimizer moment length {} does not match parameter count {}",
                    state.m.len(),
                    param_len
                )))
            }
            _ => Ok(Optimizer {
                kind: state.kind,
                t: state.t,
                m: state.m,
                v: state.v,
            }),
        }
    }
}
