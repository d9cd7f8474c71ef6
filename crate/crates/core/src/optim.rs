//! Parameter update rules: plain SGD and Adam.
//!
//! Updated parameters are re-quantized onto the f32 grid so that the f32
//! weights container always round-trips them bit-exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    // per-parameter first/second moments, lazily sized
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update. `params` and `grads` must be parallel slices in a
    /// stable order across calls (Adam keeps per-slot moment state).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::State(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::State(format!(
                    "grad shape {:?} does not match param shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                    p.quantize_f32();
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
                }
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    for ((pv, gv), (mi, vi)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gv;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gv * gv;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                    p.quantize_f32();
                }
            }
        }
        Ok(())
    }
}
