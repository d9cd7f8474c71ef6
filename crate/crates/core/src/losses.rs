//! The five selectable training losses: binary cross entropy, categorical
//! cross entropy, MSE, MAE, MAPE. Each has a graph-recorded value (so the
//! gradient flows through autodiff) and an independent closed-form gradient
//! used as a second route in tests.
//!
//! All losses reduce by mean over every element (pixels x bands x batch).
//! Log arguments are clamped into [1e-7, 1]; percentage-error denominators
//! are clamped to magnitude >= 1e-7.

use serde::{Deserialize, Serialize};

use crate::autodiff::{clamp_denominator, Graph, Tensor, Var, EPS_CLAMP, LOG_RANGE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Cce,
    Mse,
    Mae,
    Mape,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Bce,
        LossKind::Cce,
        LossKind::Mse,
        LossKind::Mae,
        LossKind::Mape,
    ];

    /// CLI `--loss` spelling.
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Cce => "cce",
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Mape => "mape",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "cce" => Ok(LossKind::Cce),
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            "mape" => Ok(LossKind::Mape),
            other => Err(Error::Config(format!(
                "unknown loss '{other}', expected bce|cce|mse|mae|mape"
            ))),
        }
    }

    fn is_cross_entropy(&self) -> bool {
        matches!(self, LossKind::Bce | LossKind::Cce)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_pair(g: &Graph, kind: LossKind, pred: Var, target: Var) -> Result<()> {
    let (p, t) = (g.value(pred), g.value(target));
    if p.shape() != t.shape() {
        return Err(Error::Shape(format!(
            "loss shapes differ: pred {:?} vs target {:?}",
            p.shape(),
            t.shape()
        )));
    }
    if kind.is_cross_entropy() {
        for &v in t.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!(
                    "{kind} target {v} outside [0,1]"
                )));
            }
        }
    }
    Ok(())
}

/// Scalar loss recorded on the graph; differentiable w.r.t. `pred`.
pub fn loss_value(g: &mut Graph, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
    check_pair(g, kind, pred, target)?;
    match kind {
        LossKind::Mse => {
            let d = g.sub(pred, target)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        }
        LossKind::Mae => {
            let d = g.sub(pred, target)?;
            let a = g.abs(d);
            g.mean(a)
        }
        LossKind::Mape => {
            let d = g.sub(target, pred)?;
            let frac = g.div(d, target)?;
            let a = g.abs(frac);
            g.mean(a)
        }
        LossKind::Bce => {
            let p = g.clamp(pred, EPS_CLAMP, 1.0 - EPS_CLAMP);
            let log_p = g.log(p);
            let one_minus_p = g.rsub_scalar(p, 1.0);
            let log_q = g.log(one_minus_p);
            let one_minus_t = g.rsub_scalar(target, 1.0);
            let lhs = g.mul(target, log_p)?;
            let rhs = g.mul(one_minus_t, log_q)?;
            let s = g.add(lhs, rhs)?;
            let m = g.mean(s)?;
            Ok(g.neg(m))
        }
        LossKind::Cce => {
            // literal per-element evaluation of -sum(y log yhat), mean-normalized
            let p = g.clamp(pred, EPS_CLAMP, 1.0 - EPS_CLAMP);
            let log_p = g.log(p);
            let prod = g.mul(target, log_p)?;
            let m = g.mean(prod)?;
            Ok(g.neg(m))
        }
    }
}

/// Derivative of the clamped log used by the graph, w.r.t. its raw argument.
fn dlog_clamped(x: f64) -> f64 {
    if x >= LOG_RANGE.0 && x <= LOG_RANGE.1 {
        1.0 / x
    } else {
        0.0
    }
}

/// Closed-form dL/dpred. Mirrors the graph path exactly, clamping included,
/// so the dual-path test can compare to 1e-6.
pub fn loss_gradient(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "loss shapes differ: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if kind.is_cross_entropy() {
        for &v in target.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("{kind} target {v} outside [0,1]")));
            }
        }
    }
    let n = pred.len() as f64;
    let data: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| match kind {
            LossKind::Mse => 2.0 * (p - t) / n,
            LossKind::Mae => {
                if p > t {
                    1.0 / n
                } else if p < t {
                    -1.0 / n
                } else {
                    0.0
                }
            }
            LossKind::Mape => {
                let frac = (t - p) / clamp_denominator(t);
                let sign = if frac > 0.0 {
                    1.0
                } else if frac < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                // d|frac|/dp = sign(frac) * (-1 / t_clamped), but zero when the
                // denominator sat in the clamped region contributes no p-path
                sign * (-1.0 / clamp_denominator(t)) / n
            }
            LossKind::Bce => {
                let pc = p.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
                let in_clamp = (EPS_CLAMP..=1.0 - EPS_CLAMP).contains(&p);
                if !in_clamp {
                    0.0
                } else {
                    -(t * dlog_clamped(pc) - (1.0 - t) * dlog_clamped(1.0 - pc)) / n
                }
            }
            LossKind::Cce => {
                let pc = p.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
                let in_clamp = (EPS_CLAMP..=1.0 - EPS_CLAMP).contains(&p);
                if !in_clamp {
                    0.0
                } else {
                    -t * dlog_clamped(pc) / n
                }
            }
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}

/// Convenience: evaluate a loss on plain tensors, no graph kept.
pub fn loss_scalar(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.leaf(pred.clone(), false);
    let t = g.leaf(target.clone(), false);
    let l = loss_value(&mut g, kind, p, t)?;
    g.value(l).item()
}
