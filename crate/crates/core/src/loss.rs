//! Detection losses (SmoothL1 localization, focal classification,
//! direction softmax) with analytic gradients w.r.t. the raw head
//! outputs, their weighted total, and the Adam optimizer.
//!
//! Loss gradients are computed here as pure functions and injected into
//! the autodiff graph as seed gradients at the head output nodes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// beta_0: classification weight.
    pub beta_cls: f64,
    /// beta_1: localization weight (normalized by N_pos).
    pub beta_loc: f64,
    /// beta_2: direction weight (normalized by N_pos).
    pub beta_dir: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// SmoothL1 quadratic/linear transition.
    pub smooth_l1_delta: f64,
    /// Divide the anchor-summed focal loss by max(N_pos, 1) before
    /// weighting. The literal total formula leaves the classification
    /// term unnormalized, which swamps the others at realistic anchor
    /// counts.
    pub normalize_cls: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_cls: 1.0,
            beta_loc: 2.0,
            beta_dir: 0.2,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_delta: 1.0,
            normalize_cls: true,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        0.0
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SmoothL1 of a single residual: 0.5 d^2 / delta for |d| < delta, else
/// |d| - 0.5 delta. Returns (loss, dloss/dd).
pub fn smooth_l1(d: f64, delta: f64) -> (f64, f64) {
    if d.abs() < delta {
        (0.5 * d * d / delta, d / delta)
    } else {
        (d.abs() - 0.5 * delta, d.signum())
    }
}

/// Focal loss of one anchor from its raw logit:
/// L = -alpha_a (1 - p_a)^gamma ln(p_a), with p_a the probability of the
/// anchor's assigned label (alpha_a = alpha for positives, 1 - alpha for
/// negatives). Returns (loss, dloss/dlogit); computed via log-sigmoid so
/// saturated logits stay finite.
pub fn focal_loss(logit: f64, is_positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    // for negatives the loss is the positive-branch formula of (-logit)
    // with weight 1 - alpha, with the gradient negated by the chain rule
    let (z, a, sign) = if is_positive { (logit, alpha, 1.0) } else { (-logit, 1.0 - alpha, -1.0) };
    let p = sigmoid(z);
    let log_p = -softplus(-z);
    let one_minus_p = sigmoid(-z);
    let loss = -a * one_minus_p.powf(gamma) * log_p;
    // d/dz of -a (1-p)^g ln p  =  a g p (1-p)^g ln p - a (1-p)^(g+1)
    let dz = if gamma == 0.0 {
        -a * one_minus_p
    } else {
        a * gamma * p * one_minus_p.powf(gamma) * log_p - a * one_minus_p.powf(gamma + 1.0)
    };
    (loss, sign * dz)
}

/// Two-way softmax cross-entropy from raw logits. Returns
/// (loss, [dloss/dlogit0, dloss/dlogit1]).
pub fn direction_loss(logits: [f64; 2], target: usize) -> (f64, [f64; 2]) {
    assert!(target < 2);
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    let p = [e0 / z, e1 / z];
    let loss = -(p[target].max(1e-300)).ln();
    let mut grad = p;
    grad[target] -= 1.0;
    (loss, grad)
}

/// Weighted total: beta_cls * L_cls + (beta_loc * L_loc + beta_dir *
/// L_dir) / N_pos; the normalized group is dropped when N_pos = 0.
pub fn total_loss(cls: f64, loc: f64, dir: f64, n_pos: usize, w: &LossWeights) -> f64 {
    let cls_term = w.beta_cls * cls;
    if n_pos == 0 {
        cls_term
    } else {
        cls_term + (w.beta_loc * loc + w.beta_dir * dir) / n_pos as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate decay factor applied every `decay_epochs` epochs.
    pub decay_factor: f64,
    pub decay_epochs: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr0: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_factor: 0.8, decay_epochs: 15 }
    }
}

impl AdamConfig {
    /// lr at a given epoch: lr0 * factor^(epoch / decay_epochs).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((epoch / self.decay_epochs) as i32)
    }
}

/// First/second moments per parameter plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            step: 0,
        }
    }
}

#[derive(Debug, Error)]
#[error("non-finite gradient in parameter {param}; step aborted")]
pub struct NanGradient {
    pub param: String,
}

/// One Adam update over all parameters. Gradients may be None (parameter
/// untouched this step). A non-finite gradient aborts the whole step
/// before any parameter is mutated.
pub fn adam_step(
    names: &[String],
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<(), NanGradient> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(NanGradient { param: names[i].clone() });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as Real).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as Real).powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let (m, v, p) = (&mut state.m[i], &mut state.v[i], &mut params[i]);
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m.data[j] = cfg.beta1 as Real * m.data[j] + (1.0 - cfg.beta1 as Real) * gj;
            v.data[j] = cfg.beta2 as Real * v.data[j] + (1.0 - cfg.beta2 as Real) * gj * gj;
            let mhat = m.data[j] / bc1;
            let vhat = v.data[j] / bc2;
            p.data[j] -= lr as Real * mhat / (vhat.sqrt() + cfg.eps as Real);
        }
    }
    Ok(())
}
