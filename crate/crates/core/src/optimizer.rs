//! Masked SGD with a learned learning rate and a learned freeze threshold.
//!
//! The weight update is `w ← w − α · g · Θ(|v| − ε)`, wrapped in the usual
//! momentum / weight-decay SGD. Both α and ε follow hypergradients built
//! from the dot product of the current gradient with the previous (masked)
//! one. Θ is a hard step whose derivative is taken to be 1
//! (straight-through), which is what turns the ε derivative into
//! `α · g_t · g_{t−1}`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardStats, Graph};
use crate::error::{Error, Result};
use crate::flops::{FlopsLedger, LayerFlops};
use crate::model::{argmax, Model};
use crate::neq::FreezeMask;

/// Direction of the ε hyper-update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonSign {
    /// `ε ← ε − η_ε · α · (g_t · g_{t−1})`
    #[default]
    Paper,
    /// `ε ← ε + η_ε · α · (g_t · g_{t−1})`
    Flipped,
}

impl std::str::FromStr for EpsilonSign {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(EpsilonSign::Paper),
            "flipped" => Ok(EpsilonSign::Flipped),
            other => Err(format!("expected `paper` or `flipped`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for EpsilonSign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EpsilonSign::Paper => "paper",
            EpsilonSign::Flipped => "flipped",
        })
    }
}

#[derive(Clone, Debug)]
pub struct HyperState {
    pub alpha: f64,
    pub epsilon: f64,
    pub eta_alpha: f64,
    pub eta_epsilon: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epsilon_sign: EpsilonSign,
    /// Gradient of the previous iteration, with frozen entries zero.
    pub prev_masked_grad: Option<Vec<f64>>,
    momentum_buffer: Vec<f64>,
}

impl HyperState {
    pub fn new(alpha: f64, epsilon: f64, param_count: usize) -> Self {
        Self {
            alpha,
            epsilon,
            eta_alpha: 0.0,
            eta_epsilon: 0.0,
            momentum: 0.0,
            weight_decay: 0.0,
            epsilon_sign: EpsilonSign::Paper,
            prev_masked_grad: None,
            momentum_buffer: vec![0.0; param_count],
        }
    }

    pub fn with_hyper_rates(mut self, eta_alpha: f64, eta_epsilon: f64) -> Self {
        self.eta_alpha = eta_alpha;
        self.eta_epsilon = eta_epsilon;
        self
    }

    pub fn with_sgd(mut self, momentum: f64, weight_decay: f64) -> Self {
        self.momentum = momentum;
        self.weight_decay = weight_decay;
        self
    }

    pub fn with_epsilon_sign(mut self, sign: EpsilonSign) -> Self {
        self.epsilon_sign = sign;
        self
    }

    pub fn momentum_buffer(&self) -> &[f64] {
        &self.momentum_buffer
    }

    /// True when either hyper-learning rate is non-zero.
    pub fn adapts(&self) -> bool {
        self.eta_alpha != 0.0 || self.eta_epsilon != 0.0
    }
}

/// Hard step: 1 for positive input, 0 otherwise (so `|v| − ε = 0` freezes).
pub fn ste_theta(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Straight-through derivative of [`ste_theta`]: the gradient passes as is.
pub fn ste_theta_grad(_x: f64) -> f64 {
    1.0
}

/// `Σ_p a[p] · b[p] · theta[p]`, summed in index order.
pub fn masked_dot(a: &[f64], b: &[f64], theta: &[f64]) -> f64 {
    a.iter().zip(b).zip(theta).map(|((x, y), t)| x * y * t).sum()
}

/// `Σ_p a[p] · b[p]`, summed in index order.
pub fn grad_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Next learning rate. Without gradient history α is returned unchanged.
pub fn hyperstep_alpha(grad_t: &[f64], hyper: &HyperState, theta_mask: &[f64]) -> f64 {
    match &hyper.prev_masked_grad {
        None => hyper.alpha,
        Some(prev) => hyper.alpha + hyper.eta_alpha * masked_dot(grad_t, prev, theta_mask),
    }
}

/// Next freeze threshold. Frozen entries of the stored gradient are zero, so
/// the plain dot product runs over unfrozen parameters only.
pub fn hyperstep_epsilon(grad_t: &[f64], hyper: &HyperState) -> f64 {
    let Some(prev) = &hyper.prev_masked_grad else {
        return hyper.epsilon;
    };
    // ∂L/∂ε = g_t · ∂w_t/∂ε, and ∂w_t/∂ε = α · g_{t−1} · Θ'(·) with Θ' = 1
    let hypergrad = grad_dot(grad_t, prev) * hyper.alpha * ste_theta_grad(0.0);
    match hyper.epsilon_sign {
        EpsilonSign::Paper => hyper.epsilon - hyper.eta_epsilon * hypergrad,
        EpsilonSign::Flipped => hyper.epsilon + hyper.eta_epsilon * hypergrad,
    }
}

/// SGD (momentum, weight decay) at rate `hyper.alpha` on unfrozen neurons.
/// Frozen slices are left untouched, including their momentum buffers.
pub fn masked_sgd_step(model: &mut Model, grads: &[f64], mask: &FreezeMask, hyper: &mut HyperState) -> Result<()> {
    let active = model.active_params(mask);
    apply_sgd(model, grads, &active, hyper)
}

fn apply_sgd(model: &mut Model, grads: &[f64], active: &[bool], hyper: &mut HyperState) -> Result<()> {
    let n = model.param_count();
    if grads.len() != n {
        return Err(Error::Contract(format!(
            "gradient has {} entries, model has {n} parameters",
            grads.len()
        )));
    }
    if hyper.momentum_buffer.len() != n {
        return Err(Error::Contract(format!(
            "momentum buffer has {} entries, model has {n} parameters",
            hyper.momentum_buffer.len()
        )));
    }
    let (alpha, mu, wd) = (hyper.alpha, hyper.momentum, hyper.weight_decay);
    let mut offset = 0;
    for p in model.params_mut() {
        let len = p.len();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let k = offset + i;
            if !active[k] {
                continue;
            }
            let d = grads[k] + wd * *w;
            let buf = &mut hyper.momentum_buffer[k];
            *buf = mu * *buf + d;
            *w -= alpha * *buf;
        }
        offset += len;
    }
    Ok(())
}

/// A labelled minibatch of flat feature rows.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub inputs: &'a [f64],
    pub labels: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationOutcome {
    pub loss: f64,
    pub correct: usize,
    pub batch_size: usize,
    pub alpha_before: f64,
    pub epsilon_before: f64,
    /// `g_t · g_{t−1}` as used by the ε update; `None` on the first step.
    /// Frozen entries are zero in both gradients.
    pub dot: Option<f64>,
    pub alpha: f64,
    pub epsilon: f64,
    pub backward: BackwardStats,
    pub forward_flops: u64,
    pub booked: LayerFlops,
}

/// One optimization step:
/// forward and loss, backward skipping frozen neurons, hyper-updates of α
/// and ε from the current and previous gradients, the masked weight update
/// at the new α, then FLOPs booking.
pub fn train_iteration(
    model: &mut Model,
    batch: Batch<'_>,
    mask: &FreezeMask,
    hyper: &mut HyperState,
    ledger: &mut FlopsLedger,
) -> Result<IterationOutcome> {
    let n = batch.labels.len();
    if n == 0 {
        return Err(Error::Contract("empty minibatch".into()));
    }
    let mut g = Graph::new();
    let pass = model.forward(&mut g, batch.inputs, n, true)?;
    let loss_node = g.softmax_cross_entropy(pass.logits, batch.labels)?;
    let loss = g.value(loss_node).item();
    let k = model.output_len();
    let correct = g
        .value(pass.logits)
        .data()
        .chunks(k)
        .zip(batch.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();

    let skip = model.grad_skip(mask, &pass);
    let backward = g.backward(loss_node, &skip)?;
    let grad = model.flat_grads(&g, &pass);

    let active = model.active_params(mask);
    let theta: Vec<f64> = active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    let (alpha_before, epsilon_before) = (hyper.alpha, hyper.epsilon);
    let dot = hyper.prev_masked_grad.as_ref().map(|prev| grad_dot(&grad, prev));
    let alpha = hyperstep_alpha(&grad, hyper, &theta);
    let epsilon = hyperstep_epsilon(&grad, hyper);
    hyper.alpha = alpha;
    hyper.epsilon = epsilon;
    if alpha <= 0.0 && alpha_before > 0.0 {
        warn!("learning rate became non-positive: {alpha}");
    }

    apply_sgd(model, &grad, &active, hyper)?;
    hyper.prev_masked_grad = Some(grad);

    let booked = ledger.record_iteration(mask, model, n);
    if hyper.adapts() && dot.is_some() {
        // masked dot (3 per entry), plain dot (2 per entry), scalar updates
        ledger.record_hyper(5 * model.param_count() as u64 + 6);
    }
    Ok(IterationOutcome {
        loss,
        correct,
        batch_size: n,
        alpha_before,
        epsilon_before,
        dot,
        alpha,
        epsilon,
        backward,
        forward_flops: g.forward_flops(),
        booked,
    })
}
