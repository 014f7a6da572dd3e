//! Per-image gradient attacks used as baselines for the generator.

use super::{effective_delta, AttackResult, FoolingCriterion};
use crate::data::ImageTensor;
use crate::detector::DetectorPass;
use crate::detector::DetectorWeights;
use crate::error::{Error, Result};
use crate::losses::{l2_grad, misclassify_logit_grad, total_loss_rows};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Input gradient of the summed face margin over every proposal in `pass`.
fn margin_gradient(pass: &DetectorPass, weight: f64) -> Vec<f64> {
    let rows: Vec<usize> = (0..pass.scores.rows()).collect();
    pass.input_gradient(&misclassify_logit_grad(&pass.scores, &rows, weight))
}

/// Single signed-gradient step `x′ = clamp(x − ε·sign(∇ₓJ))`, with `J` the
/// summed hinge over the top `criterion.proposal_cap` proposals.
pub fn fgsm_attack(
    x: &ImageTensor,
    detector: &DetectorWeights,
    epsilon: f64,
    criterion: &FoolingCriterion,
) -> Result<AttackResult> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let start = Instant::now();
    let pass = DetectorPass::run(x, detector, criterion.proposal_cap);
    let grad = margin_gradient(&pass, 1.0);
    let values = x
        .values()
        .iter()
        .zip(&grad)
        .map(|(&v, &g)| {
            if g > 0.0 {
                v - epsilon
            } else if g < 0.0 {
                v + epsilon
            } else {
                v
            }
        })
        .collect();
    let x_prime = ImageTensor::clamped(x.height(), x.width(), values);
    let wall_time = start.elapsed().as_secs_f64();
    let fooled = criterion.is_fooled(&x_prime, detector);
    Ok(AttackResult {
        delta: effective_delta(x, &x_prime),
        x_prime,
        iterations_used: 1,
        loss_trace: Vec::new(),
        fooled,
        wall_time,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwConfig {
    /// Weight of the hinge term against `‖δ‖₂²`.
    pub c: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for CwConfig {
    fn default() -> Self {
        Self {
            c: 0.05,
            steps: 20,
            step_size: 0.01,
        }
    }
}

/// Gradient descent on `‖x′ − x‖₂² + c·hinge(x′)` over the perturbation,
/// clamping after every step. Returns the best iterate: fooled ones first,
/// then the smallest perturbation.
pub fn cw_attack(
    x: &ImageTensor,
    detector: &DetectorWeights,
    cfg: &CwConfig,
    criterion: &FoolingCriterion,
) -> Result<AttackResult> {
    if !(cfg.c > 0.0 && cfg.c.is_finite()) || cfg.steps == 0 || !(cfg.step_size > 0.0) {
        return Err(Error::InvalidArgument(
            "C-W needs c > 0, steps >= 1 and step_size > 0".into(),
        ));
    }
    let start = Instant::now();
    let mut current = x.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(bool, f64, ImageTensor, usize)> = None;
    for step in 0..=cfg.steps {
        let pass = DetectorPass::run(&current, detector, criterion.proposal_cap);
        let rows: Vec<usize> = (0..pass.scores.rows()).collect();
        let loss = total_loss_rows(x, &current, &pass.scores, &rows, cfg.c).map_err(|e| match e {
            Error::NonFiniteLogits => Error::NonFiniteLoss {
                stage: "C-W step",
                index: step,
            },
            other => other,
        })?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: "C-W step",
                index: step,
            });
        }
        trace.push(loss);
        let fooled = criterion.fooled_by(&pass);
        let better = match &best {
            None => true,
            Some((bf, bl, _, _)) => (fooled && !bf) || (fooled == *bf && loss.l2_term < *bl),
        };
        if better {
            best = Some((fooled, loss.l2_term, current.clone(), step));
        }
        if step == cfg.steps {
            break;
        }
        let mut grad = margin_gradient(&pass, cfg.c);
        for (g, l) in grad.iter_mut().zip(l2_grad(x, &current)) {
            *g += l;
        }
        let values = current
            .values()
            .iter()
            .zip(&grad)
            .map(|(v, g)| v - cfg.step_size * g)
            .collect();
        current = ImageTensor::clamped(x.height(), x.width(), values);
    }
    let wall_time = start.elapsed().as_secs_f64();
    let (fooled, _, x_prime, step) = best.expect("at least one iterate");
    Ok(AttackResult {
        delta: effective_delta(x, &x_prime),
        x_prime,
        iterations_used: step,
        loss_trace: trace,
        fooled,
        wall_time,
    })
}
