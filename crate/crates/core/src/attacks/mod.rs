//! Attacks against a frozen detector: generator training, one-shot
//! generator inference, and the per-image FGSM and C-W baselines.

mod baselines;
mod training;

pub use baselines::{cw_attack, fgsm_attack, CwConfig};
pub use training::{algorithm1_inner, train_generator, GeneratorTrainer, IterationRecord};

use crate::data::ImageTensor;
use crate::detector::{DetectorPass, DetectorWeights, TEST_PROPOSAL_CAP};
use crate::error::{Error, Result};
use crate::generator::{apply, generate, GeneratorWeights, Perturbation};
use crate::losses::LossBreakdown;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// When the inner optimization loop stops, besides the fooled and budget exits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuardMode {
    /// Stop as soon as the squared L2 norm is at or below `threshold`.
    Literal,
    /// Ignore `threshold` and keep stepping until fooled or out of budget.
    UntilFooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Perturbation threshold in squared-L2 units.
    pub threshold: f64,
    pub max_iter: usize,
    pub step_size: f64,
    /// Face-probability floor for proposals that feed the hinge term.
    pub train_alpha: f64,
    pub proposal_cap_train: usize,
    pub proposal_cap_test: usize,
    pub seed: u64,
    pub guard: GuardMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            threshold: 10.0,
            max_iter: 10,
            step_size: 1e-3,
            train_alpha: 0.7,
            proposal_cap_train: crate::detector::TRAIN_PROPOSAL_CAP,
            proposal_cap_test: TEST_PROPOSAL_CAP,
            seed: 0,
            guard: GuardMode::Literal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lambda", self.lambda)?;
        positive("threshold", self.threshold)?;
        positive("step_size", self.step_size)?;
        if !(self.train_alpha > 0.0 && self.train_alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train_alpha must lie in (0, 1), got {}",
                self.train_alpha
            )));
        }
        if self.proposal_cap_train == 0 || self.proposal_cap_test == 0 {
            return Err(Error::InvalidArgument("proposal caps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn criterion(&self) -> FoolingCriterion {
        FoolingCriterion {
            alpha: self.train_alpha,
            proposal_cap: self.proposal_cap_test,
        }
    }
}

/// An image counts as fooled when no proposal among the top `proposal_cap`
/// reaches face probability `alpha` (so no detection survives at `alpha`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoolingCriterion {
    pub alpha: f64,
    pub proposal_cap: usize,
}

impl Default for FoolingCriterion {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            proposal_cap: TEST_PROPOSAL_CAP,
        }
    }
}

impl FoolingCriterion {
    /// Judge an existing pass; only its first `proposal_cap` rows count.
    pub fn fooled_by(&self, pass: &DetectorPass) -> bool {
        pass.scores
            .face_probabilities()
            .iter()
            .take(self.proposal_cap)
            .all(|&p| p < self.alpha)
    }

    pub fn is_fooled(&self, x: &ImageTensor, detector: &DetectorWeights) -> bool {
        self.fooled_by(&DetectorPass::run(x, detector, self.proposal_cap))
    }
}

/// Proposal indices still classified as face.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FooledSet {
    pub indices: Vec<usize>,
}

impl FooledSet {
    /// Rows whose face probability exceeds `alpha`.
    pub fn from_pass(pass: &DetectorPass, alpha: f64) -> Self {
        let indices = pass
            .scores
            .face_probabilities()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > alpha)
            .map(|(i, _)| i)
            .collect();
        Self { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_prime: ImageTensor,
    pub delta: Perturbation,
    pub iterations_used: usize,
    pub loss_trace: Vec<LossBreakdown>,
    pub fooled: bool,
    /// Seconds spent crafting `x_prime`, excluding the final fooled check.
    pub wall_time: f64,
}

impl AttackResult {
    /// Effective perturbation `x′ − x` (after clamping) as a squared L2 norm.
    pub fn l2(&self) -> f64 {
        self.delta.norm_sq()
    }
}

pub(crate) fn effective_delta(x: &ImageTensor, x_prime: &ImageTensor) -> Perturbation {
    let values = x_prime
        .values()
        .iter()
        .zip(x.values())
        .map(|(a, b)| a - b)
        .collect();
    Perturbation::new(x.height(), x.width(), values).expect("difference of valid images")
}

/// Just `x′ = apply(x, G(x))`; no detector access while crafting.
pub fn craft_with_generator(x: &ImageTensor, generator: &GeneratorWeights) -> Result<ImageTensor> {
    let delta = generate(x, generator)?;
    Ok(apply(x, &delta))
}

/// Attack one image with a trained generator and judge the result.
pub fn generator_attack(
    x: &ImageTensor,
    generator: &GeneratorWeights,
    detector: &DetectorWeights,
    criterion: &FoolingCriterion,
) -> Result<AttackResult> {
    let start = Instant::now();
    let x_prime = craft_with_generator(x, generator)?;
    let wall_time = start.elapsed().as_secs_f64();
    let fooled = criterion.is_fooled(&x_prime, detector);
    Ok(AttackResult {
        delta: effective_delta(x, &x_prime),
        x_prime,
        iterations_used: 0,
        loss_trace: Vec::new(),
        fooled,
        wall_time,
    })
}
