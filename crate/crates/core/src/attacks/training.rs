//! Generator training against a frozen detector.
//!
//! Per image the inner loop evaluates `δ = G(x)`, `x′ = clamp(x + δ)`, scores
//! the proposals of `x′`, and takes one optimizer step on the generator
//! weights. It stops when every proposal has dropped below the face
//! threshold, when the iteration budget is spent, or (in
//! [`GuardMode::Literal`]) when the perturbation is already within the
//! threshold after at least one step.

use super::{effective_delta, AttackResult, FooledSet, GuardMode, TrainConfig};
use crate::data::{ImageTensor, Sample};
use crate::detector::{DetectorPass, DetectorWeights};
use crate::error::{Error, Result};
use crate::generator::{apply, GeneratorWeights};
use crate::losses::{l2_grad, misclassify_logit_grad, total_loss_rows};
use crate::nn::Adam;
use crate::seeding;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// One evaluated inner iteration, as written to the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub image_id: usize,
    pub m: usize,
    pub l2: f64,
    pub misclassify: f64,
    pub total: f64,
    pub phi_size: usize,
    /// Seconds since this image's loop started.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub images: usize,
    pub fooled: usize,
    /// Images whose last evaluated loss is below their first.
    pub improved: usize,
    pub mean_l2: f64,
    pub steps: usize,
}

fn run_inner<F>(
    x: &ImageTensor,
    image_id: usize,
    epoch: usize,
    detector: &DetectorWeights,
    generator: &mut GeneratorWeights,
    adam: &mut Adam,
    cfg: &TrainConfig,
    log: &mut F,
) -> Result<AttackResult>
where
    F: FnMut(&IterationRecord),
{
    let start = Instant::now();
    let criterion = cfg.criterion();
    let mut trace = Vec::new();
    let mut m = 0;
    loop {
        let (delta, gen_trace) = generator.forward_traced(x)?;
        let x_prime = apply(x, &delta);
        let pass = DetectorPass::run(&x_prime, detector, cfg.proposal_cap_train);
        let phi = FooledSet::from_pass(&pass, cfg.train_alpha);
        let non_finite = || Error::NonFiniteLoss {
            stage: "attack iteration",
            index: m,
        };
        let loss = total_loss_rows(x, &x_prime, &pass.scores, &phi.indices, cfg.lambda).map_err(|e| match e {
            Error::NonFiniteLogits => non_finite(),
            other => other,
        })?;
        if !loss.total.is_finite() {
            return Err(non_finite());
        }
        trace.push(loss);
        log(&IterationRecord {
            epoch,
            image_id,
            m,
            l2: loss.l2_term,
            misclassify: loss.misclassify_term,
            total: loss.total,
            phi_size: phi.len(),
            wall_time: start.elapsed().as_secs_f64(),
        });

        let small_enough = cfg.guard == GuardMode::Literal && m > 0 && loss.l2_term <= cfg.threshold;
        if phi.is_empty() || small_enough || m >= cfg.max_iter {
            return Ok(AttackResult {
                delta: effective_delta(x, &x_prime),
                fooled: criterion.fooled_by(&pass),
                x_prime,
                iterations_used: m,
                loss_trace: trace,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }

        let d_logits = misclassify_logit_grad(&pass.scores, &phi.indices, cfg.lambda);
        let mut d_x_prime = pass.input_gradient(&d_logits);
        for (g, l) in d_x_prime.iter_mut().zip(l2_grad(x, &x_prime)) {
            *g += l;
        }
        // clamp passes gradient only where x + δ stayed inside (-1, 1)
        for ((g, &xv), &dv) in d_x_prime.iter_mut().zip(x.values()).zip(delta.values()) {
            let s = xv + dv;
            if !(s > -1.0 && s < 1.0) {
                *g = 0.0;
            }
        }
        let mut grads = vec![0.0; generator.num_params()];
        generator.backward(&gen_trace, &d_x_prime, &mut grads);
        adam.step(generator.params_mut(), &grads);
        m += 1;
    }
}

/// Run the inner loop on a single image from a fresh optimizer state.
/// Returns the updated generator alongside the attack on `x`.
pub fn algorithm1_inner(
    x: &ImageTensor,
    detector: &DetectorWeights,
    generator: &GeneratorWeights,
    cfg: &TrainConfig,
) -> Result<(GeneratorWeights, AttackResult)> {
    cfg.validate()?;
    let mut updated = generator.clone();
    let mut adam = Adam::new(updated.num_params(), cfg.step_size);
    let result = run_inner(x, 0, 0, detector, &mut updated, &mut adam, cfg, &mut |_| {})?;
    Ok((updated, result))
}

/// Generator plus optimizer state carried across images and epochs.
pub struct GeneratorTrainer {
    generator: GeneratorWeights,
    adam: Adam,
    cfg: TrainConfig,
    epochs_done: usize,
}

impl GeneratorTrainer {
    pub fn new(generator: GeneratorWeights, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(generator.num_params(), cfg.step_size);
        Ok(Self {
            generator,
            adam,
            cfg,
            epochs_done: 0,
        })
    }

    pub fn generator(&self) -> &GeneratorWeights {
        &self.generator
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// One pass over `data` in a seeded random order, one image at a time.
    pub fn run_epoch<F>(&mut self, data: &[Sample], detector: &DetectorWeights, mut log: F) -> Result<EpochSummary>
    where
        F: FnMut(&IterationRecord),
    {
        let epoch = self.epochs_done;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeding::stream(self.cfg.seed, &[epoch as u64]));
        let mut summary = EpochSummary {
            epoch,
            images: data.len(),
            fooled: 0,
            improved: 0,
            mean_l2: 0.0,
            steps: 0,
        };
        for &i in &order {
            let result = run_inner(
                &data[i].image,
                i,
                epoch,
                detector,
                &mut self.generator,
                &mut self.adam,
                &self.cfg,
                &mut log,
            )?;
            summary.fooled += usize::from(result.fooled);
            summary.steps += result.iterations_used;
            summary.mean_l2 += result.l2();
            if let (Some(first), Some(last)) = (result.loss_trace.first(), result.loss_trace.last()) {
                summary.improved += usize::from(last.total < first.total);
            }
        }
        summary.mean_l2 /= data.len().max(1) as f64;
        self.epochs_done += 1;
        let meta = self.generator.meta_mut();
        meta.epochs = self.epochs_done;
        meta.lambda = Some(self.cfg.lambda);
        meta.threshold = Some(self.cfg.threshold);
        log::info!(
            "attack epoch {epoch}: fooled {}/{} during training, mean l2 {:.3}, {} steps",
            summary.fooled,
            summary.images,
            summary.mean_l2,
            summary.steps
        );
        Ok(summary)
    }

    pub fn into_weights(self) -> GeneratorWeights {
        self.generator
    }
}

/// Train `generator` for `epochs` passes over `data`, reporting every inner
/// iteration to `log`.
pub fn train_generator<F>(
    data: &[Sample],
    detector: &DetectorWeights,
    generator: GeneratorWeights,
    cfg: &TrainConfig,
    epochs: usize,
    mut log: F,
) -> Result<GeneratorWeights>
where
    F: FnMut(&IterationRecord),
{
    let mut trainer = GeneratorTrainer::new(generator, cfg.clone())?;
    for _ in 0..epochs {
        trainer.run_epoch(data, detector, &mut log)?;
    }
    Ok(trainer.into_weights())
}
