//! Base denoiser training with condition dropout.

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Tape};
use crate::data::ToyDataset;
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::{contract, Error, Result};
use crate::model::{DenoiserModel, Trainable};
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::{ConceptId, ConceptVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Probability of replacing an example's concept with the neutral one.
    pub p_uncond: f32,
    pub seed: u64,
    /// Expected ceiling on the final 100-step running loss.
    pub loss_threshold: f32,
    /// Std of the fixed offsets that separate synonym embeddings from
    /// their primary.
    pub synonym_offset_std: f32,
    /// Learning rate at the last step as a fraction of `lr`; the rate
    /// follows a cosine from `lr` down to this.
    pub lr_final_fraction: f32,
    /// Steps over which the rate ramps linearly up to `lr`.
    pub warmup_steps: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 256,
            lr: 0.03,
            p_uncond: 0.1,
            seed: 0,
            loss_threshold: 0.6,
            synonym_offset_std: 0.1,
            lr_final_fraction: 0.05,
            warmup_steps: 200,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(contract(format!("p_uncond must lie in [0, 1], got {}", self.p_uncond)));
        }
        if self.batch == 0 {
            return Err(contract("batch size must be positive"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(contract("learning rate must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(contract("lr_final_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate used at `step`.
    pub fn lr_at(&self, step: usize) -> f32 {
        let warm = if step < self.warmup_steps { (step + 1) as f32 / self.warmup_steps as f32 } else { 1.0 };
        if self.steps <= 1 {
            return self.lr * warm;
        }
        let progress = step as f32 / (self.steps - 1) as f32;
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
        warm * self.lr * (self.lr_final_fraction + (1.0 - self.lr_final_fraction) * cos)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub loss_trace: Vec<f32>,
}

impl TrainReport {
    /// Mean of the last `window` losses (or fewer if the trace is short).
    pub fn running_loss(&self, window: usize) -> Option<f32> {
        if self.loss_trace.is_empty() {
            return None;
        }
        let tail = &self.loss_trace[self.loss_trace.len().saturating_sub(window)..];
        Some(tail.iter().sum::<f32>() / tail.len() as f32)
    }

    pub fn moving_average(&self, window: usize) -> Vec<f32> {
        if self.loss_trace.len() < window || window == 0 {
            return Vec::new();
        }
        self.loss_trace.windows(window).map(|w| w.iter().sum::<f32>() / window as f32).collect()
    }
}

/// Tracks the "loss above 10× initial for 100 consecutive steps" rule. The
/// initial loss is the mean of the first few observed losses.
#[derive(Debug, Default)]
pub(crate) struct DivergenceGuard {
    window: Vec<f32>,
    initial: Option<f32>,
    streak: usize,
}

/// Losses averaged into the reference "initial" loss.
const INITIAL_WINDOW: usize = 20;

impl DivergenceGuard {
    pub(crate) fn observe(&mut self, step: usize, loss: f32) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss, initial: self.reference() });
        }
        let Some(initial) = self.initial else {
            self.window.push(loss);
            if self.window.len() == INITIAL_WINDOW {
                self.initial = Some(self.reference());
            }
            return Ok(());
        };
        if loss > 10.0 * initial {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= 100 {
            return Err(Error::TrainingDiverged { step, loss, initial });
        }
        Ok(())
    }

    fn reference(&self) -> f32 {
        self.initial.unwrap_or_else(|| {
            if self.window.is_empty() {
                f32::NAN
            } else {
                self.window.iter().sum::<f32>() / self.window.len() as f32
            }
        })
    }

    /// Non-finite intermediate values count as divergence.
    pub(crate) fn map_non_finite<T>(&self, step: usize, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::NonFinite(_) => Error::TrainingDiverged { step, loss: f32::NAN, initial: self.reference() },
            other => other,
        })
    }

    /// Non-finite weights after an update count as divergence.
    pub(crate) fn check_weights<'a>(&self, step: usize, loss: f32, mut weights: impl Iterator<Item = &'a Tensor>) -> Result<()> {
        if weights.all(|w| w.is_finite()) {
            return Ok(());
        }
        Err(Error::TrainingDiverged { step, loss, initial: self.reference() })
    }
}

fn base_step(model: &DenoiserModel, batch: Batch, n: usize) -> Result<(f32, crate::autodiff::Gradients)> {
    let mut tape = Tape::new();
    let pred = model.forward(&mut tape, &batch.z, &batch.ts, &batch.concepts, Trainable::Base)?;
    let target = tape.constant(batch.eps);
    let diff = tape.sub(pred, target)?;
    let sq = tape.sum_squares(diff)?;
    let loss = tape.scale(sq, 1.0 / n as f32)?;
    let loss_value = tape.value(loss).data()[0];
    Ok((loss_value, tape.backward(loss)?))
}

/// One training batch: noised points, their step indices, concepts and the
/// noise that was added.
pub(crate) struct Batch {
    pub z: Tensor,
    pub ts: Vec<usize>,
    pub concepts: Vec<ConceptId>,
    pub eps: Tensor,
}

fn draw_batch(
    data: &ToyDataset,
    neutral: ConceptId,
    sched: &NoiseSchedule,
    cfg: &BaseTrainConfig,
    step: usize,
) -> Result<Batch> {
    let mut r = rng::rng(rng::derive_seed(cfg.seed, &[rng::stream::BASE_TRAIN, step as u64]));
    let n = cfg.batch;
    let k = data.clusters().len();
    let mut x0 = Vec::with_capacity(n * 2);
    let mut ts = Vec::with_capacity(n);
    let mut concepts = Vec::with_capacity(n);
    for _ in 0..n {
        let cluster = r.random_range(0..k);
        x0.extend(data.sample_point(cluster, &mut r));
        ts.push(r.random_range(1..=sched.total_steps()));
        let drop = r.random::<f32>() < cfg.p_uncond;
        concepts.push(if drop { neutral } else { data.clusters()[cluster].concept });
    }
    let x0 = Tensor::matrix(n, 2, x0)?;
    let eps = rng::standard_normal(&[n, 2], &mut r);
    let mut z = Vec::with_capacity(n * 2);
    for (i, &t) in ts.iter().enumerate() {
        let row = Tensor::matrix(1, 2, x0.row(i).to_vec())?;
        let e = Tensor::matrix(1, 2, eps.row(i).to_vec())?;
        z.extend_from_slice(forward_noise(&row, t, &e, sched)?.z.data());
    }
    Ok(Batch { z: Tensor::matrix(n, 2, z)?, ts, concepts, eps })
}

/// Train the base model on the standard noise-prediction objective, then
/// tie synonym embeddings to their (trained) primaries.
pub fn train_base(
    model: &mut DenoiserModel,
    data: &ToyDataset,
    vocab: &ConceptVocabulary,
    sched: &NoiseSchedule,
    cfg: &BaseTrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.is_adapted() {
        return Err(contract("base training needs a model without adapters"));
    }
    if model.total_steps() != sched.total_steps() {
        return Err(contract("model and schedule disagree on the number of steps"));
    }
    for c in data.clusters() {
        if !vocab.is_primary(c.concept) {
            return Err(contract(format!("cluster concept {} is not a primary concept", c.concept)));
        }
    }
    let mut report = TrainReport::default();
    let mut guard = DivergenceGuard::default();
    if cfg.steps > 0 {
        model.tie_neutral(vocab)?;
    }
    for step in 0..cfg.steps {
        let batch = draw_batch(data, vocab.neutral(), sched, cfg, step)?;
        let (loss_value, grads) = guard.map_non_finite(step, base_step(model, batch, cfg.batch))?;
        guard.observe(step, loss_value)?;
        sgd_step(model.base_named_tensors_mut(), &grads, cfg.lr_at(step))?;
        guard.check_weights(step, loss_value, model.base_named_tensors_mut().into_iter().map(|(_, t)| &*t))?;
        model.tie_neutral(vocab)?;
        report.loss_trace.push(loss_value);
        if step % 500 == 0 {
            debug!("base step {step}: loss {loss_value:.4}");
        }
    }
    if cfg.steps > 0 {
        model.record_training(cfg.steps);
        model.tie_synonyms(vocab, cfg.synonym_offset_std, cfg.seed)?;
        info!(
            "base training done: {} steps, running loss {:.4}",
            cfg.steps,
            report.running_loss(100).unwrap_or(f32::NAN)
        );
    }
    Ok(report)
}
