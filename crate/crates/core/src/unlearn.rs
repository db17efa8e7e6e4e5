//! LoRA training that repels a target concept toward a mapping concept.
//!
//! For a latent `z_t` drawn by guided partial denoising of the target `c`:
//!
//! ```text
//! ε_m = ε_θ*(z_t, t, c_m)     ε_p = ε_θ*(z_t, t, c)     ε_n = ε_θ(z_t, t, c)
//! L   = ‖ε_n − (ε_m − γ(ε_p − ε_m))‖²
//! ```
//!
//! Only the adapter weights of `θ` receive gradients.

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Tape};
use crate::base_train::{DivergenceGuard, TrainReport};
use crate::diffusion::{partial_denoise, CfgParams, LatentState, NoiseSchedule};
use crate::error::{contract, Result};
use crate::lora::{LoraAdapter, TargetMode};
use crate::model::{DenoiserModel, Trainable};
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::{ConceptId, ConceptVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub target: ConceptId,
    pub mapping: ConceptId,
    /// Guidance scale used to generate training latents.
    pub start_guidance: f32,
    /// Strength of the repulsion away from the target.
    pub negative_guidance: f32,
    pub iterations: usize,
    pub lr: f32,
    /// Inclusive range the number of partial-denoising steps is drawn from.
    pub probe_step_range: (usize, usize),
    pub rank: usize,
    pub scale: f32,
    pub target_mode: TargetMode,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            target: ConceptId(1),
            mapping: ConceptId(2),
            start_guidance: 9.0,
            negative_guidance: 2.0,
            iterations: 200,
            lr: 0.004,
            probe_step_range: (5, 40),
            rank: 1,
            scale: 8.0,
            target_mode: TargetMode::Cond,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    /// Settings for erasure through the non-conditioning layers: weaker
    /// guidance, a smaller step and more iterations.
    pub fn explicit_content(target: ConceptId, mapping: ConceptId) -> Self {
        Self {
            target,
            mapping,
            start_guidance: 8.0,
            negative_guidance: 1.0,
            iterations: 1200,
            lr: 0.0001,
            target_mode: TargetMode::Noncond,
            ..Default::default()
        }
    }

    pub fn validate(&self, vocab: &ConceptVocabulary, sched: &NoiseSchedule) -> Result<()> {
        vocab.get(self.target)?;
        vocab.get(self.mapping)?;
        if self.target == vocab.neutral() {
            return Err(contract("the neutral concept cannot be erased"));
        }
        if self.target == self.mapping {
            return Err(contract("target and mapping concepts must differ"));
        }
        if !(self.negative_guidance >= 0.0) || !self.negative_guidance.is_finite() {
            return Err(contract(format!("negative guidance must be >= 0, got {}", self.negative_guidance)));
        }
        if !self.start_guidance.is_finite() {
            return Err(contract("start guidance must be finite"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(contract("learning rate must be finite and non-negative"));
        }
        let (lo, hi) = self.probe_step_range;
        if lo == 0 || lo > hi || hi > sched.total_steps() {
            return Err(contract(format!(
                "probe step range [{lo}, {hi}] must lie within [1, {}]",
                sched.total_steps()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetTriple {
    pub eps_m: Tensor,
    pub eps_p: Tensor,
    pub eps_n: Tensor,
}

impl TargetTriple {
    /// `ε_m − γ(ε_p − ε_m)`
    pub fn target(&self, gamma: f32) -> Result<Tensor> {
        self.eps_m.affine_combine(1.0 + gamma, &self.eps_p, -gamma)
    }
}

/// Latent for one training iteration: `k` guided DDIM steps of the frozen
/// base model conditioned on `c`, starting from seeded noise.
pub fn generate_training_latent(
    base: &DenoiserModel,
    c: ConceptId,
    sched: &NoiseSchedule,
    alpha: f32,
    k: usize,
    seed: u64,
) -> Result<LatentState> {
    if !base.is_trained() {
        return Err(contract("training latents need a trained base model"));
    }
    if base.is_adapted() {
        return Err(contract("training latents must come from the frozen base model"));
    }
    partial_denoise(base, c, k, CfgParams::new(alpha)?, 1, seed, sched)
}

fn check_pair(base: &DenoiserModel, adapted: &DenoiserModel) -> Result<()> {
    if base.is_adapted() {
        return Err(contract("the frozen model must not carry adapters"));
    }
    if !adapted.is_adapted() {
        return Err(contract("the trained model needs an attached adapter"));
    }
    Ok(())
}

pub fn compute_targets(
    base: &DenoiserModel,
    adapted: &DenoiserModel,
    z: &Tensor,
    t: usize,
    c: ConceptId,
    c_m: ConceptId,
) -> Result<TargetTriple> {
    check_pair(base, adapted)?;
    Ok(TargetTriple {
        eps_m: base.predict_eps(z, t, c_m)?,
        eps_p: base.predict_eps(z, t, c)?,
        eps_n: adapted.predict_eps(z, t, c)?,
    })
}

pub fn unlearn_loss(triple: &TargetTriple, gamma: f32) -> Result<f32> {
    Ok(triple.eps_n.sub(&triple.target(gamma)?)?.sum_squares())
}

/// Per-iteration quantities of one training step, with gradients for the
/// adapter only.
pub(crate) struct StepOutcome {
    pub loss: f32,
    pub grads: crate::autodiff::Gradients,
}

pub(crate) fn unlearn_step(
    base: &DenoiserModel,
    adapted: &DenoiserModel,
    state: &LatentState,
    cfg: &UnlearnConfig,
) -> Result<StepOutcome> {
    check_pair(base, adapted)?;
    let z = &state.z;
    let eps_m = base.predict_eps(z, state.t, cfg.mapping)?;
    let eps_p = base.predict_eps(z, state.t, cfg.target)?;
    let target = eps_m.affine_combine(1.0 + cfg.negative_guidance, &eps_p, -cfg.negative_guidance)?;
    let n = z.rows();
    let mut tape = Tape::new();
    let eps_n = adapted.forward(&mut tape, z, &vec![state.t; n], &vec![cfg.target; n], Trainable::Adapter)?;
    let target = tape.constant(target);
    let diff = tape.sub(eps_n, target)?;
    let loss = tape.sum_squares(diff)?;
    let value = tape.value(loss).data()[0];
    Ok(StepOutcome { loss: value, grads: tape.backward(loss)? })
}

/// Train a fresh adapter on top of `base`. The base is never modified.
pub fn train_lora(
    base: &DenoiserModel,
    vocab: &ConceptVocabulary,
    sched: &NoiseSchedule,
    cfg: &UnlearnConfig,
) -> Result<(LoraAdapter, TrainReport)> {
    cfg.validate(vocab, sched)?;
    if !base.is_trained() {
        return Err(contract("unlearning needs a trained base model"));
    }
    if base.is_adapted() {
        return Err(contract("unlearning starts from a model without adapters"));
    }
    let init_seed = rng::derive_seed(cfg.seed, &[rng::stream::LORA_TRAIN]);
    let adapter = base.new_adapter(cfg.target_mode, cfg.rank, cfg.scale, init_seed)?;
    let mut adapted = base.with_adapters(adapter)?;
    let mut report = TrainReport::default();
    let mut guard = DivergenceGuard::default();
    let (lo, hi) = cfg.probe_step_range;
    for it in 0..cfg.iterations {
        let mut r = rng::rng(rng::derive_seed(cfg.seed, &[rng::stream::LORA_TRAIN, 1 + it as u64]));
        let k = r.random_range(lo..=hi);
        let latent_seed = r.random::<u64>();
        let state = generate_training_latent(base, cfg.target, sched, cfg.start_guidance, k, latent_seed)?;
        let step = guard.map_non_finite(it, unlearn_step(base, &adapted, &state, cfg))?;
        guard.observe(it, step.loss)?;
        let set = adapted.attached_mut().expect("adapter attached above");
        let (_, adapter) = set.components_mut().first_mut().expect("one component");
        sgd_step(adapter.named_tensors_mut(), &step.grads, cfg.lr)?;
        guard.check_weights(it, step.loss, adapter.named_tensors_mut().into_iter().map(|(_, t)| &*t))?;
        report.loss_trace.push(step.loss);
        if it % 50 == 0 {
            debug!("lora iteration {it}: k {k}, loss {:.4}", step.loss);
        }
    }
    info!(
        "unlearning of concept {} done: {} iterations, running loss {:.4}",
        cfg.target,
        cfg.iterations,
        report.running_loss(50).unwrap_or(f32::NAN)
    );
    let set = adapted.detach().expect("adapter attached above");
    let (_, adapter) = set.into_components().into_iter().next().expect("one component");
    Ok((adapter, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleSpec;
    use crate::model::ModelDims;

    fn setup() -> (DenoiserModel, ConceptVocabulary, NoiseSchedule) {
        let vocab = ConceptVocabulary::with_primaries(3, 1).unwrap();
        let sched = ScheduleSpec { total_steps: 20, beta_start: 2e-3, beta_end: 0.3 }.build().unwrap();
        let dims = ModelDims { hidden: 16, depth: 2, embed_dim: 8, time_features: 4, data_dim: 2 };
        let base = DenoiserModel::init(dims, 20, vocab.len(), 3).unwrap().with_train_steps(1);
        (base, vocab, sched)
    }

    fn config() -> UnlearnConfig {
        UnlearnConfig { iterations: 5, probe_step_range: (2, 8), ..Default::default() }
    }

    #[test]
    fn first_step_loss_is_the_scaled_guidance_gap() {
        let (base, _, sched) = setup();
        let cfg = config();
        let adapted = base.with_adapters(base.new_adapter(cfg.target_mode, 1, 8.0, 1).unwrap()).unwrap();
        let state = generate_training_latent(&base, cfg.target, &sched, cfg.start_guidance, 6, 9).unwrap();
        let step = unlearn_step(&base, &adapted, &state, &cfg).unwrap();
        let triple = compute_targets(&base, &adapted, &state.z, state.t, cfg.target, cfg.mapping).unwrap();
        let gap = triple.eps_p.sub(&triple.eps_m).unwrap().sum_squares();
        let expected = (1.0 + cfg.negative_guidance).powi(2) * gap;
        assert!((step.loss - expected).abs() <= 1e-4 * expected.max(1.0), "{} vs {expected}", step.loss);
        assert!((unlearn_loss(&triple, cfg.negative_guidance).unwrap() - step.loss).abs() <= 1e-4 * expected.max(1.0));
        assert!(step.grads.len() > 0);
        assert!(step.grads.names().all(|n| n.starts_with("lora.")), "{:?}", step.grads.names().collect::<Vec<_>>());
    }

    #[test]
    fn training_leaves_the_base_untouched() {
        let (base, vocab, sched) = setup();
        let before = base.base_checksum();
        let (ad, report) = train_lora(&base, &vocab, &sched, &config()).unwrap();
        assert_eq!(base.base_checksum(), before);
        assert_eq!(report.loss_trace.len(), 5);
        assert!(ad.pairs().values().any(|p| p.b.l2_norm() > 0.0));
        let targets: Vec<&str> = ad.target_layers().collect();
        assert_eq!(targets, base.cond_pathway_ids().iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn untrained_or_adapted_bases_are_rejected() {
        let (base, vocab, sched) = setup();
        let fresh = base.clone().with_train_steps(0);
        assert!(train_lora(&fresh, &vocab, &sched, &config()).is_err());
        let adapted = base.with_adapters(base.new_adapter(TargetMode::Cond, 1, 8.0, 1).unwrap()).unwrap();
        assert!(train_lora(&adapted, &vocab, &sched, &config()).is_err());
    }

    #[test]
    fn explicit_content_preset_skips_the_conditioning_path() {
        let cfg = UnlearnConfig::explicit_content(ConceptId(1), ConceptId(2));
        assert_eq!((cfg.start_guidance, cfg.negative_guidance), (8.0, 1.0));
        assert_eq!(cfg.target_mode, TargetMode::Noncond);
    }
}
