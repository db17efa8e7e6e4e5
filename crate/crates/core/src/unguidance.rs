//! Blending base and adapted guided predictions with a per-prompt weight.
//!
//! ```text
//! ε_ung = w·ε^cfg_θ* + (1 − w)·ε^cfg_θ
//! ```
//!
//! The weight comes from a probe: `N` seeded latents are partially denoised
//! by the base model for the prompt `c` and for the neutral prompt `c₀`,
//! and the mean `‖ε_θ(z_t, t, c) − ε_θ*(z_t, t, c)‖₂` of each branch is
//! compared. A prompt whose divergence exceeds the neutral one is routed to
//! erasure.

use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_eps, finish_from, initial_noise, partial_denoise_from, run_ddim, CfgParams, LatentState, NoiseSchedule, NoisePredictor};
use crate::error::{contract, Result};
use crate::model::DenoiserModel;
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::{ConceptId, ConceptVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub trials: usize,
    pub probe_steps: usize,
    pub w_erase: f32,
    pub w_retain: f32,
    /// Guidance scale of the partial denoising.
    pub cfg_scale: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { trials: 30, probe_steps: 25, w_erase: -1.0, w_retain: 2.0, cfg_scale: 7.5, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.trials == 0 {
            return Err(contract("the probe needs at least one trial"));
        }
        if self.probe_steps == 0 || self.probe_steps > sched.total_steps() {
            return Err(contract(format!(
                "probe steps must lie in [1, {}], got {}",
                sched.total_steps(),
                self.probe_steps
            )));
        }
        if !(self.w_erase <= -1.0) {
            return Err(contract(format!("w_erase must be <= -1, got {}", self.w_erase)));
        }
        if !(self.w_retain >= 1.0) || !self.w_retain.is_finite() || !self.w_erase.is_finite() {
            return Err(contract(format!("w_retain must be finite and >= 1, got {}", self.w_retain)));
        }
        CfgParams::new(self.cfg_scale)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceStats {
    pub norms: Vec<f32>,
    pub mean: f32,
}

impl DivergenceStats {
    pub fn from_norms(norms: Vec<f32>) -> Result<Self> {
        if norms.is_empty() {
            return Err(contract("divergence statistics need at least one trial"));
        }
        let mean = (norms.iter().map(|&v| v as f64).sum::<f64>() / norms.len() as f64) as f32;
        Ok(Self { norms, mean })
    }

    /// Sample standard error of the mean.
    pub fn std_error(&self) -> f32 {
        let n = self.norms.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean as f64;
        let var = self.norms.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt() as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Erase,
    Retain,
}

impl std::fmt::Display for Route {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Route::Erase => "erase",
            Route::Retain => "retain",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceDecision {
    pub concept: ConceptId,
    pub mean_c: f32,
    pub mean_c0: f32,
    pub weight: f32,
    pub route: Route,
}

impl GuidanceDecision {
    /// Ties keep the base model's behavior.
    pub fn from_means(concept: ConceptId, mean_c: f32, mean_c0: f32, cfg: &ProbeConfig) -> Self {
        let route = if mean_c > mean_c0 { Route::Erase } else { Route::Retain };
        let weight = match route {
            Route::Erase => cfg.w_erase,
            Route::Retain => cfg.w_retain,
        };
        Self { concept, mean_c, mean_c0, weight, route }
    }
}

/// Full probe record, including the prompt branch's partial latents.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub decision: GuidanceDecision,
    pub concept_stats: DivergenceStats,
    pub neutral_stats: DivergenceStats,
    /// Prompt-branch latents after the partial denoising, one row per trial.
    pub latents: LatentState,
}

fn check_pair(base: &DenoiserModel, adapted: &DenoiserModel) -> Result<()> {
    if base.is_adapted() {
        return Err(contract("the base model must not carry adapters"));
    }
    if !adapted.is_adapted() {
        return Err(contract("the adapted model needs an attached adapter"));
    }
    Ok(())
}

/// `‖ε_θ(z, t, c) − ε_θ*(z, t, c)‖₂` over the whole latent.
pub fn divergence_norm(base: &DenoiserModel, adapted: &DenoiserModel, z: &Tensor, t: usize, c: ConceptId) -> Result<f32> {
    check_pair(base, adapted)?;
    Ok(adapted.predict_eps(z, t, c)?.sub(&base.predict_eps(z, t, c)?)?.l2_norm())
}

/// Per-row divergence norms, one per trial.
fn row_divergences(base: &DenoiserModel, adapted: &DenoiserModel, z: &Tensor, t: usize, c: ConceptId) -> Result<Vec<f32>> {
    let diff = adapted.predict_eps(z, t, c)?.sub(&base.predict_eps(z, t, c)?)?;
    Ok(diff.row_norms())
}

const PROMPT_BRANCH: u64 = 0;
const NEUTRAL_BRANCH: u64 = 1;

/// Stacked `z_T`, each row drawn from its own trial seed.
fn trial_noise(cfg: &ProbeConfig, branch: u64, dim: usize) -> Result<Tensor> {
    let rows = (0..cfg.trials)
        .map(|i| initial_noise(1, dim, rng::derive_seed(cfg.seed, &[rng::stream::PROBE, branch, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Tensor::vstack(&rows.iter().collect::<Vec<_>>())
}

/// Divergence statistics for one prompt at the configured step count.
pub fn probe_branch(
    base: &DenoiserModel,
    adapted: &DenoiserModel,
    c: ConceptId,
    branch: u64,
    cfg: &ProbeConfig,
    sched: &NoiseSchedule,
) -> Result<(DivergenceStats, LatentState)> {
    let z_t = trial_noise(cfg, branch, base.data_dim())?;
    let state = partial_denoise_from(base, c, z_t, cfg.probe_steps, CfgParams::new(cfg.cfg_scale)?, sched)?;
    let norms = row_divergences(base, adapted, &state.z, state.t, c)?;
    Ok((DivergenceStats::from_norms(norms)?, state))
}

pub fn probe_detailed(
    base: &DenoiserModel,
    adapted: &DenoiserModel,
    vocab: &ConceptVocabulary,
    c: ConceptId,
    cfg: &ProbeConfig,
    sched: &NoiseSchedule,
) -> Result<ProbeOutcome> {
    cfg.validate(sched)?;
    check_pair(base, adapted)?;
    vocab.get(c)?;
    let (concept_stats, latents) = probe_branch(base, adapted, c, PROMPT_BRANCH, cfg, sched)?;
    let (neutral_stats, _) = probe_branch(base, adapted, vocab.neutral(), NEUTRAL_BRANCH, cfg, sched)?;
    let decision = GuidanceDecision::from_means(c, concept_stats.mean, neutral_stats.mean, cfg);
    Ok(ProbeOutcome { decision, concept_stats, neutral_stats, latents })
}

pub fn probe(
    base: &DenoiserModel,
    adapted: &DenoiserModel,
    vocab: &ConceptVocabulary,
    c: ConceptId,
    cfg: &ProbeConfig,
    sched: &NoiseSchedule,
) -> Result<GuidanceDecision> {
    Ok(probe_detailed(base, adapted, vocab, c, cfg, sched)?.decision)
}

pub fn unguided_predict(
    base: &DenoiserModel,
    adapted: &DenoiserModel,
    z: &Tensor,
    t: usize,
    c: ConceptId,
    w: f32,
    cfg: CfgParams,
) -> Result<Tensor> {
    let eps_base = cfg_eps(base, z, t, c, cfg)?;
    let eps_lora = cfg_eps(adapted, z, t, c, cfg)?;
    eps_base.affine_combine(w, &eps_lora, 1.0 - w)
}

/// Full trajectory from seeded noise with a fixed weight `w`. Uses the same
/// initial noise as [`crate::diffusion::sample`] for equal `n` and `seed`.
pub fn sample_with_weight(
    base: &DenoiserModel,
    adapted: &DenoiserModel,
    c: ConceptId,
    w: f32,
    cfg: CfgParams,
    n: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if !w.is_finite() {
        return Err(contract("guidance weight must be finite"));
    }
    let z_t = initial_noise(n, base.data_dim(), seed)?;
    let steps = sched.full_steps();
    Ok(run_ddim(z_t, &steps, sched, |z, t| unguided_predict(base, adapted, z, t, c, w, cfg))?.z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnguidedSamples {
    pub samples: Tensor,
    pub decision: GuidanceDecision,
}

/// Probe once, then sample `n` points at the decided weight.
#[allow(clippy::too_many_arguments)]
pub fn generate_unguided(
    base: &DenoiserModel,
    adapted: &DenoiserModel,
    vocab: &ConceptVocabulary,
    c: ConceptId,
    probe_cfg: &ProbeConfig,
    cfg: CfgParams,
    n: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<UnguidedSamples> {
    let decision = probe(base, adapted, vocab, c, probe_cfg, sched)?;
    let samples = sample_with_weight(base, adapted, c, decision.weight, cfg, n, seed, sched)?;
    Ok(UnguidedSamples { samples, decision })
}

/// Finish the probe's own prompt-branch latents at the decided weight,
/// yielding one sample per trial without fresh noise.
pub fn finish_probe_latents(
    base: &DenoiserModel,
    adapted: &DenoiserModel,
    outcome: &ProbeOutcome,
    cfg: CfgParams,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let d = &outcome.decision;
    finish_from(outcome.latents.clone(), sched, |z, t| unguided_predict(base, adapted, z, t, d.concept, d.weight, cfg))
}
