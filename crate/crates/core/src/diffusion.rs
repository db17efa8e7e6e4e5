//! Noise schedule, closed-form forward noising, deterministic DDIM stepping
//! and classifier-free guidance.
//!
//! Step index `0` is clean data (`ᾱ_0 = 1`); index `T` is (nearly) pure noise.

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::ConceptId;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// How to build a [`NoiseSchedule`]; kept in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    /// The usual 1000-step linear range (1e-4..2e-2) compressed onto 50 steps,
    /// so that `ᾱ_T` is close to zero.
    fn default() -> Self {
        let total_steps = 50;
        let stretch = 1000.0 / total_steps as f64;
        Self { total_steps, beta_start: 1e-4 * stretch, beta_end: 2e-2 * stretch }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.total_steps, self.beta_start, self.beta_end)
    }
}

impl NoiseSchedule {
    /// Linearly spaced `β_1..β_T` from `beta_start` to `beta_end`.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(contract("schedule needs at least one step"));
        }
        let betas: Vec<f64> = (0..total_steps)
            .map(|i| {
                if total_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (total_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(contract("schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(contract("every beta must lie strictly inside (0, 1)"));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(contract("betas must be nondecreasing"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.total_steps() {
            return Err(contract(format!("step {t} outside schedule [0, {}]", self.total_steps())));
        }
        Ok(())
    }

    /// `[T, T-1, …, 0]`: one DDIM transition per scheduler step.
    pub fn full_steps(&self) -> Vec<usize> {
        (0..=self.total_steps()).rev().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfgParams {
    pub scale: f32,
}

impl CfgParams {
    pub fn new(scale: f32) -> Result<Self> {
        if !scale.is_finite() {
            return Err(contract("guidance scale must be finite"));
        }
        Ok(Self { scale })
    }
}

/// `z_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<LatentState> {
    sched.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let ab = sched.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let z = x0.zip_map(eps, |x, e| (a * x as f64 + s * e as f64) as f32)?;
    Ok(LatentState { z, t })
}

/// `ε_u + α·(ε_c − ε_u)`, evaluated as `(1−α)·ε_u + α·ε_c` so the endpoints
/// `α ∈ {0, 1}` return one input exactly.
pub fn cfg_predict(eps_uncond: &Tensor, eps_cond: &Tensor, params: CfgParams) -> Result<Tensor> {
    eps_uncond.affine_combine(1.0 - params.scale, eps_cond, params.scale)
}

/// Deterministic (η = 0) DDIM update from `state.t` to `t_next`.
pub fn ddim_step(state: &LatentState, eps_hat: &Tensor, t_next: usize, sched: &NoiseSchedule) -> Result<LatentState> {
    sched.check_step(state.t)?;
    if t_next >= state.t {
        return Err(contract(format!("DDIM step must move toward data: {} -> {t_next}", state.t)));
    }
    if state.z.shape() != eps_hat.shape() {
        return Err(shape(format!("latent {:?} vs eps {:?}", state.z.shape(), eps_hat.shape())));
    }
    let ab = sched.alpha_bar(state.t);
    let ab_next = sched.alpha_bar(t_next);
    let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sn, s1n) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
    let z = state.z.zip_map(eps_hat, |z, e| {
        let x0 = (z as f64 - s1a * e as f64) / sa;
        (sn * x0 + s1n * e as f64) as f32
    })?;
    Ok(LatentState { z, t: t_next })
}

/// A conditional noise predictor `ε(z, t, c)` with a neutral concept for
/// the unconditional branch of guidance.
pub trait NoisePredictor {
    fn predict(&self, z: &Tensor, t: usize, concept: ConceptId) -> Result<Tensor>;
    fn neutral(&self) -> ConceptId;
    fn data_dim(&self) -> usize;
}

/// Guided noise estimate for one predictor.
pub fn cfg_eps<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z: &Tensor,
    t: usize,
    concept: ConceptId,
    cfg: CfgParams,
) -> Result<Tensor> {
    let eps_u = predictor.predict(z, t, predictor.neutral())?;
    let eps_c = predictor.predict(z, t, concept)?;
    cfg_predict(&eps_u, &eps_c, cfg)
}

fn validate_steps(steps: &[usize], sched: &NoiseSchedule) -> Result<()> {
    if steps.len() < 2 {
        return Err(contract("a trajectory needs at least two step indices"));
    }
    for &t in steps {
        sched.check_step(t)?;
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(contract("step indices must be strictly decreasing"));
    }
    Ok(())
}

/// Run DDIM along `steps` from `start` using an arbitrary noise estimator.
pub fn run_ddim(
    start: Tensor,
    steps: &[usize],
    sched: &NoiseSchedule,
    mut eps_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<LatentState> {
    validate_steps(steps, sched)?;
    let mut state = LatentState { z: start, t: steps[0] };
    for &t_next in &steps[1..] {
        let eps = eps_fn(&state.z, state.t)?;
        state = ddim_step(&state, &eps, t_next, sched)?;
    }
    Ok(state)
}

/// `z_T ~ N(0, I)` with `n` rows of dimension `dim`.
pub fn initial_noise(n: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(contract("need at least one sample"));
    }
    Ok(rng::standard_normal(&[n, dim], &mut rng::rng(seed)))
}

/// Full guided DDIM trajectory from pure noise. `steps` must be strictly
/// decreasing and end at 0.
pub fn sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    concept: ConceptId,
    steps: &[usize],
    cfg: CfgParams,
    n: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if steps.last() != Some(&0) {
        return Err(contract("sampling steps must end at 0"));
    }
    let z_t = initial_noise(n, predictor.data_dim(), seed)?;
    let state = run_ddim(z_t, steps, sched, |z, t| cfg_eps(predictor, z, t, concept, cfg))?;
    Ok(state.z)
}

/// Denoise from pure noise for exactly `k` scheduler steps, ending at `T − k`.
pub fn partial_denoise<P: NoisePredictor + ?Sized>(
    predictor: &P,
    concept: ConceptId,
    k: usize,
    cfg: CfgParams,
    n: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<LatentState> {
    let z_t = initial_noise(n, predictor.data_dim(), seed)?;
    partial_denoise_from(predictor, concept, z_t, k, cfg, sched)
}

/// As [`partial_denoise`], starting from a caller-supplied `z_T`.
pub fn partial_denoise_from<P: NoisePredictor + ?Sized>(
    predictor: &P,
    concept: ConceptId,
    z_t: Tensor,
    k: usize,
    cfg: CfgParams,
    sched: &NoiseSchedule,
) -> Result<LatentState> {
    let total = sched.total_steps();
    if k == 0 || k > total {
        return Err(contract(format!("partial denoise needs 1 <= k <= {total}, got {k}")));
    }
    let steps: Vec<usize> = (total - k..=total).rev().collect();
    run_ddim(z_t, &steps, sched, |z, t| cfg_eps(predictor, z, t, concept, cfg))
}

/// Continue a partially denoised latent down to step 0.
pub fn finish_from(
    state: LatentState,
    sched: &NoiseSchedule,
    eps_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    if state.t == 0 {
        return Ok(state.z);
    }
    let steps: Vec<usize> = (0..=state.t).rev().collect();
    Ok(run_ddim(state.z, &steps, sched, eps_fn)?.z)
}
