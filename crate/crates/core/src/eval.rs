//! Erasure metrics: efficacy, specificity, generality and their harmonic
//! mean, plus the divergence-norm table.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::ToyDataset;
use crate::diffusion::{CfgParams, NoiseSchedule};
use crate::error::{contract, Result};
use crate::model::DenoiserModel;
use crate::rng;
use crate::tensor::Tensor;
use crate::unguidance::{generate_unguided, probe_branch, ProbeConfig, Route};
use crate::vocab::{ConceptId, ConceptVocabulary};

/// Nearest-centroid classifier over the generating cluster means.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptClassifier {
    centroids: Vec<[f32; 2]>,
}

impl ConceptClassifier {
    pub fn new(centroids: Vec<[f32; 2]>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(contract("classifier needs at least one centroid"));
        }
        Ok(Self { centroids })
    }

    pub fn from_dataset(data: &ToyDataset) -> Self {
        Self { centroids: data.means() }
    }

    pub fn centroids(&self) -> &[[f32; 2]] {
        &self.centroids
    }

    /// Index of the nearest centroid; the lowest index wins ties.
    pub fn classify_point(&self, p: [f32; 2]) -> usize {
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    pub fn classify(&self, points: &Tensor) -> Result<Vec<usize>> {
        if points.shape().len() != 2 || points.cols() != 2 {
            return Err(crate::error::shape(format!("expected [n x 2] points, got {:?}", points.shape())));
        }
        if !points.is_finite() {
            return Err(contract("cannot classify non-finite points"));
        }
        Ok((0..points.rows()).map(|i| self.classify_point([points.get(i, 0), points.get(i, 1)])).collect())
    }

    /// Fraction of `points` labelled `cluster`.
    pub fn fraction_in(&self, points: &Tensor, cluster: usize) -> Result<f64> {
        let labels = self.classify(points)?;
        if labels.is_empty() {
            return Err(contract("no points to classify"));
        }
        Ok(labels.iter().filter(|&&l| l == cluster).count() as f64 / labels.len() as f64)
    }
}

/// `H_o = 3 / ((1 − Acc_e)⁻¹ + Acc_s⁻¹ + (1 − Acc_g)⁻¹)`, zero at the poles.
pub fn harmonic_ho(acc_e: f64, acc_s: f64, acc_g: f64) -> f64 {
    if acc_e >= 1.0 || acc_g >= 1.0 || acc_s <= 0.0 {
        return 0.0;
    }
    3.0 / (1.0 / (1.0 - acc_e) + 1.0 / acc_s + 1.0 / (1.0 - acc_g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptClass {
    Erased,
    Retained,
    Synonym,
}

impl std::fmt::Display for PromptClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PromptClass::Erased => "erased",
            PromptClass::Retained => "retained",
            PromptClass::Synonym => "synonym",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub concept: ConceptId,
    pub name: String,
    pub class: PromptClass,
    pub n: usize,
    /// Samples landing in the prompt's own cluster.
    pub hits: usize,
    pub route: Route,
    pub weight: f32,
}

impl PromptResult {
    pub fn accuracy(&self) -> f64 {
        self.hits as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_e: f64,
    pub acc_s: f64,
    pub acc_g: f64,
    pub h_o: f64,
    pub prompts: Vec<PromptResult>,
}

impl MetricsReport {
    /// Pools hits per prompt class.
    pub fn from_prompts(prompts: Vec<PromptResult>) -> Result<Self> {
        let pooled = |class: PromptClass| -> Result<f64> {
            let (hits, n) = prompts
                .iter()
                .filter(|p| p.class == class)
                .fold((0usize, 0usize), |(h, n), p| (h + p.hits, n + p.n));
            if n == 0 {
                return Err(contract(format!("no {class} samples to score")));
            }
            Ok(hits as f64 / n as f64)
        };
        let acc_e = pooled(PromptClass::Erased)?;
        let acc_s = pooled(PromptClass::Retained)?;
        let acc_g = pooled(PromptClass::Synonym)?;
        Ok(Self { acc_e, acc_s, acc_g, h_o: harmonic_ho(acc_e, acc_s, acc_g), prompts })
    }
}

/// Pass limits for an erasure run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub max_acc_e: f64,
    pub min_acc_s: f64,
    pub max_acc_g: f64,
    pub min_h_o: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { max_acc_e: 0.10, min_acc_s: 0.90, max_acc_g: 0.15, min_h_o: 0.85 }
    }
}

impl MetricsReport {
    pub fn passes(&self, t: &Thresholds) -> bool {
        self.acc_e <= t.max_acc_e && self.acc_s >= t.min_acc_s && self.acc_g <= t.max_acc_g && self.h_o >= t.min_h_o
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub n_per_prompt: usize,
    pub probe: ProbeConfig,
    pub cfg: CfgParams,
    pub seed: u64,
}

/// Probe-routed sampling for every erased concept, every retained primary
/// and every synonym of an erased concept.
pub fn run_erasure_eval(
    base: &DenoiserModel,
    adapted: &DenoiserModel,
    vocab: &ConceptVocabulary,
    data: &ToyDataset,
    erased: &[ConceptId],
    settings: &EvalSettings,
    sched: &NoiseSchedule,
) -> Result<MetricsReport> {
    if settings.n_per_prompt == 0 {
        return Err(contract("n_per_prompt must be positive"));
    }
    if erased.is_empty() {
        return Err(contract("at least one erased concept is required"));
    }
    if let Some(c) = erased.iter().find(|&&c| !vocab.is_primary(c)) {
        return Err(contract(format!("concept {c} is not an erasable primary concept")));
    }
    let clf = ConceptClassifier::from_dataset(data);
    let mut prompts: Vec<_> = erased.iter().map(|&c| (c, PromptClass::Erased)).collect();
    prompts.extend(vocab.primaries().into_iter().filter(|c| !erased.contains(c)).map(|c| (c, PromptClass::Retained)));
    prompts.extend(erased.iter().flat_map(|&c| vocab.synonyms_of(c)).map(|c| (c, PromptClass::Synonym)));
    let mut results = Vec::with_capacity(prompts.len());
    for (concept, class) in prompts {
        let cluster = vocab
            .primary_of(concept)?
            .and_then(|p| data.cluster_for(p))
            .ok_or_else(|| contract(format!("concept {concept} has no cluster in the dataset")))?;
        let seed = rng::derive_seed(settings.seed, &[rng::stream::EVAL, concept.0 as u64]);
        let out = generate_unguided(
            base,
            adapted,
            vocab,
            concept,
            &settings.probe,
            settings.cfg,
            settings.n_per_prompt,
            seed,
            sched,
        )?;
        let hits = clf.classify(&out.samples)?.iter().filter(|&&l| l == cluster).count();
        results.push(PromptResult {
            concept,
            name: vocab.get(concept)?.name.clone(),
            class,
            n: settings.n_per_prompt,
            hits,
            route: out.decision.route,
            weight: out.decision.weight,
        });
    }
    MetricsReport::from_prompts(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub steps: usize,
    pub repeats: usize,
    pub seed: u64,
    pub mean_erased: f32,
    pub mean_neutral: f32,
    pub mean_retained: f32,
    pub seconds: f64,
}

impl NormRow {
    pub fn ordered(&self) -> bool {
        self.mean_erased > self.mean_neutral && self.mean_neutral > self.mean_retained
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrid {
    pub steps: Vec<usize>,
    pub repeats: Vec<usize>,
    pub seeds: Vec<u64>,
    pub cfg_scale: f32,
}

/// Mean divergence norms of the erased, neutral and one retained prompt
/// for every `(steps, repeats, seed)` cell.
pub fn norm_table_report(
    base: &DenoiserModel,
    adapted: &DenoiserModel,
    vocab: &ConceptVocabulary,
    erased: ConceptId,
    retained: ConceptId,
    grid: &NormGrid,
    sched: &NoiseSchedule,
) -> Result<Vec<NormRow>> {
    if grid.steps.is_empty() || grid.repeats.is_empty() || grid.seeds.is_empty() {
        return Err(contract("norm table grid must be nonempty"));
    }
    vocab.get(erased)?;
    vocab.get(retained)?;
    let mut rows = Vec::new();
    for &steps in &grid.steps {
        for &repeats in &grid.repeats {
            for &seed in &grid.seeds {
                let cfg = ProbeConfig { trials: repeats, probe_steps: steps, cfg_scale: grid.cfg_scale, seed, ..Default::default() };
                cfg.validate(sched)?;
                let start = Instant::now();
                let mean = |c: ConceptId, branch: u64| -> Result<f32> {
                    Ok(probe_branch(base, adapted, c, branch, &cfg, sched)?.0.mean)
                };
                let mean_erased = mean(erased, 0)?;
                let mean_neutral = mean(vocab.neutral(), 1)?;
                let mean_retained = mean(retained, 0)?;
                rows.push(NormRow {
                    steps,
                    repeats,
                    seed,
                    mean_erased,
                    mean_neutral,
                    mean_retained,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
        }
    }
    Ok(rows)
}
