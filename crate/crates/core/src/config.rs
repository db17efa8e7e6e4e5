//! Run configuration: every hyperparameter of the pipeline in one JSON
//! document. Missing keys take their defaults, and a saved snapshot always
//! holds the full resolved tree.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::base_train::BaseTrainConfig;
use crate::data::{DatasetSpec, ToyDataset};
use crate::diffusion::{CfgParams, NoiseSchedule, ScheduleSpec};
use crate::error::{contract, Error, Result};
use crate::eval::{EvalSettings, Thresholds};
use crate::model::{DenoiserModel, ModelDims};
use crate::rng::{derive_seed, stream};
use crate::unguidance::ProbeConfig;
use crate::unlearn::UnlearnConfig;
use crate::vocab::ConceptVocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_per_prompt: usize,
    /// Guidance scale for every sampled prompt.
    pub cfg_scale: f32,
    pub seed: u64,
    pub thresholds: Thresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_per_prompt: 200, cfg_scale: 7.5, seed: 0, thresholds: Thresholds::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub schedule: ScheduleSpec,
    pub model: ModelDims,
    pub base_train: BaseTrainConfig,
    pub unlearn: UnlearnConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            schedule: ScheduleSpec::default(),
            model: ModelDims::default(),
            base_train: BaseTrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.reseed(0);
        cfg
    }
}

impl RunConfig {
    /// Set the master seed and derive every component seed from it.
    pub fn reseed(&mut self, master: u64) {
        self.seed = master;
        self.base_train.seed = derive_seed(master, &[stream::BASE_TRAIN]);
        self.unlearn.seed = derive_seed(master, &[stream::LORA_TRAIN]);
        self.probe.seed = derive_seed(master, &[stream::PROBE]);
        self.eval.seed = derive_seed(master, &[stream::EVAL]);
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, &[stream::INIT])
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::checkpoint::write_atomic(path.as_ref(), format!("{}\n", self.to_json()).as_bytes())
    }

    pub fn vocabulary(&self) -> Result<ConceptVocabulary> {
        ConceptVocabulary::with_primaries(self.dataset.n_concepts, self.dataset.synonyms_per_concept)
    }

    pub fn dataset(&self, vocab: &ConceptVocabulary) -> Result<ToyDataset> {
        self.dataset.build(vocab)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn init_model(&self) -> Result<DenoiserModel> {
        let vocab = self.vocabulary()?;
        DenoiserModel::init(self.model, self.schedule.total_steps, vocab.len(), self.init_seed())
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        Ok(EvalSettings {
            n_per_prompt: self.eval.n_per_prompt,
            probe: self.probe.clone(),
            cfg: CfgParams::new(self.eval.cfg_scale)?,
            seed: self.eval.seed,
        })
    }

    /// Checks every section against the vocabulary and schedule it implies.
    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocabulary()?;
        let sched = self.schedule()?;
        self.dataset(&vocab)?;
        self.base_train.validate()?;
        self.unlearn.validate(&vocab, &sched)?;
        self.probe.validate(&sched)?;
        CfgParams::new(self.eval.cfg_scale)?;
        if self.eval.n_per_prompt == 0 {
            return Err(contract("eval.n_per_prompt must be positive"));
        }
        Ok(())
    }
}
