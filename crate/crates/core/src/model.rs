//! Conditional noise predictor over 2-D points.
//!
//! ```text
//! τ = sinusoid(t), e = embed[c]
//! h₁ = gelu(in(z) + time₀(τ) + cond₀(e))
//! hᵢ₊₁ = gelu(hiddenᵢ(hᵢ) + timeᵢ(τ) + condᵢ(e))   i = 1..3
//! ε̂ = out(h₄)
//! ```
//!
//! The `cond*` projections are the only layers that see the concept
//! embedding; they play the role of the key/value projections of
//! cross-attention and are the default LoRA targets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::NoisePredictor;
use crate::error::{contract, shape, Error, Result};
use crate::lora::{AdapterSet, LoraAdapter, TargetMode};
use crate::rng;
use crate::tensor::Tensor;
use crate::vocab::{ConceptId, ConceptKind, ConceptVocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub data_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub time_features: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { data_dim: 2, hidden: 128, depth: 4, embed_dim: 16, time_features: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out × in]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Which tensors a forward pass registers as trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    dims: ModelDims,
    total_steps: usize,
    embed: Tensor,
    layers: BTreeMap<String, Linear>,
    attached: Option<AdapterSet>,
    /// Base-training steps applied so far.
    train_steps: usize,
}

const NEUTRAL_SHRINK: f32 = 0.25;

pub const EMBED_PARAM: &str = "embed";

/// Gaussian rows orthogonalized by Gram-Schmidt within consecutive blocks
/// of `d` rows, each rescaled to norm `√d`.
fn orthogonal_rows(n: usize, d: usize, r: &mut rand_chacha::ChaCha8Rng) -> Result<Tensor> {
    let raw = rng::standard_normal(&[n, d], r);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v: Vec<f64> = raw.row(i).iter().map(|&x| x as f64).collect();
        for prev in &out[i - i % d..i] {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let k = (d as f64).sqrt() / norm;
        out.push(v.into_iter().map(|a| a * k).collect());
    }
    Tensor::matrix(n, d, out.into_iter().flatten().map(|x| x as f32).collect())
}

fn layer_name(kind: &str, i: usize) -> String {
    format!("{kind}{i}")
}

impl DenoiserModel {
    /// Random initialization. `W ~ N(0, 1/in)`, zero biases, embedding rows
    /// mutually orthogonal (in blocks of `embed_dim`) with norm `√embed_dim`.
    pub fn init(dims: ModelDims, total_steps: usize, n_concepts: usize, seed: u64) -> Result<Self> {
        if dims.depth == 0 || dims.hidden == 0 || dims.embed_dim == 0 || dims.data_dim == 0 {
            return Err(contract("model dimensions must be positive"));
        }
        if dims.time_features == 0 || dims.time_features % 2 != 0 {
            return Err(contract("time feature count must be a positive even number"));
        }
        let mut r = rng::rng(seed);
        let mut layers = BTreeMap::new();
        let mut lin = |name: String, out: usize, inp: usize, bias: bool, r: &mut _| {
            let weight = rng::normal(&[out, inp], 1.0 / (inp as f32).sqrt(), r);
            let bias = bias.then(|| Tensor::zeros(&[out]));
            layers.insert(name, Linear { weight, bias });
        };
        let h = dims.hidden;
        lin("in".into(), h, dims.data_dim, true, &mut r);
        for i in 0..dims.depth {
            if i > 0 {
                lin(layer_name("hidden", i), h, h, true, &mut r);
            }
            lin(layer_name("time", i), h, dims.time_features, false, &mut r);
            lin(layer_name("cond", i), h, dims.embed_dim, false, &mut r);
        }
        lin("out".into(), dims.data_dim, h, true, &mut r);
        let embed = orthogonal_rows(n_concepts, dims.embed_dim, &mut r)?;
        Ok(Self { dims, total_steps, embed, layers, attached: None, train_steps: 0 })
    }

    pub fn from_parts(
        dims: ModelDims,
        total_steps: usize,
        embed: Tensor,
        layers: BTreeMap<String, Linear>,
    ) -> Result<Self> {
        let template = Self::init(dims, total_steps, embed.rows(), 0)?;
        if embed.shape() != template.embed.shape() {
            return Err(shape("embedding table shape does not match model dims"));
        }
        for (name, l) in &template.layers {
            let got = layers.get(name).ok_or_else(|| contract(format!("missing layer {name}")))?;
            if got.weight.shape() != l.weight.shape()
                || got.bias.as_ref().map(|b| b.shape().to_vec()) != l.bias.as_ref().map(|b| b.shape().to_vec())
            {
                return Err(shape(format!("layer {name} has the wrong shape")));
            }
        }
        if layers.len() != template.layers.len() {
            return Err(contract("unexpected extra layers"));
        }
        Ok(Self { dims, total_steps, embed, layers, attached: None, train_steps: 0 })
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn is_trained(&self) -> bool {
        self.train_steps > 0
    }

    pub fn with_train_steps(mut self, steps: usize) -> Self {
        self.train_steps = steps;
        self
    }

    pub(crate) fn record_training(&mut self, steps: usize) {
        self.train_steps += steps;
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn n_concepts(&self) -> usize {
        self.embed.rows()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embed
    }

    pub fn embedding(&self, c: ConceptId) -> Result<&[f32]> {
        if c.0 >= self.n_concepts() {
            return Err(Error::UnknownConcept(c.0));
        }
        Ok(self.embed.row(c.0))
    }

    pub fn layers(&self) -> &BTreeMap<String, Linear> {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&Linear> {
        self.layers.get(id)
    }

    /// Layers consuming the concept embedding.
    pub fn cond_pathway_ids(&self) -> Vec<String> {
        (0..self.dims.depth).map(|i| layer_name("cond", i)).collect()
    }

    pub fn target_layers(&self, mode: TargetMode) -> Vec<(String, usize, usize)> {
        let cond = self.cond_pathway_ids();
        self.layers
            .iter()
            .filter(|(id, _)| match mode {
                TargetMode::Cond => cond.contains(id),
                TargetMode::Noncond => !cond.contains(id),
            })
            .map(|(id, l)| (id.clone(), l.out_dim(), l.in_dim()))
            .collect()
    }

    /// Fresh zero-update adapter for this architecture.
    pub fn new_adapter(&self, mode: TargetMode, rank: usize, scale: f32, seed: u64) -> Result<LoraAdapter> {
        LoraAdapter::init(&self.target_layers(mode), rank, scale, &mut rng::rng(seed))
    }

    pub fn attached(&self) -> Option<&AdapterSet> {
        self.attached.as_ref()
    }

    pub fn is_adapted(&self) -> bool {
        self.attached.is_some()
    }

    /// Attach (replacing any current adapters). Base weights are untouched.
    pub fn attach(&mut self, adapters: impl Into<AdapterSet>) -> Result<()> {
        let set = adapters.into();
        for (_, ad) in set.components() {
            for (id, pair) in ad.pairs() {
                let layer = self.layers.get(id).ok_or_else(|| contract(format!("adapter targets unknown layer {id}")))?;
                if pair.b.shape()[0] != layer.out_dim() || pair.a.shape()[1] != layer.in_dim() {
                    return Err(shape(format!(
                        "adapter for {id} is {}x{}, layer is {}x{}",
                        pair.b.shape()[0],
                        pair.a.shape()[1],
                        layer.out_dim(),
                        layer.in_dim()
                    )));
                }
            }
        }
        self.attached = Some(set);
        Ok(())
    }

    pub fn with_adapters(&self, adapters: impl Into<AdapterSet>) -> Result<Self> {
        let mut m = self.clone();
        m.attach(adapters)?;
        Ok(m)
    }

    pub fn detach(&mut self) -> Option<AdapterSet> {
        self.attached.take()
    }

    pub fn base(&self) -> Self {
        let mut m = self.clone();
        m.attached = None;
        m
    }

    pub fn attached_mut(&mut self) -> Option<&mut AdapterSet> {
        self.attached.as_mut()
    }

    /// Bare model whose weights are `W + ΔW` for every adapted layer.
    pub fn materialize(&self) -> Result<Self> {
        let mut m = self.base();
        if let Some(set) = &self.attached {
            for id in set.target_layers() {
                if let Some(delta) = set.delta(id) {
                    let layer = m.layers.get_mut(id).expect("validated at attach");
                    layer.weight = layer.weight.add(&delta?)?;
                }
            }
        }
        Ok(m)
    }

    /// Checksum over base weights and embeddings only.
    pub fn base_checksum(&self) -> u64 {
        self.base_named_tensors().iter().fold(0u64, |h, (_, t)| h.rotate_left(5) ^ t.checksum())
    }

    pub fn base_named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![(EMBED_PARAM.to_string(), &self.embed)];
        for (id, l) in &self.layers {
            out.push((format!("{id}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("{id}.bias"), b));
            }
        }
        out
    }

    pub fn base_named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![(EMBED_PARAM.to_string(), &mut self.embed)];
        for (id, l) in self.layers.iter_mut() {
            out.push((format!("{id}.weight"), &mut l.weight));
            if let Some(b) = &mut l.bias {
                out.push((format!("{id}.bias"), b));
            }
        }
        out
    }

    /// Set the neutral row of the embedding table to a quarter of the mean
    /// of the primary rows.
    pub fn tie_neutral(&mut self, vocab: &ConceptVocabulary) -> Result<()> {
        if vocab.len() != self.n_concepts() {
            return Err(contract("vocabulary size differs from embedding table"));
        }
        let d = self.dims.embed_dim;
        let primaries = vocab.primaries();
        let mut mean = vec![0.0f32; d];
        for p in &primaries {
            for (m, v) in mean.iter_mut().zip(self.embed.row(p.0)) {
                *m += NEUTRAL_SHRINK * v / primaries.len() as f32;
            }
        }
        let n = vocab.neutral().0;
        self.embed.data_mut()[n * d..(n + 1) * d].copy_from_slice(&mean);
        Ok(())
    }

    /// Tie every synonym row of the embedding table to its primary plus a
    /// fixed Gaussian offset (std `offset_std`, drawn from `seed`).
    pub fn tie_synonyms(&mut self, vocab: &ConceptVocabulary, offset_std: f32, seed: u64) -> Result<()> {
        if vocab.len() != self.n_concepts() {
            return Err(contract("vocabulary size differs from embedding table"));
        }
        let d = self.dims.embed_dim;
        for c in vocab.concepts() {
            if let ConceptKind::Synonym { of } = c.kind {
                let mut r = rng::rng(rng::derive_seed(seed, &[rng::stream::SYNONYM, c.id.0 as u64]));
                let offset = rng::normal(&[d], offset_std, &mut r);
                let primary = self.embed.row(of.0).to_vec();
                let row = &mut self.embed.data_mut()[c.id.0 * d..(c.id.0 + 1) * d];
                for ((dst, p), o) in row.iter_mut().zip(primary).zip(offset.data()) {
                    *dst = p + o;
                }
            }
        }
        Ok(())
    }

    /// Sinusoidal features of the step index, one row per example. Angular
    /// frequencies run geometrically from 1 rad/step down to 1/T rad/step.
    pub fn time_features(&self, ts: &[usize]) -> Result<Tensor> {
        let f = self.dims.time_features;
        let half = f / 2;
        let span = (self.total_steps.max(2) as f32).ln();
        let freqs: Vec<f32> =
            (0..half).map(|j| (-span * j as f32 / (half.max(2) - 1) as f32).exp()).collect();
        let mut data = Vec::with_capacity(ts.len() * f);
        for &t in ts {
            if t > self.total_steps {
                return Err(contract(format!("step {t} outside schedule [0, {}]", self.total_steps)));
            }
            let t = t as f32;
            data.extend(freqs.iter().map(|w| (t * w).sin()));
            data.extend(freqs.iter().map(|w| (t * w).cos()));
        }
        Tensor::matrix(ts.len(), f, data)
    }

    fn register(&self, tape: &mut Tape, name: &str, t: &Tensor, trainable: Trainable) -> Var {
        if trainable == Trainable::Base {
            tape.param(name, t)
        } else {
            tape.constant(t.clone())
        }
    }

    fn apply_layer(&self, tape: &mut Tape, id: &str, x: Var, trainable: Trainable) -> Result<Var> {
        let layer = &self.layers[id];
        let w = self.register(tape, &format!("{id}.weight"), &layer.weight, trainable);
        let b = layer.bias.as_ref().map(|b| self.register(tape, &format!("{id}.bias"), b, trainable));
        let mut y = tape.linear(x, w, b)?;
        if let Some(set) = &self.attached {
            for (weight, ad) in set.components() {
                let Some(pair) = ad.pairs().get(id) else { continue };
                let (a, b) = if trainable == Trainable::Adapter {
                    (
                        tape.param(&LoraAdapter::param_name(id, 'a'), &pair.a),
                        tape.param(&LoraAdapter::param_name(id, 'b'), &pair.b),
                    )
                } else {
                    (tape.constant(pair.a.clone()), tape.constant(pair.b.clone()))
                };
                let low = tape.linear(x, a, None)?;
                let up = tape.linear(low, b, None)?;
                let up = tape.scale(up, weight * ad.scale())?;
                y = tape.add(y, up)?;
            }
        }
        Ok(y)
    }

    /// Record a forward pass with per-row step indices and concepts.
    pub fn forward(
        &self,
        tape: &mut Tape,
        z: &Tensor,
        ts: &[usize],
        concepts: &[ConceptId],
        trainable: Trainable,
    ) -> Result<Var> {
        let n = z.rows();
        if z.shape() != [n, self.dims.data_dim] {
            return Err(shape(format!("latent must be [n x {}], got {:?}", self.dims.data_dim, z.shape())));
        }
        if ts.len() != n || concepts.len() != n {
            return Err(shape("need one step index and one concept per row"));
        }
        if trainable == Trainable::Adapter {
            match &self.attached {
                Some(set) if set.components().len() == 1 => {}
                _ => return Err(contract("adapter training needs exactly one attached adapter")),
            }
        }
        let ids: Vec<usize> = concepts
            .iter()
            .map(|c| if c.0 < self.n_concepts() { Ok(c.0) } else { Err(Error::UnknownConcept(c.0)) })
            .collect::<Result<_>>()?;
        let tau = tape.constant(self.time_features(ts)?);
        let table = self.register(tape, EMBED_PARAM, &self.embed, trainable);
        let e = tape.gather_rows(table, &ids)?;
        let x = tape.constant(z.clone());

        let mut h = self.apply_layer(tape, "in", x, trainable)?;
        for i in 0..self.dims.depth {
            if i > 0 {
                let hh = self.apply_layer(tape, &layer_name("hidden", i), h, trainable)?;
                h = hh;
            }
            let tt = self.apply_layer(tape, &layer_name("time", i), tau, trainable)?;
            let cc = self.apply_layer(tape, &layer_name("cond", i), e, trainable)?;
            let s = tape.add(h, tt)?;
            let s = tape.add(s, cc)?;
            h = tape.gelu(s)?;
        }
        self.apply_layer(tape, "out", h, trainable)
    }

    /// `ε(z, t, c)` with the same `t` and `c` for every row.
    pub fn predict_eps(&self, z: &Tensor, t: usize, c: ConceptId) -> Result<Tensor> {
        let n = z.rows();
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, z, &vec![t; n], &vec![c; n], Trainable::Nothing)?;
        Ok(tape.value(out).clone())
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict(&self, z: &Tensor, t: usize, concept: ConceptId) -> Result<Tensor> {
        self.predict_eps(z, t, concept)
    }

    fn neutral(&self) -> ConceptId {
        ConceptId(0)
    }

    fn data_dim(&self) -> usize {
        self.dims.data_dim
    }
}
