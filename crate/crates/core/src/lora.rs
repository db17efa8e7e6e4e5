//! Low-rank adapters `ΔW = β·B·A` and weighted adapter sets.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `[d × r]`, d = layer output width.
    pub b: Tensor,
    /// `[r × k]`, k = layer input width.
    pub a: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    rank: usize,
    scale: f32,
    pairs: BTreeMap<String, LoraPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Only the layers that consume the concept embedding.
    #[default]
    Cond,
    /// Every layer except the conditioning pathway.
    Noncond,
}

impl std::str::FromStr for TargetMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cond" => Ok(Self::Cond),
            "noncond" => Ok(Self::Noncond),
            other => Err(contract(format!("unknown target mode {other:?} (expected cond|noncond)"))),
        }
    }
}

const A_INIT_STD: f32 = 0.01;

impl LoraAdapter {
    /// `A ~ N(0, (0.01)²/k)`, `B = 0`, so a fresh adapter leaves the model unchanged.
    /// `targets` lists `(layer id, out width d, in width k)`.
    pub fn init(targets: &[(String, usize, usize)], rank: usize, scale: f32, rng: &mut ChaCha8Rng) -> Result<Self> {
        if rank == 0 {
            return Err(contract("LoRA rank must be positive"));
        }
        let mut pairs = BTreeMap::new();
        for (id, d, k) in targets {
            let a = rng::normal(&[rank, *k], A_INIT_STD / (*k as f32).sqrt(), rng);
            let b = Tensor::zeros(&[*d, rank]);
            pairs.insert(id.clone(), LoraPair { b, a });
        }
        Self::from_pairs(rank, scale, pairs)
    }

    pub fn from_pairs(rank: usize, scale: f32, pairs: BTreeMap<String, LoraPair>) -> Result<Self> {
        if rank == 0 {
            return Err(contract("LoRA rank must be positive"));
        }
        if !scale.is_finite() {
            return Err(contract("LoRA scale must be finite"));
        }
        if pairs.is_empty() {
            return Err(contract("adapter must target at least one layer"));
        }
        for (id, p) in &pairs {
            let (bs, as_) = (p.b.shape(), p.a.shape());
            if bs.len() != 2 || as_.len() != 2 || bs[1] != rank || as_[0] != rank {
                return Err(contract(format!("layer {id}: B {bs:?} / A {as_:?} inconsistent with rank {rank}")));
            }
            if rank >= bs[0].min(as_[1]) {
                return Err(contract(format!(
                    "layer {id}: rank {rank} must be below min(d={}, k={})",
                    bs[0], as_[1]
                )));
            }
        }
        Ok(Self { rank, scale, pairs })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn with_scale(mut self, scale: f32) -> Self {
        self.scale = scale;
        self
    }

    pub fn pairs(&self) -> &BTreeMap<String, LoraPair> {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut BTreeMap<String, LoraPair> {
        &mut self.pairs
    }

    pub fn target_layers(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(String::as_str)
    }

    /// `β·B·A` for one target layer.
    pub fn delta(&self, layer: &str) -> Option<Result<Tensor>> {
        self.pairs.get(layer).map(|p| Ok(p.b.matmul(&p.a)?.scale(self.scale)))
    }

    pub fn param_name(layer: &str, which: char) -> String {
        format!("lora.{layer}.{which}")
    }

    /// Flat `(name, tensor)` view used by training and checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.pairs
            .iter()
            .flat_map(|(id, p)| [(Self::param_name(id, 'b'), &p.b), (Self::param_name(id, 'a'), &p.a)])
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.pairs
            .iter_mut()
            .flat_map(|(id, p)| [(Self::param_name(id, 'b'), &mut p.b), (Self::param_name(id, 'a'), &mut p.a)])
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        self.named_tensors().iter().fold(0u64, |h, (_, t)| h.rotate_left(7) ^ t.checksum())
    }
}

/// Weighted collection of adapters whose updates add:
/// `ΔW = Σ wᵢ·βᵢ·Bᵢ·Aᵢ`. A single adapter is a set with weight 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    components: Vec<(f32, LoraAdapter)>,
}

impl From<LoraAdapter> for AdapterSet {
    fn from(a: LoraAdapter) -> Self {
        Self { components: vec![(1.0, a)] }
    }
}

impl AdapterSet {
    pub fn new(components: Vec<(f32, LoraAdapter)>) -> Result<Self> {
        if components.is_empty() {
            return Err(contract("adapter set must hold at least one adapter"));
        }
        if components.iter().any(|(w, _)| !w.is_finite()) {
            return Err(contract("adapter weights must be finite"));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[(f32, LoraAdapter)] {
        &self.components
    }

    pub(crate) fn components_mut(&mut self) -> &mut [(f32, LoraAdapter)] {
        &mut self.components
    }

    pub fn into_components(self) -> Vec<(f32, LoraAdapter)> {
        self.components
    }

    pub fn target_layers(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.components.iter().flat_map(|(_, a)| a.target_layers()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Effective update for one layer, `None` if no component targets it.
    pub fn delta(&self, layer: &str) -> Option<Result<Tensor>> {
        let mut acc: Option<Tensor> = None;
        for (w, a) in &self.components {
            let Some(d) = a.delta(layer) else { continue };
            let d = match d {
                Ok(d) => d.scale(*w),
                Err(e) => return Some(Err(e)),
            };
            acc = Some(match acc {
                None => d,
                Some(prev) => match prev.add(&d) {
                    Ok(t) => t,
                    Err(e) => return Some(Err(e)),
                },
            });
        }
        acc.map(Ok)
    }

    pub fn checksum(&self) -> u64 {
        self.components
            .iter()
            .fold(0u64, |h, (w, a)| h.rotate_left(11) ^ a.checksum() ^ w.to_bits() as u64)
    }
}

/// Weighted summation `a·ΔW⁽¹⁾ + (1−a)·ΔW⁽²⁾` of two adapter sets.
/// Targets absent from one side contribute zero.
pub fn merge_adapters(first: impl Into<AdapterSet>, second: impl Into<AdapterSet>, a: f32) -> Result<AdapterSet> {
    if !(0.0..=1.0).contains(&a) {
        return Err(contract(format!("mixing weight must lie in [0, 1], got {a}")));
    }
    let mut components = Vec::new();
    for (w, ad) in first.into().into_components() {
        components.push((a * w, ad));
    }
    for (w, ad) in second.into().into_components() {
        components.push(((1.0 - a) * w, ad));
    }
    AdapterSet::new(components)
}
