//! Toy 2-D dataset: one Gaussian cluster per primary concept.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;
use crate::vocab::{ConceptId, ConceptVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub concept: ConceptId,
    pub mean: [f32; 2],
    /// Row-major 2×2 covariance.
    pub cov: [[f32; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_concepts: usize,
    pub radius: f32,
    pub variance: f32,
    pub synonyms_per_concept: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n_concepts: 4, radius: 3.0, variance: 0.25, synonyms_per_concept: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    clusters: Vec<Cluster>,
    chol: Vec<[[f32; 2]; 2]>,
}

impl DatasetSpec {
    /// Cluster means placed counter-clockwise on the corners `(±r, ±r)`
    /// (or evenly on a circle of radius `r√2` for other counts).
    pub fn build(&self, vocab: &ConceptVocabulary) -> Result<ToyDataset> {
        let primaries = vocab.primaries();
        if primaries.len() != self.n_concepts {
            return Err(contract(format!(
                "vocabulary has {} primaries, dataset expects {}",
                primaries.len(),
                self.n_concepts
            )));
        }
        let n = self.n_concepts as f32;
        let clusters = primaries
            .iter()
            .enumerate()
            .map(|(i, &concept)| {
                let angle = std::f32::consts::FRAC_PI_4 + std::f32::consts::TAU * i as f32 / n;
                let r = self.radius * std::f32::consts::SQRT_2;
                let mean = [round5(r * angle.cos()), round5(r * angle.sin())];
                Cluster { concept, mean, cov: [[self.variance, 0.0], [0.0, self.variance]] }
            })
            .collect();
        ToyDataset::new(clusters)
    }
}

fn round5(v: f32) -> f32 {
    (v * 1e5).round() / 1e5
}

impl ToyDataset {
    pub fn new(clusters: Vec<Cluster>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(contract("dataset needs at least one cluster"));
        }
        let chol = clusters
            .iter()
            .map(|c| {
                let [[a, b], [b2, d]] = c.cov;
                if (b - b2).abs() > 1e-6 || a <= 0.0 {
                    return Err(contract("covariance must be symmetric positive definite"));
                }
                let l11 = a.sqrt();
                let l21 = b / l11;
                let rem = d - l21 * l21;
                if rem <= 0.0 {
                    return Err(contract("covariance must be symmetric positive definite"));
                }
                Ok([[l11, 0.0], [l21, rem.sqrt()]])
            })
            .collect::<Result<_>>()?;
        Ok(Self { clusters, chol })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn means(&self) -> Vec<[f32; 2]> {
        self.clusters.iter().map(|c| c.mean).collect()
    }

    pub fn cluster_for(&self, concept: ConceptId) -> Option<usize> {
        self.clusters.iter().position(|c| c.concept == concept)
    }

    /// Draw one point from cluster `index`.
    pub fn sample_point(&self, index: usize, rng: &mut ChaCha8Rng) -> [f32; 2] {
        let c = &self.clusters[index];
        let l = &self.chol[index];
        let u0: f32 = StandardNormal.sample(rng);
        let u1: f32 = StandardNormal.sample(rng);
        [c.mean[0] + l[0][0] * u0, c.mean[1] + l[1][0] * u0 + l[1][1] * u1]
    }

    /// `n` points from one cluster as an `[n × 2]` tensor.
    pub fn sample_cluster(&self, index: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let data = (0..n).flat_map(|_| self.sample_point(index, rng)).collect();
        Tensor::matrix(n, 2, data)
    }

    /// Variance of each coordinate within a cluster.
    pub fn cluster_variance(&self, index: usize) -> [f32; 2] {
        let c = &self.clusters[index].cov;
        [c[0][0], c[1][1]]
    }
}
