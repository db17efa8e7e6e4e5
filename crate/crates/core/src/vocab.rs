//! Concept identifiers, the neutral concept, mapping concepts and synonym
//! groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub usize);

impl std::fmt::Display for ConceptId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConceptKind {
    Neutral,
    Primary { cluster: usize },
    Synonym { of: ConceptId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub name: String,
    pub kind: ConceptKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    concepts: Vec<Concept>,
    neutral: ConceptId,
    mapping: BTreeMap<ConceptId, ConceptId>,
}

/// Names of the default four concepts, their synonyms, and the concept each
/// maps to during erasure.
const DEFAULT_CONCEPTS: [(&str, [&str; 3]); 4] = [
    ("airplane", ["aircraft", "plane", "jet"]),
    ("deer", ["hart", "stag", "doe"]),
    ("ship", ["boat", "vessel", "watercraft"]),
    ("cat", ["feline", "kitty", "housecat"]),
];

impl ConceptVocabulary {
    /// Neutral concept at id 0, primaries at `1..=n`, then synonyms grouped
    /// by primary. Each primary maps to the next primary cyclically.
    pub fn with_primaries(n_primary: usize, synonyms_per: usize) -> Result<Self> {
        if n_primary < 2 {
            return Err(contract("need at least two primary concepts"));
        }
        let mut concepts = vec![Concept { id: ConceptId(0), name: String::new(), kind: ConceptKind::Neutral }];
        for i in 0..n_primary {
            let name = DEFAULT_CONCEPTS.get(i).map(|c| c.0.to_string()).unwrap_or_else(|| format!("concept{i}"));
            concepts.push(Concept { id: ConceptId(i + 1), name, kind: ConceptKind::Primary { cluster: i } });
        }
        for i in 0..n_primary {
            for s in 0..synonyms_per {
                let name = DEFAULT_CONCEPTS
                    .get(i)
                    .and_then(|c| c.1.get(s))
                    .map(|n| n.to_string())
                    .unwrap_or_else(|| format!("{}-syn{s}", concepts[i + 1].name));
                let id = ConceptId(concepts.len());
                concepts.push(Concept { id, name, kind: ConceptKind::Synonym { of: ConceptId(i + 1) } });
            }
        }
        let mapping = (0..n_primary).map(|i| (ConceptId(i + 1), ConceptId((i + 1) % n_primary + 1))).collect();
        Self::new(concepts, mapping)
    }

    pub fn new(concepts: Vec<Concept>, mapping: BTreeMap<ConceptId, ConceptId>) -> Result<Self> {
        for (i, c) in concepts.iter().enumerate() {
            if c.id.0 != i {
                return Err(contract(format!("concept ids must be dense; position {i} holds {}", c.id)));
            }
        }
        let neutrals: Vec<_> = concepts.iter().filter(|c| c.kind == ConceptKind::Neutral).collect();
        if neutrals.len() != 1 {
            return Err(contract(format!("exactly one neutral concept required, found {}", neutrals.len())));
        }
        let neutral = neutrals[0].id;
        if neutral != ConceptId(0) {
            return Err(contract("the neutral concept must have id 0"));
        }
        let vocab = Self { concepts, neutral, mapping };
        for c in &vocab.concepts {
            if let ConceptKind::Synonym { of } = c.kind {
                if !matches!(vocab.get(of)?.kind, ConceptKind::Primary { .. }) {
                    return Err(contract(format!("synonym {} must point at a primary concept", c.id)));
                }
            }
        }
        for (&from, &to) in &vocab.mapping {
            vocab.get(from)?;
            vocab.get(to)?;
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn neutral(&self) -> ConceptId {
        self.neutral
    }

    pub fn get(&self, id: ConceptId) -> Result<&Concept> {
        self.concepts.get(id.0).ok_or(Error::UnknownConcept(id.0))
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn by_name(&self, name: &str) -> Option<ConceptId> {
        self.concepts.iter().find(|c| c.name == name).map(|c| c.id)
    }

    /// Parse either a numeric id or a concept name.
    pub fn resolve(&self, token: &str) -> Result<ConceptId> {
        if let Ok(n) = token.parse::<usize>() {
            self.get(ConceptId(n))?;
            return Ok(ConceptId(n));
        }
        self.by_name(token).ok_or_else(|| contract(format!("unknown concept name {token:?}")))
    }

    pub fn primaries(&self) -> Vec<ConceptId> {
        self.concepts.iter().filter(|c| matches!(c.kind, ConceptKind::Primary { .. })).map(|c| c.id).collect()
    }

    pub fn synonyms_of(&self, id: ConceptId) -> Vec<ConceptId> {
        self.concepts
            .iter()
            .filter(|c| c.kind == ConceptKind::Synonym { of: id })
            .map(|c| c.id)
            .collect()
    }

    /// Cluster a concept generates, following synonyms to their primary.
    pub fn cluster_of(&self, id: ConceptId) -> Result<Option<usize>> {
        Ok(match self.get(id)?.kind {
            ConceptKind::Neutral => None,
            ConceptKind::Primary { cluster } => Some(cluster),
            ConceptKind::Synonym { of } => self.cluster_of(of)?,
        })
    }

    /// The primary a concept stands for: itself, or the primary of a synonym.
    pub fn primary_of(&self, id: ConceptId) -> Result<Option<ConceptId>> {
        Ok(match self.get(id)?.kind {
            ConceptKind::Neutral => None,
            ConceptKind::Primary { .. } => Some(id),
            ConceptKind::Synonym { of } => Some(of),
        })
    }

    pub fn mapping_for(&self, id: ConceptId) -> Option<ConceptId> {
        self.mapping.get(&id).copied()
    }

    pub fn is_primary(&self, id: ConceptId) -> bool {
        matches!(self.get(id).map(|c| c.kind), Ok(ConceptKind::Primary { .. }))
    }

    pub fn primary_for_cluster(&self, cluster: usize) -> Option<ConceptId> {
        self.concepts
            .iter()
            .find(|c| c.kind == ConceptKind::Primary { cluster })
            .map(|c| c.id)
    }
}
