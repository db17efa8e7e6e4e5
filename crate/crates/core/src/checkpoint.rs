//! Binary checkpoints for base models and adapter sets.
//!
//! ```text
//! "UNGD" | version: u32 LE | metadata length: u32 LE | metadata (JSON) | payload
//! ```
//!
//! The payload is every tensor's little-endian `f32` values, concatenated
//! in metadata order. Each tensor carries a CRC32 in the metadata, and the
//! metadata carries a CRC32 of itself (computed with its own checksum field
//! zeroed), so a single flipped byte anywhere in the file is detected.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::lora::{AdapterSet, LoraAdapter, LoraPair};
use crate::model::{DenoiserModel, ModelDims};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UNGD";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 12;
const CRC_PREFIX: &str = "{\"meta_crc32\":\"";
const CRC_PLACEHOLDER: &str = "00000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Model,
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Model(DenoiserModel),
    Adapters(AdapterSet),
}

impl Artifact {
    pub fn role(&self) -> Role {
        match self {
            Artifact::Model(_) => Role::Model,
            Artifact::Adapters(_) => Role::Adapter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub artifact: Artifact,
    /// Configuration the artifact was produced with.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<DenoiserModel> {
        match self.artifact {
            Artifact::Model(m) => Ok(m),
            Artifact::Adapters(_) => Err(Error::Format("expected a model checkpoint, found an adapter".into())),
        }
    }

    pub fn into_adapters(self) -> Result<AdapterSet> {
        match self.artifact {
            Artifact::Adapters(a) => Ok(a),
            Artifact::Model(_) => Err(Error::Format("expected an adapter checkpoint, found a model".into())),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    // Must stay the first field: its byte offset is fixed.
    meta_crc32: String,
    role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapters: Option<Vec<AdapterMeta>>,
    tensors: Vec<TensorMeta>,
    config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    dims: ModelDims,
    total_steps: usize,
    n_concepts: usize,
    train_steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterMeta {
    weight: f32,
    rank: usize,
    scale: f32,
    layers: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    crc32: u32,
}

fn component_tensor_name(i: usize, layer: &str, which: char) -> String {
    format!("c{i}.{}", LoraAdapter::param_name(layer, which))
}

fn collect(artifact: &Artifact) -> Result<(Option<ModelMeta>, Option<Vec<AdapterMeta>>, Vec<(String, &Tensor)>)> {
    match artifact {
        Artifact::Model(m) => {
            if m.is_adapted() {
                return Err(contract("detach adapters before saving a model; save them separately"));
            }
            let meta = ModelMeta {
                dims: m.dims(),
                total_steps: m.total_steps(),
                n_concepts: m.n_concepts(),
                train_steps: m.train_steps(),
            };
            Ok((Some(meta), None, m.base_named_tensors()))
        }
        Artifact::Adapters(set) => {
            let mut metas = Vec::new();
            let mut tensors = Vec::new();
            for (i, (w, ad)) in set.components().iter().enumerate() {
                metas.push(AdapterMeta {
                    weight: *w,
                    rank: ad.rank(),
                    scale: ad.scale(),
                    layers: ad.target_layers().map(str::to_string).collect(),
                });
                for (layer, pair) in ad.pairs() {
                    tensors.push((component_tensor_name(i, layer, 'b'), &pair.b));
                    tensors.push((component_tensor_name(i, layer, 'a'), &pair.a));
                }
            }
            Ok((None, Some(metas), tensors))
        }
    }
}

pub fn encode(artifact: &Artifact, config: &serde_json::Value) -> Result<Vec<u8>> {
    let (model, adapters, tensors) = collect(artifact)?;
    let mut payload = Vec::new();
    let mut metas = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        let start = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        metas.push(TensorMeta { name: name.clone(), shape: t.shape().to_vec(), crc32: crc32fast::hash(&payload[start..]) });
    }
    let meta = Metadata {
        meta_crc32: CRC_PLACEHOLDER.into(),
        role: artifact.role(),
        model,
        adapters,
        tensors: metas,
        config: config.clone(),
    };
    let mut text = serde_json::to_string(&meta)?;
    debug_assert!(text.starts_with(CRC_PREFIX));
    let crc = crc32fast::hash(text.as_bytes());
    let range = CRC_PREFIX.len()..CRC_PREFIX.len() + CRC_PLACEHOLDER.len();
    text.replace_range(range, &format!("{crc:08x}"));

    let meta_len = u32::try_from(text.len()).map_err(|_| contract("metadata exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + text.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn corruption(msg: impl Into<String>) -> Error {
    Error::Corruption(msg.into())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn parse_metadata(text: &[u8]) -> Result<Metadata> {
    let text = std::str::from_utf8(text).map_err(|_| corruption("metadata is not valid UTF-8"))?;
    let end = CRC_PREFIX.len() + CRC_PLACEHOLDER.len();
    if !text.starts_with(CRC_PREFIX) || text.len() < end || !text.is_char_boundary(end) {
        return Err(corruption("metadata checksum field missing"));
    }
    let stored = &text[CRC_PREFIX.len()..end];
    let stored = u32::from_str_radix(stored, 16)
        .ok()
        .filter(|_| stored.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)))
        .ok_or_else(|| corruption("metadata checksum is malformed"))?;
    let mut zeroed = text.to_string();
    zeroed.replace_range(CRC_PREFIX.len()..end, CRC_PLACEHOLDER);
    if crc32fast::hash(zeroed.as_bytes()) != stored {
        return Err(corruption("metadata checksum mismatch"));
    }
    serde_json::from_str(text).map_err(|e| Error::Format(format!("metadata: {e}")))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes; not an UNGD checkpoint".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(corruption("truncated header"));
    }
    let version = read_u32(bytes, 4);
    if version > VERSION {
        return Err(Error::Version { found: version, supported: VERSION });
    }
    if version == 0 {
        return Err(Error::Format("checkpoint version 0 is not valid".into()));
    }
    let meta_len = read_u32(bytes, 8) as usize;
    let meta_end = HEADER_LEN.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corruption("truncated metadata"))?;
    let meta = parse_metadata(&bytes[HEADER_LEN..meta_end])?;

    let payload = &bytes[meta_end..];
    let mut offset = 0usize;
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for tm in &meta.tensors {
        let count = tm.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| corruption("tensor shape overflows"))?;
        let len = count.checked_mul(4).ok_or_else(|| corruption("tensor shape overflows"))?;
        let end = offset.checked_add(len).filter(|&e| e <= payload.len()).ok_or_else(|| corruption(format!("payload truncated in tensor {}", tm.name)))?;
        let raw = &payload[offset..end];
        if crc32fast::hash(raw) != tm.crc32 {
            return Err(corruption(format!("checksum mismatch in tensor {}", tm.name)));
        }
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((tm.name.clone(), Tensor::new(tm.shape.clone(), data)?));
        offset = end;
    }
    if offset != payload.len() {
        return Err(corruption(format!("{} trailing payload bytes", payload.len() - offset)));
    }

    let artifact = match meta.role {
        Role::Model => Artifact::Model(rebuild_model(meta.model, tensors)?),
        Role::Adapter => Artifact::Adapters(rebuild_adapters(meta.adapters, tensors)?),
    };
    Ok(Checkpoint { artifact, config: meta.config })
}

fn rebuild_model(meta: Option<ModelMeta>, tensors: Vec<(String, Tensor)>) -> Result<DenoiserModel> {
    let meta = meta.ok_or_else(|| Error::Format("model checkpoint lacks model metadata".into()))?;
    let mut model = DenoiserModel::init(meta.dims, meta.total_steps, meta.n_concepts, 0)?.with_train_steps(meta.train_steps);
    let mut slots = model.base_named_tensors_mut();
    if slots.len() != tensors.len() {
        return Err(Error::Format(format!("model expects {} tensors, file has {}", slots.len(), tensors.len())));
    }
    for (name, t) in tensors {
        let slot = slots
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
        if slot.1.shape() != t.shape() {
            return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.1.shape())));
        }
        *slot.1 = t;
    }
    Ok(model)
}

fn rebuild_adapters(meta: Option<Vec<AdapterMeta>>, tensors: Vec<(String, Tensor)>) -> Result<AdapterSet> {
    let metas = meta.ok_or_else(|| Error::Format("adapter checkpoint lacks adapter metadata".into()))?;
    let mut by_name: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut components = Vec::with_capacity(metas.len());
    for (i, m) in metas.iter().enumerate() {
        let mut pairs = std::collections::BTreeMap::new();
        for layer in &m.layers {
            let mut take = |which| {
                let name = component_tensor_name(i, layer, which);
                by_name.remove(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))
            };
            let b = take('b')?;
            let a = take('a')?;
            pairs.insert(layer.clone(), LoraPair { b, a });
        }
        components.push((m.weight, LoraAdapter::from_pairs(m.rank, m.scale, pairs)?));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    AdapterSet::new(components)
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_checkpoint(path: impl AsRef<Path>, artifact: &Artifact, config: &serde_json::Value) -> Result<()> {
    write_atomic(path.as_ref(), &encode(artifact, config)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::TargetMode;
    use crate::rng;
    use crate::vocab::ConceptId;

    fn small_model() -> DenoiserModel {
        let dims = ModelDims { hidden: 8, depth: 2, embed_dim: 4, time_features: 4, data_dim: 2 };
        DenoiserModel::init(dims, 10, 3, 1).unwrap().with_train_steps(5)
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = small_model();
        let cfg = serde_json::json!({"seed": 3});
        let back = decode(&encode(&Artifact::Model(m.clone()), &cfg).unwrap()).unwrap();
        assert_eq!(back.config, cfg);
        let back = back.into_model().unwrap();
        assert_eq!(back, m);
        let z = rng::standard_normal(&[100, 2], &mut rng::rng(2));
        assert_eq!(back.predict_eps(&z, 4, ConceptId(1)).unwrap(), m.predict_eps(&z, 4, ConceptId(1)).unwrap());
    }

    #[test]
    fn fresh_adapter_round_trips_and_attaches() {
        let m = small_model();
        let ad = m.new_adapter(TargetMode::Cond, 1, 8.0, 4).unwrap();
        let bytes = encode(&Artifact::Adapters(ad.clone().into()), &serde_json::Value::Null).unwrap();
        let set = decode(&bytes).unwrap().into_adapters().unwrap();
        assert_eq!(set, AdapterSet::from(ad));
        let adapted = m.with_adapters(set).unwrap();
        let z = rng::standard_normal(&[5, 2], &mut rng::rng(3));
        assert_eq!(adapted.predict_eps(&z, 2, ConceptId(2)).unwrap(), m.predict_eps(&z, 2, ConceptId(2)).unwrap());
    }

    #[test]
    fn header_errors_are_classified() {
        let bytes = encode(&Artifact::Model(small_model()), &serde_json::Value::Null).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode(&newer), Err(Error::Version { found: 2, supported: 1 })));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Corruption(_))));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(decode(&flipped), Err(Error::Corruption(_))));
    }

    #[test]
    fn adapted_models_are_not_saved_whole() {
        let m = small_model();
        let ad = m.new_adapter(TargetMode::Cond, 1, 8.0, 4).unwrap();
        let adapted = m.with_adapters(ad).unwrap();
        assert!(encode(&Artifact::Model(adapted), &serde_json::Value::Null).is_err());
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ungd");
        let m = small_model();
        save_checkpoint(&path, &Artifact::Model(m.clone()), &serde_json::Value::Null).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().into_model().unwrap(), m);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
