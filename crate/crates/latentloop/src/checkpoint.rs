//! Binary checkpoint: backbone, projector and optimizer state.
//!
//! Layout: 8-byte magic `HILLCKPT`, `u32` version, `u32` header length (both
//! little-endian), a UTF-8 JSON header, then the raw little-endian `f32`
//! payload. Every tensor in the header names its shape, byte offset and
//! byte length within the payload; offsets are contiguous and the payload
//! holds nothing else.

use std::fs;
use std::path::Path;

use latentloop_core::diffcore::{OptimizerConfig, OptimizerState, ParamStore};
use latentloop_core::models::{Backbone, BackboneSpec};
use latentloop_core::projection::Projector;
use latentloop_core::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"HILLCKPT";
pub const VERSION: u32 = 1;
const DTYPE: &str = "f32le";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor `{name}`: {detail}")]
    Shape { name: String, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProjectorEntry {
    classes: usize,
    frozen: bool,
    sigma_ref: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    config: OptimizerConfig,
    step_count: u64,
    first_moments: usize,
    second_moments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: BackboneSpec,
    model_seed: u64,
    projector: ProjectorEntry,
    optimizer: OptimizerEntry,
    tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint restores.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone<f32>,
    pub projector: Projector<f32>,
    pub optimizer: OptimizerState<f32>,
}

struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, t: &Tensor<f32>) {
        let bytes = t.to_le_bytes();
        self.entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: self.payload.len(),
            len: bytes.len(),
        });
        self.payload.extend_from_slice(&bytes);
    }
}

pub fn to_bytes(backbone: &Backbone<f32>, projector: &Projector<f32>, optimizer: &OptimizerState<f32>) -> Vec<u8> {
    let mut w = Writer { entries: Vec::new(), payload: Vec::new() };
    for (name, t) in backbone.params.iter() {
        w.push(format!("backbone/{name}"), t);
    }
    for (name, t) in projector.params().iter() {
        w.push(format!("projector/{name}"), t);
    }
    if let Some(aux) = projector.aux_head() {
        for (name, t) in aux.iter() {
            w.push(format!("projector_aux/{name}"), t);
        }
    }
    for (i, t) in optimizer.first_moment.iter().enumerate() {
        w.push(format!("optimizer/m/{i}"), t);
    }
    for (i, t) in optimizer.second_moment.iter().enumerate() {
        w.push(format!("optimizer/v/{i}"), t);
    }
    let header = Header {
        dtype: DTYPE.to_string(),
        model: backbone.spec.clone(),
        model_seed: backbone.seed,
        projector: ProjectorEntry {
            classes: projector.classes(),
            frozen: projector.is_frozen(),
            sigma_ref: projector.sigma_ref(),
        },
        optimizer: OptimizerEntry {
            config: optimizer.config,
            step_count: optimizer.step_count,
            first_moments: optimizer.first_moment.len(),
            second_moments: optimizer.second_moment.len(),
        },
        tensors: w.entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + w.payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    out
}

fn take(bytes: &[u8], at: usize, n: usize) -> Result<&[u8], CheckpointError> {
    bytes.get(at..at + n).ok_or(CheckpointError::Truncated { needed: at + n, have: bytes.len() })
}

fn shape_err(name: &str, detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Shape { name: name.to_string(), detail: detail.into() }
}

/// Parses a checkpoint. Either everything is restored or an error is
/// returned; nothing partial escapes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if take(bytes, 0, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(bytes, 8, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = u32::from_le_bytes(take(bytes, 12, 4)?.try_into().expect("4 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(bytes, 16, header_len)?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.dtype != DTYPE {
        return Err(CheckpointError::Header(format!("unsupported dtype `{}`", header.dtype)));
    }
    let payload = &bytes[16 + header_len..];
    let mut expected_offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset != expected_offset {
            return Err(shape_err(&e.name, format!("offset {} where {expected_offset} was expected", e.offset)));
        }
        let numel: usize = e.shape.iter().product();
        if numel * 4 != e.len {
            return Err(shape_err(
                &e.name,
                format!("shape {:?} needs {} bytes, header says {}", e.shape, numel * 4, e.len),
            ));
        }
        let raw = payload
            .get(e.offset..e.offset + e.len)
            .ok_or(CheckpointError::Truncated { needed: 16 + header_len + e.offset + e.len, have: bytes.len() })?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| shape_err(&e.name, err.to_string()))?;
        tensors.push((e.name.as_str(), t));
        expected_offset += e.len;
    }
    if expected_offset != payload.len() {
        return Err(CheckpointError::Header(format!(
            "payload holds {} bytes, header accounts for {expected_offset}",
            payload.len()
        )));
    }

    let template =
        Backbone::<f32>::build(header.model.clone(), 0).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut backbone_params = ParamStore::new();
    let mut projector_params = ParamStore::new();
    let mut aux = ParamStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, t) in tensors {
        let insert = |store: &mut ParamStore<f32>, key: &str, t: Tensor<f32>| {
            store.insert(key, t).map(|_| ()).map_err(|e| shape_err(name, e.to_string()))
        };
        if let Some(key) = name.strip_prefix("backbone/") {
            let want = template.params.get(key).ok_or_else(|| shape_err(name, "not a parameter of this model"))?;
            if want.shape() != t.shape() {
                return Err(shape_err(name, format!("model expects {:?}, file has {:?}", want.shape(), t.shape())));
            }
            insert(&mut backbone_params, key, t)?;
        } else if let Some(key) = name.strip_prefix("projector/") {
            insert(&mut projector_params, key, t)?;
        } else if let Some(key) = name.strip_prefix("projector_aux/") {
            insert(&mut aux, key, t)?;
        } else if name.starts_with("optimizer/m/") {
            first.push(t);
        } else if name.starts_with("optimizer/v/") {
            second.push(t);
        } else {
            return Err(shape_err(name, "unknown tensor group"));
        }
    }
    if backbone_params.len() != template.params.len() {
        return Err(CheckpointError::Header(format!(
            "{} backbone tensors, model has {}",
            backbone_params.len(),
            template.params.len()
        )));
    }
    if first.len() != header.optimizer.first_moments || second.len() != header.optimizer.second_moments {
        return Err(CheckpointError::Header("optimizer moment count disagrees with header".into()));
    }
    for m in first.iter().chain(&second) {
        if !backbone_params.iter().any(|(_, p)| p.shape() == m.shape()) {
            return Err(shape_err("optimizer", format!("moment shape {:?} matches no parameter", m.shape())));
        }
    }
    let projector = Projector::from_parts(
        projector_params,
        if aux.is_empty() { None } else { Some(aux) },
        header.projector.classes,
        header.projector.frozen,
        header.projector.sigma_ref,
    )
    .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let backbone = Backbone { spec: header.model, params: backbone_params, seed: header.model_seed };
    let optimizer = OptimizerState {
        config: header.optimizer.config,
        step_count: header.optimizer.step_count,
        first_moment: first,
        second_moment: second,
    };
    Ok(Checkpoint { backbone, projector, optimizer })
}

pub fn save_checkpoint(
    path: &Path,
    backbone: &Backbone<f32>,
    projector: &Projector<f32>,
    optimizer: &OptimizerState<f32>,
) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(backbone, projector, optimizer))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use latentloop_core::diffcore::Graph;

    fn parts(frozen: bool) -> (Backbone<f32>, Projector<f32>, OptimizerState<f32>) {
        let backbone = Backbone::build(BackboneSpec::default_mlp(6, 3), 4).unwrap();
        let mut projector = Projector::init(backbone.latent_dim(), 32, 3, 5).unwrap();
        if frozen {
            let z = Tensor::new(vec![4, 32], (0..128).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
            let reference = projector.project(&z).unwrap();
            projector.freeze(&reference).unwrap();
        }
        let mut optimizer = OptimizerState::new(OptimizerConfig::default());
        let mut params = backbone.params.clone();
        let x = Tensor::new(vec![2, 6], (0..12).map(|i| i as f32 / 7.0).collect()).unwrap();
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let input = g.input(x);
        let out = backbone.forward_graph(&mut g, &vars, input, false, 0).unwrap();
        let loss = g.softmax_cross_entropy(out.logits, &[0, 2]).unwrap();
        let grads = g.backward(loss).unwrap().collect(&vars);
        optimizer.step(&mut params, &grads).unwrap();
        (Backbone { params, ..backbone }, projector, optimizer)
    }

    #[test]
    fn round_trip_is_identity() {
        for frozen in [false, true] {
            let (b, p, o) = parts(frozen);
            let bytes = to_bytes(&b, &p, &o);
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back.backbone.params.to_le_bytes(), b.params.to_le_bytes());
            assert_eq!(back.projector, p);
            assert_eq!(back.projector.is_frozen(), frozen);
            assert_eq!(back.optimizer, o);
            assert_eq!(to_bytes(&back.backbone, &back.projector, &back.optimizer), bytes);
        }
    }

    #[test]
    fn header_prefix() {
        let (b, p, o) = parts(true);
        let bytes = to_bytes(&b, &p, &o);
        assert_eq!(&bytes[..8], b"HILLCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(header["dtype"], "f32le");
        assert_eq!(header["projector"]["frozen"], true);
    }

    #[test]
    fn corruption_is_rejected() {
        let (b, p, o) = parts(true);
        let good = to_bytes(&b, &p, &o);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = good.clone();
        bad[8] = 2;
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::Version(2))));
        let mut bad = good.clone();
        bad[17] = b'#';
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::Header(_))));
        assert!(matches!(from_bytes(&good[..good.len() - 3]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(from_bytes(&good[..10]), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn header_shape_disagreement() {
        let (b, p, o) = parts(false);
        let bytes = to_bytes(&b, &p, &o);
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        header["tensors"][0]["shape"] = serde_json::json!([3, 6]);
        header["tensors"][0]["len"] = serde_json::json!(3 * 6 * 4);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[16 + len..]);
        assert!(from_bytes(&out).is_err());
    }
}
