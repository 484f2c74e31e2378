//! Binary checkpoints: magic tag, JSON manifest, little-endian `f32` payload.
//!
//! Layout: `MIMCKPT1`, the manifest length as a `u64` LE, the manifest, then
//! every tensor's data back to back in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{MimError, Result};
use crate::network::ParameterSet;
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MIMCKPT1";

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParameterSet,
    pub opt: OptimizerState,
    /// Number of completed steps.
    pub step: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    FirstMoment,
    SecondMoment,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngEntry {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: TrainConfig,
    step: usize,
    optimizer_t: u64,
    rng: RngEntry,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let groups: [(Role, &BTreeMap<String, Tensor>); 3] = [
            (Role::Param, s.params.tensors()),
            (Role::FirstMoment, &s.opt.m),
            (Role::SecondMoment, &s.opt.v),
        ];
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (role, map) in groups {
            for (name, t) in map {
                let offset = payload.len();
                for x in t.data() {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
                tensors.push(TensorEntry {
                    name: name.clone(),
                    role,
                    shape: t.shape().to_vec(),
                    offset,
                    bytes: payload.len() - offset,
                });
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            step: s.step,
            optimizer_t: s.opt.t,
            rng: RngEntry {
                seed: hex::encode(s.rng.get_seed()),
                stream: s.rng.get_stream(),
                word_pos: s.rng.get_word_pos().to_string(),
            },
            tensors,
            payload_bytes: payload.len(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| MimError::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic tag".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if len > body.len() {
            return Err(bad(format!("manifest length {len} exceeds file")));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest: {e}")))?;
        let payload = &body[len..];
        if payload.len() != manifest.payload_bytes {
            return Err(bad(format!(
                "payload is {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        let mut groups: [BTreeMap<String, Tensor>; 3] = Default::default();
        let mut cursor = 0;
        for e in &manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != cursor || e.bytes != 4 * numel || e.offset + e.bytes > payload.len() {
                return Err(bad(format!("tensor {} does not match the payload layout", e.name)));
            }
            let data = payload[e.offset..e.offset + e.bytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            cursor += e.bytes;
            let slot = match e.role {
                Role::Param => 0,
                Role::FirstMoment => 1,
                Role::SecondMoment => 2,
            };
            groups[slot].insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        if cursor != payload.len() {
            return Err(bad("trailing payload bytes".into()));
        }
        let [params, m, v] = groups;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(bad("moment tensors do not match parameters".into()));
        }
        for (name, p) in &params {
            if m.get(name).map(Tensor::shape) != Some(p.shape()) || v.get(name).map(Tensor::shape) != Some(p.shape()) {
                return Err(bad(format!("moments of {name} do not match its shape")));
            }
        }
        let seed: [u8; 32] = hex::decode(&manifest.rng.seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("rng seed".into()))?;
        let word_pos: u128 = manifest
            .rng
            .word_pos
            .parse()
            .map_err(|_| bad("rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(manifest.rng.stream);
        rng.set_word_pos(word_pos);
        manifest
            .config
            .validate()
            .map_err(|e| bad(format!("config: {e}")))?;
        Ok(Checkpoint {
            config: manifest.config,
            state: TrainState {
                params: ParameterSet::from_map(params),
                opt: OptimizerState { t: manifest.optimizer_t, m, v },
                step: manifest.step,
                rng,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| MimError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| MimError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
