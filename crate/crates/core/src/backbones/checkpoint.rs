//! Single-file checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "TSFMCKPT"
//! version      u32
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON
//! payload      f64 values of every tensor, concatenated in header order
//! ```
//!
//! The header carries the encoder config, layout, class count, provenance,
//! training state, optimizer hyper-parameters, an optional free-form `extra`
//! value, the tensor index (`name`, `shape`, `offset` in f64 units) and the
//! SHA-256 of the payload. Optimizer moments are stored as tensors named
//! `adam.m/<param>` and `adam.v/<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderBundle, EncoderConfig, Layout, Provenance};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSFMCKPT";
const FORMAT_VERSION: u32 = 1;
const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

/// Progress of a training run, for resuming.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub epochs_done: usize,
    pub steps_done: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub bundle: EncoderBundle,
    pub optimizer: Option<Adam>,
    pub state: TrainState,
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: EncoderConfig,
    layout: Layout,
    num_classes: Option<usize>,
    provenance: Provenance,
    state: TrainState,
    optimizer: Option<OptimizerHeader>,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
    payload_sha256: String,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(bundle: EncoderBundle) -> Self {
        Self {
            bundle,
            optimizer: None,
            state: TrainState::default(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut stores: Vec<(String, &ParamStore)> = vec![(String::new(), &self.bundle.params)];
        if let Some(opt) = &self.optimizer {
            stores.push((FIRST_MOMENT.to_string(), &opt.first));
            stores.push((SECOND_MOMENT.to_string(), &opt.second));
        }
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        for (prefix, store) in stores {
            for (name, t) in store.iter() {
                tensors.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.numel();
                payload.extend_from_slice(&t.to_le_bytes());
            }
        }
        let header = Header {
            config: self.bundle.config.clone(),
            layout: self.bundle.layout,
            num_classes: self.bundle.num_classes,
            provenance: self.bundle.provenance.clone(),
            state: self.state.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            extra: self.extra.clone(),
            tensors,
            payload_len: offset,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let payload = &body[header_len..];
        if payload.len() != header.payload_len * 8 {
            return Err(corrupt(format!(
                "payload holds {} bytes, header promises {}",
                payload.len(),
                header.payload_len * 8
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload hash mismatch"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut params = ParamStore::new();
        let mut first = ParamStore::new();
        let mut second = ParamStore::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(n).filter(|&end| end <= values.len());
            let Some(end) = end else {
                return Err(corrupt(format!("tensor `{}` lies outside the payload", e.name)));
            };
            let t = Tensor::new(&e.shape, values[e.offset..end].to_vec());
            if let Some(name) = e.name.strip_prefix(FIRST_MOMENT) {
                first.insert(name, t);
            } else if let Some(name) = e.name.strip_prefix(SECOND_MOMENT) {
                second.insert(name, t);
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        let bundle = EncoderBundle {
            config: header.config,
            layout: header.layout,
            params,
            num_classes: header.num_classes,
            provenance: header.provenance,
        };
        bundle.config.validate()?;
        bundle.check_shapes().map_err(|e| corrupt(e.to_string()))?;
        let optimizer = header.optimizer.map(|o| Adam {
            config: o.config,
            step: o.step,
            first,
            second,
        });
        Ok(Self {
            bundle,
            optimizer,
            state: header.state,
            extra: header.extra,
        })
    }

    /// SHA-256 of the serialized archive.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Writes the archive and returns its content hash.
    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Reads an archive and returns it with its content hash.
    pub fn read(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let ckpt = Self::from_bytes(&bytes)?;
        Ok((ckpt, hex::encode(Sha256::digest(&bytes))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{build_encoder, Arch};

    #[test]
    fn round_trip_preserves_everything() {
        let cfg = EncoderConfig {
            width: 8,
            heads: 2,
            ..EncoderConfig::new(Arch::Transformer)
        };
        let mut bundle = build_encoder(&cfg, 5).unwrap();
        bundle.add_classifier(3, 1).unwrap();
        bundle.provenance.method = "timeclr".into();
        let mut ckpt = Checkpoint::new(bundle);
        let mut adam = Adam::new(AdamConfig::default());
        let grads = ckpt.bundle.params.iter().map(|(n, t)| (n.clone(), t.map(|v| v * 0.1))).collect();
        adam.update(&mut ckpt.bundle.params, &grads);
        ckpt.optimizer = Some(adam);
        ckpt.state = TrainState {
            epochs_done: 2,
            steps_done: 7,
        };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.state, ckpt.state);
        assert_eq!(back.bundle.num_classes, Some(3));
        assert_eq!(back.bundle.params.content_hash(), ckpt.bundle.params.content_hash());
        assert_eq!(back.optimizer.unwrap().step, 1);
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = EncoderConfig {
            width: 4,
            ..EncoderConfig::new(Arch::Gru)
        };
        let bytes = Checkpoint::new(build_encoder(&cfg, 0).unwrap()).to_bytes();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense-bytes-here-xx").is_err());
    }
}
