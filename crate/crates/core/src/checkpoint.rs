//! Binary checkpoints.
//!
//! Layout: the magic `RFCK`, a `u32` format version, a `u64` manifest length,
//! the JSON manifest, then every tensor as little-endian `f32` in manifest
//! order. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;

pub const MAGIC: &[u8; 4] = b"RFCK";
pub const FORMAT_VERSION: u32 = 1;

/// Prefixes of optimizer moment tensors.
pub const ADAM_M: &str = "adam.m.";
pub const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    step: u64,
    epoch: u64,
    config: serde_json::Value,
    metrics: Option<serde_json::Value>,
    tensors: Vec<Entry>,
}

/// Weights, buffers, optimizer moments and training position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: u64,
    /// The resolved run configuration.
    pub config: serde_json::Value,
    /// Metrics measured when the checkpoint was written, if any.
    pub metrics: Option<serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

/// Every parameter and buffer of `model` in visit order.
pub fn export_weights(model: &impl Module<f32>) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    model.visit("", &mut |name, p| {
        out.push(NamedTensor {
            name: name.to_string(),
            shape: p.shape(),
            data: p.to_vec(),
        })
    });
    out
}

/// Loads weights into `model`. Names, order and shapes must match exactly;
/// the first disagreement is reported and nothing is modified.
pub fn import_weights(model: &impl Module<f32>, tensors: &[NamedTensor]) -> Result<()> {
    let mut expected = Vec::new();
    model.visit("", &mut |name, p| expected.push((name.to_string(), p.shape())));
    for (i, (name, shape)) in expected.iter().enumerate() {
        let Some(t) = tensors.get(i) else {
            return Err(Error::Checkpoint(format!("checkpoint has no tensor for `{name}`")));
        };
        if &t.name != name {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` in checkpoint does not match model tensor `{name}`",
                t.name
            )));
        }
        if &t.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?} in checkpoint but {shape:?} in model",
                t.shape
            )));
        }
    }
    if let Some(extra) = tensors.get(expected.len()) {
        return Err(Error::Checkpoint(format!("unexpected tensor `{}` in checkpoint", extra.name)));
    }
    let mut i = 0;
    let mut result = Ok(());
    model.visit("", &mut |_, p| {
        if result.is_ok() {
            result = p.set_data(tensors[i].data.clone());
        }
        i += 1;
    });
    result
}

impl Checkpoint {
    /// Model tensors only (optimizer moments excluded).
    pub fn weights(&self) -> Vec<NamedTensor> {
        self.tensors
            .iter()
            .filter(|t| !t.name.starts_with(ADAM_M) && !t.name.starts_with(ADAM_V))
            .cloned()
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            step: self.step,
            epoch: self.epoch,
            config: self.config.clone(),
            metrics: self.metrics.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    if t.shape.iter().product::<usize>() != t.data.len() {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{}` has shape {:?} but {} values",
                            t.name,
                            t.shape,
                            t.data.len()
                        )));
                    }
                    Ok(Entry {
                        name: t.name.clone(),
                        shape: t.shape.clone(),
                        dtype: "f32".into(),
                    })
                })
                .collect::<Result<_>>()?,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(bad("truncated manifest".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("bad manifest: {e}")))?;
        let mut payload = &body[len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(bad(format!("payload truncated in tensor `{}`", e.name)));
            }
            let (head, rest) = payload.split_at(4 * n);
            payload = rest;
            let data = head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes after payload", payload.len())));
        }
        Ok(Checkpoint {
            step: manifest.step,
            epoch: manifest.epoch,
            config: manifest.config,
            metrics: manifest.metrics,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            step: 3,
            epoch: 1,
            config: serde_json::json!({"lr": 0.1 + 0.2, "name": "x"}),
            metrics: Some(serde_json::json!({"maxf": 0.987654321})),
            tensors: vec![
                NamedTensor {
                    name: "a".into(),
                    shape: vec![2, 2],
                    data: vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25],
                },
                NamedTensor {
                    name: "adam.m.a".into(),
                    shape: vec![],
                    data: vec![0.125],
                },
            ],
        }
    }

    #[test]
    fn byte_round_trip() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.weights().len(), 1);
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version 2"));
    }
}
