//! Binary checkpoint: `KLTM`, u32 version, u64 header length, JSON header,
//! then little-endian f32 tensor data (weights, then Adam moments if present).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::AdamState;
use super::*;

const MAGIC: &[u8; 4] = b"KLTM";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    kind: String,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    codebook_digest: String,
    step: u64,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    /// Free-form training metadata (training config, data digest, ...).
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub codebook_digest: String,
    pub step: u64,
    pub adam: Option<AdamState>,
    pub meta: serde_json::Value,
}

fn entries(params: &Params<f32>, prefix: &str, offset: &mut u64) -> Vec<TensorEntry> {
    params
        .tensors
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: format!("{prefix}{}", t.name),
                shape: t.shape.clone(),
                offset: *offset,
                len: t.data.len() as u64,
            };
            *offset += 4 * t.data.len() as u64;
            e
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = entries(&self.model.params, "", &mut offset);
        let optimizer = self.adam.as_ref().map(|a| {
            let mut t = entries(&a.m, "adam.m.", &mut offset);
            t.extend(entries(&a.v, "adam.v.", &mut offset));
            OptimizerHeader {
                kind: "adam".into(),
                step: a.step,
                tensors: t,
            }
        });
        let header = Header {
            config: self.model.config.clone(),
            codebook_digest: self.codebook_digest.clone(),
            step: self.step,
            tensors,
            optimizer,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("serializable header");
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |p: &Params<f32>| {
            for t in &p.tensors {
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        push(&self.model.params);
        if let Some(a) = &self.adam {
            push(&a.m);
            push(&a.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |off: usize, reason: String| Error::malformed(path, off as u64, reason);
        if bytes.len() < PREAMBLE {
            return Err(bad(bytes.len(), "truncated preamble".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(0, "missing KLTM magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(4, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = PREAMBLE
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(8, format!("header length {hlen} exceeds file")))?;
        let text = std::str::from_utf8(&bytes[PREAMBLE..data_start])
            .map_err(|e| bad(PREAMBLE + e.valid_up_to(), "header is not utf-8".into()))?;
        let header: Header = crate::io::parse_json(path, text).map_err(|e| match e {
            Error::Malformed { offset, reason, .. } => bad(PREAMBLE + offset as usize, reason),
            other => other,
        })?;
        header
            .config
            .validate()
            .map_err(|e| bad(PREAMBLE, format!("bad config: {e}")))?;
        let data = &bytes[data_start..];
        let read = |entries: &[TensorEntry], prefix: &str| -> Result<Params<f32>> {
            let mut p = Params::<f32>::zeros_like(&header.config);
            if entries.len() != p.tensors.len() {
                return Err(bad(PREAMBLE, format!("{} tensors, expected {}", entries.len(), p.tensors.len())));
            }
            for (e, t) in entries.iter().zip(&mut p.tensors) {
                let want = format!("{prefix}{}", t.name);
                if e.name != want || e.shape != t.shape || e.len as usize != t.data.len() {
                    return Err(bad(PREAMBLE, format!("tensor {} does not match the config ({want})", e.name)));
                }
                let start = e.offset as usize;
                let end = start + 4 * t.data.len();
                if end > data.len() {
                    return Err(bad(data_start + data.len(), format!("tensor {} truncated", e.name)));
                }
                for (v, c) in t.data.iter_mut().zip(data[start..end].chunks_exact(4)) {
                    *v = f32::from_le_bytes(c.try_into().unwrap());
                }
            }
            Ok(p)
        };
        let params = read(&header.tensors, "")?;
        let adam = match &header.optimizer {
            None => None,
            Some(o) => {
                let n = o.tensors.len() / 2;
                Some(AdamState {
                    step: o.step,
                    m: read(&o.tensors[..n], "adam.m.")?,
                    v: read(&o.tensors[n..], "adam.v.")?,
                })
            }
        };
        let used: u64 = header
            .tensors
            .iter()
            .chain(header.optimizer.iter().flat_map(|o| o.tensors.iter()))
            .map(|e| 4 * e.len)
            .sum();
        if used as usize != data.len() {
            return Err(bad(
                data_start + (used as usize).min(data.len()),
                format!("{} data bytes, header describes {used}", data.len()),
            ));
        }
        if let Some((i, _)) = params
            .tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::Numerical(format!("checkpoint weight {i} is not finite")));
        }
        Ok(Checkpoint {
            model: Model {
                config: header.config,
                params,
            },
            codebook_digest: header.codebook_digest,
            step: header.step,
            adam,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::io::read_bytes(path)?, path)
    }

    /// Fails unless the checkpoint was trained against `digest_hex`.
    pub fn require_codebook(&self, digest_hex: &str) -> Result<()> {
        if self.codebook_digest != digest_hex {
            return Err(Error::Numerical(format!(
                "codebook digest {digest_hex} does not match checkpoint digest {}",
                self.codebook_digest
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let cfg = ModelConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            vocab: 5,
            grid: [2, 2],
            ..ModelConfig::default()
        };
        let model = Model::init(cfg).unwrap();
        let adam = AdamState::new(&model.config);
        Checkpoint {
            model,
            codebook_digest: "00112233aabbccdd".into(),
            step: 0,
            adam: Some(adam),
            meta: serde_json::json!({"note": 1.25}),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = tiny();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"KLTM");
        let back = Checkpoint::from_bytes(&b, Path::new("m.kltm")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn corruption_is_reported() {
        let b = tiny().to_bytes();
        let p = Path::new("m.kltm");
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 3], p),
            Err(Error::Malformed { .. })
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(Error::Malformed { offset: 0, .. })
        ));
        let mut bad = b.clone();
        bad[PREAMBLE] = b'[';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Malformed { .. })));
        assert!(tiny().require_codebook("ffff").is_err());
    }
}
