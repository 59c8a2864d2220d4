//! Versioned binary checkpoints.
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `PRPTCKPT` |
//! | 4     | format version (u32) |
//! | 8     | header length H (u64) |
//! | H     | JSON header: metadata plus the tensor directory |
//! | …     | tensor payloads, little endian, in directory order |
//! | 32    | SHA-256 of everything above |
//!
//! The digest is verified before anything is parsed, so a damaged file is
//! rejected as a whole.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objectives::LossBundle;

use super::TrainConfig;

const MAGIC: &[u8; 8] = b"PRPTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    /// `f32` or `f64`.
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    config_hash: String,
    epoch: usize,
    step: usize,
    adam_t: u64,
    metrics: Option<LossBundle>,
    vocab: Vec<String>,
    n_identities: usize,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub adam_t: u64,
    pub metrics: Option<LossBundle>,
    pub vocab: Vec<String>,
    pub n_identities: usize,
    pub tensors: Vec<(String, Tensor)>,
}

fn dtype_name(t: &Tensor) -> Result<&'static str> {
    match t.dtype() {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let dtype = dtype_name(t)?;
            let flat = t.flatten_all()?;
            match dtype {
                "f32" => flat.to_vec1::<f32>()?.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                _ => flat.to_vec1::<f64>()?.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            }
            entries.push(TensorEntry { name: name.clone(), dims: t.dims().to_vec(), dtype: dtype.into() });
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam_t,
            metrics: self.metrics,
            vocab: self.vocab.clone(),
            n_identities: self.n_identities,
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(52 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 52 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch; file is corrupted or truncated"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("header overruns file"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut offset = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let count: usize = entry.dims.iter().product();
            let width = match entry.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::Checkpoint(format!("tensor {} has unknown dtype {other}", entry.name))),
            };
            let end = offset + count * width;
            if end > body.len() {
                return Err(bad("tensor payload overruns file"));
            }
            let chunk = &body[offset..end];
            let t = if width == 4 {
                let v: Vec<f32> = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, entry.dims.as_slice(), &Device::Cpu)?
            } else {
                let v: Vec<f64> = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, entry.dims.as_slice(), &Device::Cpu)?
            };
            tensors.push((entry.name.clone(), t));
            offset = end;
        }
        if offset != body.len() {
            return Err(bad("trailing bytes after tensor payload"));
        }
        Ok(Self {
            config: header.config,
            config_hash: header.config_hash,
            epoch: header.epoch,
            step: header.step,
            adam_t: header.adam_t,
            metrics: header.metrics,
            vocab: header.vocab,
            n_identities: header.n_identities,
            tensors,
        })
    }

    /// Writes through a temporary sibling and renames, so readers never see
    /// a half-written file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Refuses to continue a run under a different configuration.
    pub fn check_config(&self, config: &TrainConfig) -> Result<()> {
        let expected = config.hash();
        if self.config_hash != expected || self.config.hash() != expected {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs requested {expected}",
                &self.config_hash[..12.min(self.config_hash.len())]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig::desk();
        Checkpoint {
            config_hash: cfg.hash(),
            config: cfg,
            epoch: 3,
            step: 12,
            adam_t: 12,
            metrics: Some(LossBundle { sdm: 1.0, id: 2.0, p2i: 0.5, mlm: 0.25, total: 3.35 }),
            vocab: vec!["<pad>".into(), "a".into()],
            n_identities: 2,
            tensors: vec![
                ("param/w".into(), Tensor::new(&[1.5f32, -0.25, f32::MIN_POSITIVE], &Device::Cpu).unwrap()),
                ("bank/pt_v".into(), Tensor::new(&[[0.1f64, 0.2], [0.3, 1e-300]], &Device::Cpu).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.tensor("param/w").unwrap().to_vec1::<f32>().unwrap(), vec![1.5, -0.25, f32::MIN_POSITIVE]);
        assert_eq!(back.tensor("bank/pt_v").unwrap().to_vec2::<f64>().unwrap()[1][1], 1e-300);
        assert_eq!((back.epoch, back.step, back.metrics), (3, 12, c.metrics));
    }

    #[test]
    fn corruption_and_truncation_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn config_mismatch_is_refused() {
        let c = sample();
        c.check_config(&TrainConfig::desk()).unwrap();
        assert!(c.check_config(&TrainConfig::paper()).is_err());
    }
}
