//! Frozen initial prototypes.
//!
//! Binary layout (little endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `PRPTBANK` |
//! | 4     | version (u32, currently 1) |
//! | 8     | N (u64) |
//! | 8     | d (u64) |
//! | 8     | K, context length (u64) |
//! | 1     | dtype: 0 = f32, 1 = f64 |
//! | N·d   | visual prototypes, row major |
//! | N·d   | textual prototypes, row major |

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingBatch;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PRPTBANK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeReduce {
    /// Sum of instance features.
    Sum,
    /// Mean of instance features.
    Mean,
}

/// Per-identity visual and textual initial prototypes. Stored as plain
/// tensors, never as variables, so no loss can reach them.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub pt_v: Tensor,
    pub pt_t: Tensor,
    pub context_len: usize,
}

fn group_reduce(batch: &EmbeddingBatch, n: usize, reduce: PrototypeReduce, modality: &'static str) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = batch.features.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    if rows.len() != batch.labels.len() {
        return Err(Error::Shape(format!("{} feature rows for {} labels", rows.len(), batch.labels.len())));
    }
    let d = batch.features.dims()[1];
    let mut acc = vec![0.0; n * d];
    let mut counts = vec![0usize; n];
    for (row, &label) in rows.iter().zip(&batch.labels) {
        if label >= n {
            return Err(Error::LabelOutOfRange { label, classes: n });
        }
        counts[label] += 1;
        for (a, v) in acc[label * d..(label + 1) * d].iter_mut().zip(row) {
            *a += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyIdentity(empty, modality));
    }
    if reduce == PrototypeReduce::Mean {
        for (i, &c) in counts.iter().enumerate() {
            acc[i * d..(i + 1) * d].iter_mut().for_each(|a| *a /= c as f64);
        }
    }
    Ok(acc)
}

impl PrototypeBank {
    /// Groups instance features by identity label and reduces each group.
    pub fn from_features(images: &EmbeddingBatch, texts: &EmbeddingBatch, n: usize, reduce: PrototypeReduce, context_len: usize) -> Result<Self> {
        let d = images.features.dims()[1];
        if texts.features.dims()[1] != d {
            return Err(Error::Shape("visual and textual features differ in width".into()));
        }
        let dtype = images.features.dtype();
        let v = group_reduce(images, n, reduce, "image")?;
        let t = group_reduce(texts, n, reduce, "text")?;
        Ok(Self {
            pt_v: Tensor::from_vec(v, (n, d), &Device::Cpu)?.to_dtype(dtype)?,
            pt_t: Tensor::from_vec(t, (n, d), &Device::Cpu)?.to_dtype(dtype)?,
            context_len,
        })
    }

    pub fn len(&self) -> usize {
        self.pt_v.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.pt_v.dims()[1]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (n, d) = (self.len(), self.dim());
        let mut out = Vec::with_capacity(37 + 2 * n * d * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [n, d, self.context_len] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        match self.pt_v.dtype() {
            DType::F64 => {
                out.push(1);
                for t in [&self.pt_v, &self.pt_t] {
                    for v in t.flatten_all()?.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            _ => {
                out.push(0);
                for t in [&self.pt_v, &self.pt_t] {
                    for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("prototype bank: {m}"));
        if bytes.len() < 37 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
        if u32_at(8) != VERSION {
            return Err(bad("unsupported version"));
        }
        let (n, d, k) = (u64_at(12), u64_at(20), u64_at(28));
        let width = match bytes[36] {
            0 => 4,
            1 => 8,
            _ => return Err(bad("unknown dtype")),
        };
        let payload = &bytes[37..];
        if payload.len() != 2 * n * d * width {
            return Err(bad("payload length does not match header"));
        }
        let make = |chunk: &[u8]| -> Result<Tensor> {
            Ok(if width == 8 {
                let v: Vec<f64> = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, (n, d), &Device::Cpu)?
            } else {
                let v: Vec<f32> = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, (n, d), &Device::Cpu)?
            })
        };
        let half = n * d * width;
        Ok(Self { pt_v: make(&payload[..half])?, pt_t: make(&payload[half..])?, context_len: k })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
