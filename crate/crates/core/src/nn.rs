//! Small transformer toolkit on top of candle tensors.
//!
//! All layers allocate their weights through a [`ParamStore`], which keeps the
//! parameter list in creation order so the optimizer and checkpoint code can
//! walk it deterministically.

use candle_core::{DType, Device, Tensor, Var, D};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const LN_EPS: f64 = 1e-5;

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Visual and textual encoders.
    Backbone,
    /// Everything else: classifier, prompts, SAE, CAD, aggregation, MLM head.
    Modules,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
}

/// Ordered registry of trainable parameters.
#[derive(Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    dtype: DType,
    device: Device,
    rng: Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: Vec::new(),
            dtype,
            device: Device::Cpu,
            rng: rng::stream(seed, &[rng::tags::INIT]),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.var)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    fn register(&mut self, name: String, group: ParamGroup, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push(Param { name, group, var: var.clone() });
        Ok(var)
    }

    pub fn normal(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.register(name.into(), group, values, shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.register(name.into(), group, vec![value; n], shape)
    }
}

/// Softmax along the last dimension. The max shift is detached; softmax is
/// shift invariant so the gradient is unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Pairwise cosine similarity between rows of `a` (n×d) and `b` (m×d).
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(l2_normalize(a)?.matmul(&l2_normalize(b)?.t()?)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = store.normal(format!("{name}.weight"), group, &[output, input], 0.02)?;
        let bias = if bias {
            Some(store.constant(format!("{name}.bias"), group, &[output], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        let rows = x.elem_count() / input.max(1);
        let out = self.weight.dims()[0];
        let y = x.reshape((rows, input))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        };
        let mut shape = dims;
        *shape.last_mut().unwrap() = out;
        Ok(y.reshape(shape)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(format!("{name}.weight"), group, &[dim], 1.0)?,
            bias: store.constant(format!("{name}.bias"), group, &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Multi-head scaled dot-product attention with separate q/k/v projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), group, dim, dim, true)?,
            k: Linear::new(store, &format!("{name}.k"), group, dim, dim, true)?,
            v: Linear::new(store, &format!("{name}.v"), group, dim, dim, true)?,
            out: Linear::new(store, &format!("{name}.out"), group, dim, dim, true)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Attends `query` (b×tq×d) over `memory` (b×tk×d). `mask` is an additive
    /// tq×tk bias. Returns the projected output and the attention weights
    /// (b×heads×tq×tk).
    pub fn forward_with_weights(&self, query: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, tq, d) = query.dims3()?;
        let (bm, _tk, dm) = memory.dims3()?;
        if bm != b || dm != d {
            return Err(Error::Shape(format!("attention query {:?} vs memory {:?}", query.dims(), memory.dims())));
        }
        let head_dim = d / self.heads;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(memory)?)?;
        let v = self.split_heads(&self.v.forward(memory)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (head_dim as f64).sqrt())?;
        let scores = match mask {
            Some(m) => scores.broadcast_add(m)?,
            None => scores,
        };
        let weights = softmax_last(&scores)?;
        let ctx = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, tq, d))?;
        Ok((self.out.forward(&ctx)?, weights))
    }

    pub fn forward(&self, query: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, memory, mask)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), group, dim, hidden, true)?,
            down: Linear::new(store, &format!("{name}.down"), group, hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Pre-norm residual block. With `cross` set, attention keys and values come
/// from a separately normalized memory sequence.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub ln_memory: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize, heads: usize, cross: bool) -> Result<Self> {
        let ln_memory = if cross {
            Some(LayerNorm::new(store, &format!("{name}.ln_memory"), group, dim)?)
        } else {
            None
        };
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), group, dim)?,
            ln_memory,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), group, dim, heads)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), group, dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), group, dim, 4 * dim)?,
        })
    }

    pub fn forward_with_weights(&self, x: &Tensor, memory: Option<&Tensor>, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let q = self.ln_attn.forward(x)?;
        let mem = match (memory, &self.ln_memory) {
            (Some(m), Some(ln)) => ln.forward(m)?,
            (None, None) => q.clone(),
            _ => return Err(Error::Shape("memory must be given exactly for cross-attention blocks".into())),
        };
        let (attn, weights) = self.attn.forward_with_weights(&q, &mem, mask)?;
        let x = (x + attn)?;
        let x = (&x + self.ffn.forward(&self.ln_ffn.forward(&x)?)?)?;
        Ok((x, weights))
    }

    pub fn forward(&self, x: &Tensor, memory: Option<&Tensor>, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(x, memory, mask)?.0)
    }

    /// Zeroes both residual-branch output projections so the block is the
    /// identity map.
    pub fn zero_residual_outputs(&self) -> Result<()> {
        for lin in [&self.attn.out, &self.ffn.down] {
            lin.weight.set(&lin.weight.zeros_like()?)?;
            if let Some(b) = &lin.bias {
                b.set(&b.zeros_like()?)?;
            }
        }
        Ok(())
    }
}

/// A stack of [`TransformerBlock`]s sharing one kind (self or cross).
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerStack {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, depth: usize, dim: usize, heads: usize, cross: bool) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.{i}"), group, dim, heads, cross))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor, memory: Option<&Tensor>, mask: Option<&Tensor>) -> Result<Tensor> {
        self.blocks.iter().try_fold(x.clone(), |h, b| b.forward(&h, memory, mask))
    }

    pub fn zero_residual_outputs(&self) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.zero_residual_outputs())
    }
}

/// Additive causal mask: position i may attend to j <= i.
pub fn causal_mask(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j <= i { 0.0 } else { -1e9 }))
        .collect();
    Ok(Tensor::from_vec(values, (len, len), device)?.to_dtype(dtype)?)
}
