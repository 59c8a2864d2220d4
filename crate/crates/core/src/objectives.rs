//! Training objectives: similarity distribution matching, identity
//! cross-entropy, prototype-to-instance contrast, masked language modeling,
//! and their weighted total.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::MaskedTokens;
use crate::error::{Error, Result};
use crate::nn::{cosine_matrix, log_softmax_last, softmax_last, LayerNorm, Linear, ParamGroup, ParamStore, TransformerBlock};

/// How the prototype-to-instance term turns the softmax ratio into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum P2iForm {
    /// Negative log-softmax averaged over positives.
    Log,
    /// Negative softmax ratio without the logarithm.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub p2i_form: P2iForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.02, epsilon: 1e-8, lambda1: 0.2, lambda2: 1.0, p2i_form: P2iForm::Log }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scalar loss values for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub sdm: f64,
    pub id: f64,
    pub p2i: f64,
    pub mlm: f64,
    pub total: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must be positive, got {tau}")))
    }
}

/// Row-wise softmax of cosine similarities scaled by 1/τ.
pub fn similarity_distribution(a: &Tensor, b: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    softmax_last(&(cosine_matrix(a, b)? / tau)?)
}

/// True matching distribution: row i is uniform over the columns sharing
/// row i's label.
pub fn match_distribution(labels: &[usize], dtype: DType) -> Result<Tensor> {
    let b = labels.len();
    let mut q = vec![0.0f64; b * b];
    for (i, li) in labels.iter().enumerate() {
        let pos = labels.iter().filter(|&l| l == li).count() as f64;
        for (j, lj) in labels.iter().enumerate() {
            if li == lj {
                q[i * b + j] = 1.0 / pos;
            }
        }
    }
    Ok(Tensor::from_vec(q, (b, b), &Device::Cpu)?.to_dtype(dtype)?)
}

fn sdm_direction(a: &Tensor, b: &Tensor, log_q: &Tensor, tau: f64) -> Result<Tensor> {
    let logits = (cosine_matrix(a, b)? / tau)?;
    let log_p = log_softmax_last(&logits)?;
    let p = log_p.exp()?;
    let kl = (p * (log_p - log_q)?)?.sum(1)?;
    Ok(kl.mean(0)?)
}

/// KL(p‖q) in both retrieval directions, each averaged over rows.
pub fn sdm_loss(v: &Tensor, t: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<Tensor> {
    check_tau(cfg.tau)?;
    let (b, _) = v.dims2()?;
    if t.dims2()?.0 != b || labels.len() != b {
        return Err(Error::Shape(format!("sdm: {b} visual rows, {} textual rows, {} labels", t.dims()[0], labels.len())));
    }
    let log_q = (match_distribution(labels, v.dtype())? + cfg.epsilon)?.log()?;
    let i2t = sdm_direction(v, t, &log_q, cfg.tau)?;
    let t2i = sdm_direction(t, v, &log_q, cfg.tau)?;
    Ok((i2t + t2i)?)
}

/// Mean softmax cross-entropy of `logits` (B×C) against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{b} logit rows for {} labels", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), (b, 1), &Device::Cpu)?;
    let picked = log_softmax_last(logits)?.gather(&idx, 1)?;
    Ok((picked.mean_all()? * -1.0)?)
}

/// Identity classifier shared by both modalities.
#[derive(Debug, Clone)]
pub struct IdClassifier {
    pub linear: Linear,
}

impl IdClassifier {
    pub fn new(store: &mut ParamStore, dim: usize, classes: usize) -> Result<Self> {
        Ok(Self { linear: Linear::new(store, "classifier", ParamGroup::Modules, dim, classes, true)? })
    }

    pub fn classes(&self) -> usize {
        self.linear.weight.dims()[0]
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.linear.forward(x)
    }
}

/// Cross-entropy of both modalities' features, summed over modalities.
pub fn id_loss(v: &Tensor, t: &Tensor, labels: &[usize], classifier: &IdClassifier) -> Result<Tensor> {
    let lv = cross_entropy(&classifier.logits(v)?, labels)?;
    let lt = cross_entropy(&classifier.logits(t)?, labels)?;
    Ok((lv + lt)?)
}

fn p2i_direction(instances: &Tensor, protos: &Tensor, positives: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let logits = (cosine_matrix(protos, instances)? / cfg.tau)?;
    let per_entry = match cfg.p2i_form {
        P2iForm::Log => log_softmax_last(&logits)?,
        P2iForm::Literal => softmax_last(&logits)?,
    };
    Ok(((per_entry * positives)?.sum_all()? * -1.0)?)
}

/// Prototype-to-instance contrast. Row r of `p_v`/`p_t` is the prototype of
/// identity `identities[r]`; every identity present in `labels` must appear
/// there. Each present identity contributes the mean over its instances of
/// the negative log-softmax taken across all B instances, in both
/// modalities; contributions are summed.
pub fn p2i_loss(v: &Tensor, t: &Tensor, p_v: &Tensor, p_t: &Tensor, labels: &[usize], identities: &[usize], cfg: &LossConfig) -> Result<Tensor> {
    check_tau(cfg.tau)?;
    let b = labels.len();
    if v.dims2()?.0 != b || t.dims2()?.0 != b {
        return Err(Error::Shape(format!("p2i: {} / {} instance rows for {b} labels", v.dims()[0], t.dims()[0])));
    }
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut rows = Vec::with_capacity(present.len());
    let mut weights = vec![0.0f64; present.len() * b];
    for (r, id) in present.iter().enumerate() {
        let row = identities.iter().position(|x| x == id).ok_or(Error::MissingPrototype(*id))?;
        rows.push(row as u32);
        let members = labels.iter().filter(|&l| l == id).count() as f64;
        for (j, l) in labels.iter().enumerate() {
            if l == id {
                weights[r * b + j] = 1.0 / members;
            }
        }
    }
    let rows = Tensor::from_vec(rows, present.len(), &Device::Cpu)?;
    let positives = Tensor::from_vec(weights, (present.len(), b), &Device::Cpu)?.to_dtype(v.dtype())?;
    let lv = p2i_direction(v, &p_v.index_select(&rows, 0)?, &positives, cfg)?;
    let lt = p2i_direction(t, &p_t.index_select(&rows, 0)?, &positives, cfg)?;
    Ok((lv + lt)?)
}

/// Cross-modal fusion head: masked text tokens attend to image tokens, then
/// a vocabulary classifier.
#[derive(Debug, Clone)]
pub struct MlmHead {
    pub fusion: TransformerBlock,
    pub ln: LayerNorm,
    pub vocab: Linear,
}

impl MlmHead {
    pub fn new(store: &mut ParamStore, dim: usize, heads: usize, vocab_size: usize) -> Result<Self> {
        let g = ParamGroup::Modules;
        Ok(Self {
            fusion: TransformerBlock::new(store, "mlm.fusion", g, dim, heads, true)?,
            ln: LayerNorm::new(store, "mlm.ln", g, dim)?,
            vocab: Linear::new(store, "mlm.vocab", g, dim, vocab_size, true)?,
        })
    }

    /// Vocabulary logits for the selected token features (P×d) given each
    /// one's image token sequence (P×L×d).
    pub fn logits(&self, queries: &Tensor, image_tokens: &Tensor) -> Result<Tensor> {
        let fused = self.fusion.forward(&queries.unsqueeze(1)?, Some(image_tokens), None)?.squeeze(1)?;
        self.vocab.forward(&self.ln.forward(&fused)?)
    }
}

/// Mean cross-entropy over masked positions; zero when nothing is masked.
/// `text_tokens` is B×77×d from the masked input, `image_tokens` B×L×d.
pub fn mlm_loss(head: &MlmHead, masked: &[MaskedTokens], text_tokens: &Tensor, image_tokens: &Tensor) -> Result<Tensor> {
    let (b, len, d) = text_tokens.dims3()?;
    if masked.len() != b || image_tokens.dims()[0] != b {
        return Err(Error::Shape(format!("mlm: {} masked rows, {b} text rows, {} image rows", masked.len(), image_tokens.dims()[0])));
    }
    let mut flat = Vec::new();
    let mut owner = Vec::new();
    let mut targets = Vec::new();
    for (row, m) in masked.iter().enumerate() {
        for (&pos, &target) in m.positions.iter().zip(&m.targets) {
            flat.push((row * len + pos) as u32);
            owner.push(row as u32);
            targets.push(target as usize);
        }
    }
    if flat.is_empty() {
        return Ok(Tensor::zeros((), text_tokens.dtype(), &Device::Cpu)?);
    }
    let n = flat.len();
    let queries = text_tokens.reshape((b * len, d))?.index_select(&Tensor::from_vec(flat, n, &Device::Cpu)?, 0)?;
    let memory = image_tokens.index_select(&Tensor::from_vec(owner, n, &Device::Cpu)?, 0)?;
    cross_entropy(&head.logits(&queries, &memory)?, &targets)
}

/// Per-term loss tensors for one step. Absent terms count as zero.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub sdm: Tensor,
    pub id: Tensor,
    pub p2i: Option<Tensor>,
    pub mlm: Option<Tensor>,
}

/// total = sdm + id + λ₁·p2i + λ₂·mlm. Fails naming the first non-finite part.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<(Tensor, LossBundle)> {
    let sdm = scalar(&parts.sdm)?;
    let id = scalar(&parts.id)?;
    let p2i = parts.p2i.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
    let mlm = parts.mlm.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
    for (name, value) in [("sdm", sdm), ("id", id), ("p2i", p2i), ("mlm", mlm)] {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {value}")));
        }
    }
    let mut total = (&parts.sdm + &parts.id)?;
    if let Some(p) = &parts.p2i {
        if cfg.lambda1 != 0.0 {
            total = (total + (p * cfg.lambda1)?)?;
        }
    }
    if let Some(m) = &parts.mlm {
        if cfg.lambda2 != 0.0 {
            total = (total + (m * cfg.lambda2)?)?;
        }
    }
    let bundle = LossBundle { sdm, id, p2i, mlm, total: scalar(&total)? };
    Ok((total, bundle))
}
