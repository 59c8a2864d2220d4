//! Identity-enriched prototypes: initialize, adapt, enrich, then aggregate.
//!
//! * the frozen [`PrototypeBank`] holds the initial per-identity prototypes;
//! * domain-conditional prompting (DPP) prepends K learnable context vectors
//!   to each prototype and reads the last position of a self-attention
//!   encoder (SAE);
//! * instance-conditional prompting (IPP) lets prototypes query the batch's
//!   instance features through a cross-attention decoder (CAD), within and
//!   across modalities;
//! * aggregation combines the three prototypes around the initial one.
//!
//! One SAE and one CAD are shared across identities and modalities.

mod bank;

use candle_core::{Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

pub use bank::{PrototypeBank, PrototypeReduce};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, Linear, ParamGroup, ParamStore, TransformerStack};

/// Aggregation schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Softmax of dot products with the initial prototype.
    Apa,
    /// Initial prototype plus the plain sum of the others.
    Sum,
    /// Initial prototype plus the mean of the others.
    Average,
    /// Softmax over scores from a two-layer perceptron.
    Mlp,
    /// Softmax over free learnable logits shared by all identities.
    Parameter,
}

impl Aggregation {
    pub const ALL: [Aggregation; 5] = [Aggregation::Sum, Aggregation::Average, Aggregation::Mlp, Aggregation::Parameter, Aggregation::Apa];

    /// Display name used in ablation tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Aggregation::Sum => "Sum",
            Aggregation::Average => "Average",
            Aggregation::Mlp => "MLP",
            Aggregation::Parameter => "Parameter",
            Aggregation::Apa => "APA",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "apa" => Aggregation::Apa,
            "sum" => Aggregation::Sum,
            "average" | "avg" | "mean" => Aggregation::Average,
            "mlp" => Aggregation::Mlp,
            "parameter" | "param" => Aggregation::Parameter,
            _ => return None,
        })
    }
}

/// The three derived prototype kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Adapted = 0,
    IntraEnriched = 1,
    InterEnriched = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    pub dim: usize,
    pub heads: usize,
    pub context_len: usize,
    pub sae_blocks: usize,
    pub cad_blocks: usize,
    pub use_dpp: bool,
    pub use_ipp_intra: bool,
    pub use_ipp_inter: bool,
    pub aggregation: Aggregation,
}

/// Per-identity, per-modality learnable context vectors (N×K×d each).
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub ctx_v: Var,
    pub ctx_t: Var,
}

impl PromptContext {
    pub fn new(store: &mut ParamStore, n: usize, k: usize, d: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("context length must be at least 1".into()));
        }
        Ok(Self {
            ctx_v: store.normal("prompt.ctx_v", ParamGroup::Modules, &[n, k, d], 0.02)?,
            ctx_t: store.normal("prompt.ctx_t", ParamGroup::Modules, &[n, k, d], 0.02)?,
        })
    }

    pub fn context_len(&self) -> usize {
        self.ctx_v.dims()[1]
    }
}

#[derive(Debug, Clone)]
pub enum Aggregator {
    Apa,
    Sum,
    Average,
    Mlp { hidden: Linear, out: Linear },
    Parameter { logits: Var },
}

impl Aggregator {
    pub fn new(store: &mut ParamStore, kind: Aggregation, d: usize) -> Result<Self> {
        let g = ParamGroup::Modules;
        Ok(match kind {
            Aggregation::Apa => Aggregator::Apa,
            Aggregation::Sum => Aggregator::Sum,
            Aggregation::Average => Aggregator::Average,
            Aggregation::Mlp => Aggregator::Mlp {
                hidden: Linear::new(store, "aggregate.mlp.hidden", g, 2 * d, d, true)?,
                out: Linear::new(store, "aggregate.mlp.out", g, d, 1, true)?,
            },
            Aggregation::Parameter => Aggregator::Parameter { logits: store.constant("aggregate.logits", g, &[3], 0.0)? },
        })
    }

    /// Combines `parts` around `pt` (both M×d). Returns the final prototypes
    /// and, for weighted schemes, the M×|parts| weights.
    pub fn aggregate(&self, pt: &Tensor, parts: &[(Component, Tensor)]) -> Result<(Tensor, Option<Tensor>)> {
        if parts.is_empty() {
            return Ok((pt.clone(), None));
        }
        let stacked = Tensor::stack(&parts.iter().map(|(_, p)| p.clone()).collect::<Vec<_>>(), 1)?; // M×k×d
        let weights = match self {
            Aggregator::Sum => return Ok(((pt + stacked.sum(1)?)?, None)),
            Aggregator::Average => return Ok(((pt + stacked.mean(1)?)?, None)),
            Aggregator::Apa => {
                let scores = stacked.broadcast_mul(&pt.unsqueeze(1)?)?.sum(D::Minus1)?;
                softmax_last(&scores)?
            }
            Aggregator::Mlp { hidden, out } => {
                let k = parts.len();
                let (m, d) = pt.dims2()?;
                let anchor = pt.unsqueeze(1)?.broadcast_as((m, k, d))?;
                let input = Tensor::cat(&[&anchor, &stacked], 2)?;
                let scores = out.forward(&hidden.forward(&input)?.relu()?)?.squeeze(2)?;
                softmax_last(&scores)?
            }
            Aggregator::Parameter { logits } => {
                let idx: Vec<u32> = parts.iter().map(|(c, _)| *c as u32).collect();
                let idx = Tensor::from_vec(idx, parts.len(), &Device::Cpu)?;
                let w = softmax_last(&logits.as_tensor().index_select(&idx, 0)?.unsqueeze(0)?)?;
                w.broadcast_as((pt.dims()[0], parts.len()))?
            }
        };
        let combined = stacked.broadcast_mul(&weights.unsqueeze(2)?)?.sum(1)?;
        Ok(((pt + combined)?, Some(weights)))
    }
}

/// APA on full N×d inputs: weights softmax(pt·p_k) over k ∈ {a, en, eo},
/// result pt + Σ_k w_k p_k. Returns the prototypes and N×3 weights.
pub fn apa_aggregate(pt: &Tensor, p_a: &Tensor, p_en: &Tensor, p_eo: &Tensor) -> Result<(Tensor, Tensor)> {
    for p in [p_a, p_en, p_eo] {
        if p.dims() != pt.dims() {
            return Err(Error::Shape(format!("aggregation inputs {:?} vs {:?}", p.dims(), pt.dims())));
        }
    }
    let parts = [(Component::Adapted, p_a.clone()), (Component::IntraEnriched, p_en.clone()), (Component::InterEnriched, p_eo.clone())];
    let (p, w) = Aggregator::Apa.aggregate(pt, &parts)?;
    Ok((p, w.expect("apa weights")))
}

/// All prototypes for a set of identities (rows follow `identities`).
#[derive(Debug, Clone)]
pub struct EnrichedPrototypeSet {
    pub identities: Vec<usize>,
    pub pt_v: Tensor,
    pub pt_t: Tensor,
    pub p_a_v: Option<Tensor>,
    pub p_a_t: Option<Tensor>,
    pub p_en_v: Option<Tensor>,
    pub p_en_t: Option<Tensor>,
    pub p_eo_v: Option<Tensor>,
    pub p_eo_t: Option<Tensor>,
    pub p_v: Tensor,
    pub p_t: Tensor,
    pub weights_v: Option<Tensor>,
    pub weights_t: Option<Tensor>,
}

/// Output of the intra- and inter-modal enrichment.
#[derive(Debug, Clone)]
pub struct Enrichment {
    pub p_en_v: Option<Tensor>,
    pub p_en_t: Option<Tensor>,
    pub p_eo_v: Option<Tensor>,
    pub p_eo_t: Option<Tensor>,
}

/// Trainable part of the prototype pipeline.
#[derive(Debug, Clone)]
pub struct PrototypeModule {
    pub config: PrototypeConfig,
    pub context: Option<PromptContext>,
    pub sae: Option<TransformerStack>,
    pub cad: Option<TransformerStack>,
    pub aggregator: Aggregator,
}

fn ids_tensor(ids: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(ids.iter().map(|&i| i as u32).collect::<Vec<_>>(), ids.len(), &Device::Cpu)?)
}

impl PrototypeModule {
    pub fn new(store: &mut ParamStore, n: usize, cfg: PrototypeConfig) -> Result<Self> {
        let g = ParamGroup::Modules;
        let (context, sae) = if cfg.use_dpp {
            (
                Some(PromptContext::new(store, n, cfg.context_len, cfg.dim)?),
                Some(TransformerStack::new(store, "sae", g, cfg.sae_blocks, cfg.dim, cfg.heads, false)?),
            )
        } else {
            (None, None)
        };
        let cad = if cfg.use_ipp_intra || cfg.use_ipp_inter {
            Some(TransformerStack::new(store, "cad", g, cfg.cad_blocks, cfg.dim, cfg.heads, true)?)
        } else {
            None
        };
        let uses_weights = cfg.use_dpp || cfg.use_ipp_intra || cfg.use_ipp_inter;
        let aggregator = if uses_weights { Aggregator::new(store, cfg.aggregation, cfg.dim)? } else { Aggregator::Apa };
        Ok(Self { config: cfg, context, sae, cad, aggregator })
    }

    /// Runs the SAE on {ctx_1..ctx_K, pt} for both modalities and returns the
    /// full (K+1)-long output sequences, visual then textual (M×(K+1)×d each).
    pub fn sae_sequences(&self, pt_v: &Tensor, pt_t: &Tensor, identities: &[usize]) -> Result<(Tensor, Tensor)> {
        let (ctx, sae) = match (&self.context, &self.sae) {
            (Some(c), Some(s)) => (c, s),
            _ => return Err(Error::Config("domain-conditional prompting is disabled".into())),
        };
        let m = identities.len();
        let (k, d) = (ctx.context_len(), ctx.ctx_v.dims()[2]);
        if pt_v.dims() != [m, d] || pt_t.dims() != [m, d] {
            return Err(Error::Shape(format!("prototypes {:?} / {:?} for {m} identities of width {d}", pt_v.dims(), pt_t.dims())));
        }
        if let Some(&bad) = identities.iter().find(|&&i| i >= ctx.ctx_v.dims()[0]) {
            return Err(Error::Shape(format!("identity {bad} has no context vectors")));
        }
        let ids = ids_tensor(identities)?;
        let seq_v = Tensor::cat(&[&ctx.ctx_v.as_tensor().index_select(&ids, 0)?, &pt_v.unsqueeze(1)?], 1)?;
        let seq_t = Tensor::cat(&[&ctx.ctx_t.as_tensor().index_select(&ids, 0)?, &pt_t.unsqueeze(1)?], 1)?;
        let out = sae.forward(&Tensor::cat(&[&seq_v, &seq_t], 0)?, None, None)?;
        debug_assert_eq!(out.dims(), &[2 * m, k + 1, d]);
        Ok((out.narrow(0, 0, m)?, out.narrow(0, m, m)?))
    }

    /// Task-adaptive prototypes: the last SAE output position.
    pub fn dpp_forward(&self, pt_v: &Tensor, pt_t: &Tensor, identities: &[usize]) -> Result<(Tensor, Tensor)> {
        let (sv, st) = self.sae_sequences(pt_v, pt_t, identities)?;
        let last = sv.dims()[1] - 1;
        Ok((sv.narrow(1, last, 1)?.squeeze(1)?, st.narrow(1, last, 1)?.squeeze(1)?))
    }

    /// CAD with prototypes as queries and batch instances as keys/values.
    /// Intra: (pt_v, V_B) and (pt_t, T_B). Inter: (pt_v, T_B) and (pt_t, V_B).
    pub fn ipp_forward(&self, pt_v: &Tensor, pt_t: &Tensor, v_b: &Tensor, t_b: &Tensor) -> Result<Enrichment> {
        let cad = self.cad.as_ref().ok_or_else(|| Error::Config("instance-conditional prompting is disabled".into()))?;
        let (b, d) = v_b.dims2()?;
        if b == 0 {
            return Err(Error::Shape("instance-conditional prompting needs a non-empty batch".into()));
        }
        if t_b.dims() != [b, d] || pt_v.dims()[1] != d || pt_t.dims() != pt_v.dims() {
            return Err(Error::Shape(format!(
                "enrichment inputs pt {:?}/{:?}, V_B {:?}, T_B {:?}",
                pt_v.dims(),
                pt_t.dims(),
                v_b.dims(),
                t_b.dims()
            )));
        }
        let (intra, inter) = (self.config.use_ipp_intra, self.config.use_ipp_inter);
        let mut queries = Vec::new();
        let mut memories = Vec::new();
        if intra {
            queries.extend([pt_v, pt_t]);
            memories.extend([v_b, t_b]);
        }
        if inter {
            queries.extend([pt_v, pt_t]);
            memories.extend([t_b, v_b]);
        }
        let out = cad.forward(&Tensor::stack(&queries, 0)?, Some(&Tensor::stack(&memories, 0)?), None)?;
        let take = |i: usize| -> Result<Tensor> { Ok(out.get(i)?) };
        let mut e = Enrichment { p_en_v: None, p_en_t: None, p_eo_v: None, p_eo_t: None };
        let mut next = 0;
        if intra {
            e.p_en_v = Some(take(0)?);
            e.p_en_t = Some(take(1)?);
            next = 2;
        }
        if inter {
            e.p_eo_v = Some(take(next)?);
            e.p_eo_t = Some(take(next + 1)?);
        }
        Ok(e)
    }

    /// Full pipeline for `identities` against one batch of instance features.
    pub fn forward(&self, bank: &PrototypeBank, identities: &[usize], v_b: &Tensor, t_b: &Tensor) -> Result<EnrichedPrototypeSet> {
        if let Some(&bad) = identities.iter().find(|&&i| i >= bank.len()) {
            return Err(Error::MissingPrototype(bad));
        }
        let ids = ids_tensor(identities)?;
        let pt_v = bank.pt_v.index_select(&ids, 0)?;
        let pt_t = bank.pt_t.index_select(&ids, 0)?;
        let (p_a_v, p_a_t) = if self.config.use_dpp {
            let (a, b) = self.dpp_forward(&pt_v, &pt_t, identities)?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        let e = if self.cad.is_some() {
            self.ipp_forward(&pt_v, &pt_t, v_b, t_b)?
        } else {
            Enrichment { p_en_v: None, p_en_t: None, p_eo_v: None, p_eo_t: None }
        };
        let collect = |a: &Option<Tensor>, en: &Option<Tensor>, eo: &Option<Tensor>| {
            let mut parts = Vec::new();
            for (c, p) in [(Component::Adapted, a), (Component::IntraEnriched, en), (Component::InterEnriched, eo)] {
                if let Some(p) = p {
                    parts.push((c, p.clone()));
                }
            }
            parts
        };
        let (p_v, weights_v) = self.aggregator.aggregate(&pt_v, &collect(&p_a_v, &e.p_en_v, &e.p_eo_v))?;
        let (p_t, weights_t) = self.aggregator.aggregate(&pt_t, &collect(&p_a_t, &e.p_en_t, &e.p_eo_t))?;
        Ok(EnrichedPrototypeSet {
            identities: identities.to_vec(),
            pt_v,
            pt_t,
            p_a_v,
            p_a_t,
            p_en_v: e.p_en_v,
            p_en_t: e.p_en_t,
            p_eo_v: e.p_eo_v,
            p_eo_t: e.p_eo_t,
            p_v,
            p_t,
            weights_v,
            weights_t,
        })
    }
}
