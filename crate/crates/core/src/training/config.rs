//! Flat, typed training configuration.
//!
//! Config files are TOML with one key per field of [`TrainConfig`]; missing
//! keys take the paper defaults. Overrides use `key=value` with the same
//! names and are type-checked against the defaults' types.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{AugmentConfig, Sampler};
use crate::encoders::{EncoderConfig, EncoderMode};
use crate::error::{Error, Result};
use crate::objectives::{LossConfig, P2iForm};
use crate::prototype::{Aggregation, PrototypeConfig, PrototypeReduce};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Random,
    IdentityAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatType {
    F32,
    F64,
}

impl FloatType {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            FloatType::F32 => candle_core::DType::F32,
            FloatType::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sampler: SamplerKind,
    /// Pairs per identity for the identity-aware sampler.
    pub instances_per_identity: usize,
    pub base_lr_backbone: f64,
    pub base_lr_modules: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub encoder_mode: EncoderMode,
    /// Embedding file for `encoder_mode = "embedding"`.
    pub embeddings: String,
    pub dtype: FloatType,

    /// Attention heads of the SAE, CAD and MLM fusion block.
    pub heads: usize,
    pub context_len: usize,
    pub sae_blocks: usize,
    pub cad_blocks: usize,
    pub prototype_reduce: PrototypeReduce,

    pub tau: f64,
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub p2i_form: P2iForm,
    pub mask_prob: f64,

    pub use_inipt: bool,
    pub use_dpp: bool,
    pub use_ipp_intra: bool,
    pub use_ipp_inter: bool,
    pub use_mlm: bool,
    pub aggregation: Aggregation,

    pub augment: bool,
    pub flip_prob: f64,
    pub crop_padding: usize,
    pub erase_prob: f64,

    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

/// Names and descriptions of the Table-4 style component ablation rows.
pub const ABLATION_ROWS: [&str; 8] = ["Baseline", "+IniP", "+DPP", "+IPP (Intra)", "+IPP (Inter)", "+IPP", "+DPP+IPP", "+DPP+IPP+MLM"];

impl TrainConfig {
    /// Full configuration at the published scale.
    pub fn paper() -> Self {
        Self {
            seed: 0,
            epochs: 60,
            batch_size: 64,
            sampler: SamplerKind::Random,
            instances_per_identity: 4,
            base_lr_backbone: 1e-5,
            base_lr_modules: 1e-4,
            weight_decay: 4e-5,
            warmup_fraction: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dim: 512,
            encoder_depth: 2,
            encoder_heads: 8,
            encoder_mode: EncoderMode::Toy,
            embeddings: String::new(),
            dtype: FloatType::F32,
            heads: 8,
            context_len: 4,
            sae_blocks: 1,
            cad_blocks: 3,
            prototype_reduce: PrototypeReduce::Sum,
            tau: 0.02,
            epsilon: 1e-8,
            lambda1: 0.2,
            lambda2: 1.0,
            p2i_form: P2iForm::Log,
            mask_prob: 0.15,
            use_inipt: true,
            use_dpp: true,
            use_ipp_intra: true,
            use_ipp_inter: true,
            use_mlm: true,
            aggregation: Aggregation::Apa,
            augment: true,
            flip_prob: 0.5,
            crop_padding: 10,
            erase_prob: 0.5,
            checkpoint_every: 1,
        }
    }

    /// Small-width preset for synthetic corpora on one CPU. Toy encoders
    /// start from random weights, so learning rates are higher.
    pub fn desk() -> Self {
        Self {
            epochs: 100,
            dim: 64,
            encoder_heads: 4,
            heads: 4,
            base_lr_backbone: 1e-3,
            base_lr_modules: 1e-3,
            checkpoint_every: 25,
            ..Self::paper()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected paper or desk)"))),
        }
    }

    /// Flags of component-ablation row `row` applied to `self`.
    pub fn with_ablation_row(&self, row: usize) -> Result<Self> {
        let flags: [bool; 5] = match row {
            0 => [false, false, false, false, false],
            1 => [true, false, false, false, false],
            2 => [true, true, false, false, false],
            3 => [true, false, true, false, false],
            4 => [true, false, false, true, false],
            5 => [true, false, true, true, false],
            6 => [true, true, true, true, false],
            7 => [true, true, true, true, true],
            _ => return Err(Error::Config(format!("ablation row {row} outside 0..=7"))),
        };
        let [use_inipt, use_dpp, use_ipp_intra, use_ipp_inter, use_mlm] = flags;
        Ok(Self { use_inipt, use_dpp, use_ipp_intra, use_ipp_inter, use_mlm, ..self.clone() })
    }

    /// True when prototypes and the p2i loss take part in training.
    pub fn uses_prototypes(&self) -> bool {
        self.use_inipt || self.use_dpp || self.use_ipp_intra || self.use_ipp_inter
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("dim", self.dim),
            ("heads", self.heads),
            ("encoder_heads", self.encoder_heads),
            ("context_len", self.context_len),
            ("sae_blocks", self.sae_blocks),
            ("cad_blocks", self.cad_blocks),
            ("instances_per_identity", self.instances_per_identity),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("base_lr_backbone", self.base_lr_backbone), ("base_lr_modules", self.base_lr_modules), ("adam_eps", self.adam_eps)] {
            if !(v > 0.0) {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative".into());
        }
        for (name, v) in [
            ("warmup_fraction", self.warmup_fraction),
            ("mask_prob", self.mask_prob),
            ("flip_prob", self.flip_prob),
            ("erase_prob", self.erase_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1)"));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return fail(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.sampler == SamplerKind::IdentityAware && !self.batch_size.is_multiple_of(self.instances_per_identity) {
            return fail("identity-aware sampling needs instances_per_identity to divide batch_size".into());
        }
        if self.encoder_mode == EncoderMode::Embedding {
            if self.embeddings.is_empty() {
                return fail("embedding mode needs `embeddings` to name a file".into());
            }
            if self.use_mlm {
                return fail("masked language modeling needs token features; disable use_mlm in embedding mode".into());
            }
        }
        self.encoder_config().validate()?;
        self.loss_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { dim: self.dim, depth: self.encoder_depth, heads: self.encoder_heads, mode: self.encoder_mode }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { tau: self.tau, epsilon: self.epsilon, lambda1: self.lambda1, lambda2: self.lambda2, p2i_form: self.p2i_form }
    }

    pub fn prototype_config(&self) -> PrototypeConfig {
        PrototypeConfig {
            dim: self.dim,
            heads: self.heads,
            context_len: self.context_len,
            sae_blocks: self.sae_blocks,
            cad_blocks: self.cad_blocks,
            use_dpp: self.use_dpp,
            use_ipp_intra: self.use_ipp_intra,
            use_ipp_inter: self.use_ipp_inter,
            aggregation: self.aggregation,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig { flip_prob: self.flip_prob, crop_padding: self.crop_padding, erase_prob: self.erase_prob, ..AugmentConfig::default() }
    }

    pub fn sampler(&self) -> Sampler {
        match self.sampler {
            SamplerKind::Random => Sampler::Random,
            SamplerKind::IdentityAware => Sampler::IdentityAware {
                identities: self.batch_size / self.instances_per_identity,
                instances: self.instances_per_identity,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Keys present in `text` replace the corresponding fields of `self`;
    /// absent keys keep their current value.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let patch: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {}", e.message())))?;
        let mut table = toml::Table::try_from(self).expect("flat config serializes");
        for (key, value) in patch {
            if !table.contains_key(&key) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            table.insert(key, value);
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("config file: {}", e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Applies one `key=value` override. The value is parsed as the type of
    /// the existing field; unknown keys are rejected.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut table = toml::Table::try_from(&*self).expect("flat config serializes");
        let current = table.get(key).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        let value = match current {
            toml::Value::String(_) => toml::Value::String(raw.trim_matches('"').to_string()),
            toml::Value::Integer(_) => toml::Value::Integer(
                raw.parse().map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{raw}`")))?,
            ),
            toml::Value::Float(_) => toml::Value::Float(
                raw.parse().map_err(|_| Error::Config(format!("`{key}` expects a number, got `{raw}`")))?,
            ),
            toml::Value::Boolean(_) => toml::Value::Boolean(
                raw.parse().map_err(|_| Error::Config(format!("`{key}` expects true or false, got `{raw}`")))?,
            ),
            _ => return Err(Error::Config(format!("`{key}` cannot be overridden"))),
        };
        table.insert(key.to_string(), value);
        *self = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {}", e.message())))?;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        overrides.iter().try_for_each(|o| self.set(o.as_ref()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
