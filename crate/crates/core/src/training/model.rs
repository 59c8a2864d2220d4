use std::path::Path;

use candle_core::Tensor;

use crate::corpus::{Corpus, Split, Vocabulary};
use crate::encoders::{EmbeddingTable, EncoderMode, Encoders};
use crate::error::{Error, Result};
use crate::evaluation::embed_split;
use crate::nn::ParamStore;
use crate::objectives::{IdClassifier, MlmHead};
use crate::prototype::{EnrichedPrototypeSet, PrototypeBank, PrototypeModule};

use super::TrainConfig;

/// Every trainable component plus the frozen prototype bank. Parameters are
/// created in a fixed order: encoders, classifier, prototype modules, MLM
/// head.
#[derive(Debug)]
pub struct Model {
    pub store: ParamStore,
    pub encoders: Encoders,
    pub classifier: IdClassifier,
    pub prototypes: Option<PrototypeModule>,
    pub mlm: Option<MlmHead>,
    pub bank: Option<PrototypeBank>,
    pub n_identities: usize,
}

impl Model {
    /// Builds the parameter layout. `table` is required in embedding mode.
    pub fn new(cfg: &TrainConfig, vocab_size: usize, n_identities: usize, table: Option<EmbeddingTable>) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.dtype.dtype();
        let mut store = ParamStore::new(cfg.seed, dtype);
        let encoders = match cfg.encoder_mode {
            EncoderMode::Toy => Encoders::toy(&mut store, &cfg.encoder_config(), vocab_size)?,
            EncoderMode::Embedding => {
                let table = table.ok_or_else(|| Error::Config("embedding mode needs an embedding table".into()))?;
                if table.dim() != cfg.dim {
                    return Err(Error::Config(format!("embedding width {} differs from dim {}", table.dim(), cfg.dim)));
                }
                Encoders::embedding_backed(table, dtype)
            }
        };
        let classifier = IdClassifier::new(&mut store, cfg.dim, n_identities)?;
        let prototypes = if cfg.uses_prototypes() {
            Some(PrototypeModule::new(&mut store, n_identities, cfg.prototype_config())?)
        } else {
            None
        };
        let mlm = if cfg.use_mlm { Some(MlmHead::new(&mut store, cfg.dim, cfg.heads, vocab_size)?) } else { None };
        Ok(Self { store, encoders, classifier, prototypes, mlm, bank: None, n_identities })
    }

    /// Builds the model for a corpus, loading the embedding table when the
    /// config asks for one.
    pub fn for_corpus(cfg: &TrainConfig, corpus: &Corpus, vocab: &Vocabulary, base_dir: Option<&Path>) -> Result<Self> {
        let table = if cfg.encoder_mode == EncoderMode::Embedding {
            let path = Path::new(&cfg.embeddings);
            let path = match base_dir {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path.to_path_buf(),
            };
            Some(EmbeddingTable::load(&path)?)
        } else {
            None
        };
        let n = corpus.num_identities(Split::Train);
        if n == 0 {
            return Err(Error::Data("train split has no identities".into()));
        }
        Self::new(cfg, vocab.len(), n, table)
    }

    /// Trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Runs the current encoders over the train split and stores the
    /// resulting frozen bank.
    pub fn build_initial_prototypes(&mut self, corpus: &Corpus, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<()> {
        let bank = build_initial_prototypes(corpus, &self.encoders, vocab, cfg)?;
        if bank.len() != self.n_identities {
            return Err(Error::Data(format!("bank has {} identities, model expects {}", bank.len(), self.n_identities)));
        }
        self.bank = Some(bank);
        Ok(())
    }

    /// Prototypes of every training identity, enriched against all train
    /// pairs at once (analysis mode).
    pub fn full_prototypes(&self, corpus: &Corpus, vocab: &Vocabulary) -> Result<EnrichedPrototypeSet> {
        let (module, bank) = match (&self.prototypes, &self.bank) {
            (Some(m), Some(b)) => (m, b),
            _ => return Err(Error::Config("prototypes are disabled or not built".into())),
        };
        let emb = embed_split(corpus, Split::Train, &self.encoders, vocab)?;
        let pair_rows: Vec<u32> = emb
            .text_ids
            .iter()
            .map(|&t| emb.image_ids.iter().position(|&i| i == corpus.texts()[t].pair_id).map(|p| p as u32))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Data("caption without a train image".into()))?;
        let n = pair_rows.len();
        let v = emb.gallery.features.index_select(&Tensor::from_vec(pair_rows, n, &candle_core::Device::Cpu)?, 0)?;
        let ids: Vec<usize> = (0..bank.len()).collect();
        module.forward(bank, &ids, &v, &emb.queries.features)
    }
}

/// Sums (or averages) each training identity's image and caption features
/// under `encoders` in eval mode.
pub fn build_initial_prototypes(corpus: &Corpus, encoders: &Encoders, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<PrototypeBank> {
    let emb = embed_split(corpus, Split::Train, encoders, vocab)?;
    let bank = PrototypeBank::from_features(
        &emb.gallery,
        &emb.queries,
        corpus.num_identities(Split::Train),
        cfg.prototype_reduce,
        cfg.context_len,
    )?;
    Ok(PrototypeBank { pt_v: bank.pt_v.detach(), pt_t: bank.pt_t.detach(), context_len: bank.context_len })
}
