//! Single-stage end-to-end training: corpus → encoders → prototype pipeline
//! → objectives → Adam, with per-epoch metric logs and checkpoints.

mod checkpoint;
mod config;
mod model;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TensorEntry, CHECKPOINT_VERSION};
pub use config::{FloatType, SamplerKind, TrainConfig, ABLATION_ROWS};
pub use model::{build_initial_prototypes, Model};
pub use optim::{lr_at, Adam, AdamConfig};

use crate::corpus::{augment, make_batches, mask_batch, Corpus, PairBatch, Raster, Split, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::objectives::{id_loss, mlm_loss, p2i_loss, sdm_loss, total_loss, LossBundle, LossParts};
use crate::prototype::PrototypeBank;
use crate::rng;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.json";

/// One line of the metric log: mean loss components over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub batches: usize,
    pub lr_backbone: f64,
    pub lr_modules: f64,
    #[serde(flatten)]
    pub losses: LossBundle,
}

impl Model {
    /// Named tensors for a checkpoint: parameters, then the bank.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.store.params().iter().map(|p| (format!("param/{}", p.name), p.var.as_tensor().clone())).collect();
        if let Some(bank) = &self.bank {
            out.push(("bank/pt_v".into(), bank.pt_v.clone()));
            out.push(("bank/pt_t".into(), bank.pt_t.clone()));
        }
        out
    }

    /// Copies parameter and bank values out of a checkpoint.
    pub fn load_tensors(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for p in self.store.params() {
            let t = ckpt
                .tensor(&format!("param/{}", p.name))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.dims() != p.var.dims() {
                return Err(Error::Checkpoint(format!("parameter {} has shape {:?}, expected {:?}", p.name, t.dims(), p.var.dims())));
            }
            p.var.set(&t.to_dtype(p.var.dtype())?)?;
        }
        self.bank = match (ckpt.tensor("bank/pt_v"), ckpt.tensor("bank/pt_t")) {
            (Some(v), Some(t)) => Some(PrototypeBank { pt_v: v.clone(), pt_t: t.clone(), context_len: ckpt.config.context_len }),
            _ => None,
        };
        if self.prototypes.is_some() && self.bank.is_none() {
            return Err(Error::Checkpoint("checkpoint lacks the prototype bank".into()));
        }
        Ok(())
    }

    /// Rebuilds a trained model and its vocabulary from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, base_dir: Option<&Path>) -> Result<(Self, Vocabulary)> {
        let vocab = Vocabulary::from_tokens(ckpt.vocab.clone())?;
        let table = if ckpt.config.encoder_mode == crate::encoders::EncoderMode::Embedding {
            let p = Path::new(&ckpt.config.embeddings);
            let p = match base_dir {
                Some(d) if p.is_relative() => d.join(p),
                _ => p.to_path_buf(),
            };
            Some(crate::encoders::EmbeddingTable::load(&p)?)
        } else {
            None
        };
        let mut model = Model::new(&ckpt.config, vocab.len(), ckpt.n_identities, table)?;
        model.load_tensors(ckpt)?;
        Ok((model, vocab))
    }
}

/// Owns the model and optimizer state for one run.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub corpus: &'a Corpus,
    pub vocab: Vocabulary,
    pub model: Model,
    pub adam: Adam,
    pub tokens: Vec<TokenSequence>,
    pub epoch: usize,
    pub step: usize,
    pub total_steps: usize,
    pub last: Option<LossBundle>,
    out_dir: Option<PathBuf>,
}

fn tokenize_all(corpus: &Corpus, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    corpus.texts().iter().map(|t| vocab.tokenize(&t.caption)).collect()
}

fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay }
}

impl<'a> Trainer<'a> {
    /// Fresh run. `base_dir` resolves a relative embedding file path.
    pub fn new(config: TrainConfig, corpus: &'a Corpus, out_dir: Option<&Path>, base_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let train = corpus.text_indices(Split::Train);
        if train.is_empty() {
            return Err(Error::Data("corpus has no training pairs".into()));
        }
        let vocab = Vocabulary::build(train.iter().map(|&t| corpus.texts()[t].caption.as_str()));
        let mut model = Model::for_corpus(&config, corpus, &vocab, base_dir)?;
        if config.uses_prototypes() {
            model.build_initial_prototypes(corpus, &vocab, &config)?;
        }
        let adam = Adam::new(adam_config(&config), model.store.params())?;
        Self::assemble(config, corpus, vocab, model, adam, out_dir)
    }

    /// Continues a run from `ckpt`; the requested configuration must hash
    /// to the stored one.
    pub fn resume(ckpt: &Checkpoint, config: &TrainConfig, corpus: &'a Corpus, out_dir: Option<&Path>, base_dir: Option<&Path>) -> Result<Self> {
        ckpt.check_config(config)?;
        let (model, vocab) = Model::from_checkpoint(ckpt, base_dir)?;
        let mut adam = Adam::new(adam_config(config), model.store.params())?;
        for (i, p) in model.store.params().iter().enumerate() {
            for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let t = ckpt
                    .tensor(&format!("adam.{kind}/{}", p.name))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {}", p.name)))?;
                *slot = t.to_dtype(p.var.dtype())?;
            }
        }
        adam.t = ckpt.adam_t;
        let mut trainer = Self::assemble(config.clone(), corpus, vocab, model, adam, out_dir)?;
        trainer.epoch = ckpt.epoch;
        trainer.step = ckpt.step;
        trainer.last = ckpt.metrics;
        Ok(trainer)
    }

    fn assemble(config: TrainConfig, corpus: &'a Corpus, vocab: Vocabulary, model: Model, adam: Adam, out_dir: Option<&Path>) -> Result<Self> {
        let tokens = tokenize_all(corpus, &vocab)?;
        let per_epoch = make_batches(corpus, Split::Train, config.batch_size, config.sampler(), config.seed, 0)?.len();
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir.join("checkpoints"))?;
        }
        Ok(Self {
            total_steps: per_epoch * config.epochs,
            config,
            corpus,
            vocab,
            model,
            adam,
            tokens,
            epoch: 0,
            step: 0,
            last: None,
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }

    pub fn learning_rates(&self) -> (f64, f64) {
        let c = &self.config;
        (
            lr_at(self.step, self.total_steps, c.warmup_fraction, c.base_lr_backbone),
            lr_at(self.step, self.total_steps, c.warmup_fraction, c.base_lr_modules),
        )
    }

    fn batch_pixels(&self, batch: &PairBatch, epoch: usize, index: usize) -> Result<Option<Vec<Raster>>> {
        if !self.model.encoders.needs_pixels() {
            return Ok(None);
        }
        let cfg = self.config.augment_config();
        let seed = self.config.seed;
        let augmenting = self.config.augment;
        let pixels = batch
            .images
            .par_iter()
            .enumerate()
            .map(|(row, &image)| {
                let raster = self.corpus.load_image(image)?;
                if augmenting {
                    let mut r = rng::stream(seed, &[rng::tags::AUGMENT, epoch as u64, index as u64, row as u64]);
                    Ok(augment(&raster, &cfg, &mut r))
                } else {
                    Ok(raster)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(pixels))
    }

    /// Total loss of one batch with its scalar components. `index` is the
    /// batch position within `epoch` and seeds augmentation and masking.
    pub fn batch_loss(&self, batch: &PairBatch, epoch: usize, index: usize) -> Result<(Tensor, LossBundle)> {
        let cfg = &self.config;
        let loss_cfg = cfg.loss_config();
        let pixels = self.batch_pixels(batch, epoch, index)?;
        let image = self.model.encoders.encode_images(&batch.images, pixels.as_deref())?;
        let seqs: Vec<TokenSequence> = batch.texts.iter().map(|&t| self.tokens[t].clone()).collect();
        let text = self.model.encoders.encode_texts_prefix(&batch.texts, &seqs, true)?;
        let (v, t) = (&image.global, &text.global);

        let sdm = sdm_loss(v, t, &batch.labels, &loss_cfg)?;
        let id = id_loss(v, t, &batch.labels, &self.model.classifier)?;
        let p2i = match (&self.model.prototypes, &self.model.bank) {
            (Some(module), Some(bank)) => {
                let ids = batch.identities();
                let set = module.forward(bank, &ids, v, t)?;
                Some(p2i_loss(v, t, &set.p_v, &set.p_t, &batch.labels, &ids, &loss_cfg)?)
            }
            _ => None,
        };
        let mlm = match &self.model.mlm {
            Some(head) => {
                let masked = mask_batch(
                    &seqs,
                    cfg.mask_prob,
                    self.vocab.first_word_id(),
                    self.vocab.len(),
                    cfg.seed,
                    epoch as u64,
                    index as u64,
                );
                let inputs: Vec<TokenSequence> = masked.iter().map(|m| m.input.clone()).collect();
                let masked_text = self.model.encoders.encode_texts_prefix(&batch.texts, &inputs, true)?;
                let text_tokens = masked_text.tokens.ok_or_else(|| Error::Config("MLM needs text token features".into()))?;
                let image_tokens = image.tokens.as_ref().ok_or_else(|| Error::Config("MLM needs image token features".into()))?;
                Some(mlm_loss(head, &masked, &text_tokens, image_tokens)?)
            }
            None => None,
        };
        total_loss(&LossParts { sdm, id, p2i, mlm }, &loss_cfg)
    }

    fn dump_nonfinite(&self, batch: &PairBatch, epoch: usize, index: usize, err: &Error) {
        let dump = serde_json::json!({
            "epoch": epoch,
            "batch": index,
            "step": self.step,
            "error": err.to_string(),
            "texts": batch.texts,
            "images": batch.images,
            "labels": batch.labels,
            "captions": batch.texts.iter().map(|&t| &self.corpus.texts()[t].caption).collect::<Vec<_>>(),
            "image_files": batch.images.iter().map(|&i| &self.corpus.images()[i].file_path).collect::<Vec<_>>(),
        });
        match &self.out_dir {
            Some(dir) => {
                let path = dir.join(NONFINITE_DUMP);
                if let Err(e) = fs::write(&path, serde_json::to_string_pretty(&dump).unwrap_or_default()) {
                    log::error!("could not write {}: {e}", path.display());
                }
            }
            None => log::error!("non-finite loss: {dump}"),
        }
    }

    /// Runs one epoch and appends its record to the metric log.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.epoch;
        let batches = make_batches(self.corpus, Split::Train, self.config.batch_size, self.config.sampler(), self.config.seed, epoch as u64)?;
        let mut sum = LossBundle::default();
        let (mut lr_b, mut lr_m) = self.learning_rates();
        for (index, batch) in batches.iter().enumerate() {
            (lr_b, lr_m) = self.learning_rates();
            let (loss, bundle) = match self.batch_loss(batch, epoch, index) {
                Ok(x) => x,
                Err(e @ Error::NonFinite(_)) => {
                    self.dump_nonfinite(batch, epoch, index, &e);
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let grads = loss.backward()?;
            self.adam.step(self.model.store.params(), &grads, lr_b, lr_m)?;
            self.step += 1;
            sum.sdm += bundle.sdm;
            sum.id += bundle.id;
            sum.p2i += bundle.p2i;
            sum.mlm += bundle.mlm;
            sum.total += bundle.total;
        }
        let n = batches.len() as f64;
        let losses = LossBundle { sdm: sum.sdm / n, id: sum.id / n, p2i: sum.p2i / n, mlm: sum.mlm / n, total: sum.total / n };
        self.epoch += 1;
        self.last = Some(losses);
        let record = EpochRecord { epoch: self.epoch, step: self.step, batches: batches.len(), lr_backbone: lr_b, lr_modules: lr_m, losses };
        if let Some(dir) = self.out_dir.clone() {
            append_line(&dir.join(METRICS_FILE), &serde_json::to_string(&record)?)?;
            let timing = serde_json::json!({ "epoch": self.epoch, "seconds": started.elapsed().as_secs_f64() });
            append_line(&dir.join(TIMINGS_FILE), &timing.to_string())?;
            if self.epoch.is_multiple_of(self.config.checkpoint_every) || self.epoch == self.config.epochs {
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join("checkpoints").join(format!("epoch-{:04}.ckpt", self.epoch)))?;
                ckpt.save(&dir.join("last.ckpt"))?;
            }
        }
        log::info!("epoch {} total {:.4} (sdm {:.4} id {:.4} p2i {:.4} mlm {:.4})", self.epoch, losses.total, losses.sdm, losses.id, losses.p2i, losses.mlm);
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn fit(&mut self) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while self.epoch < self.config.epochs {
            records.push(self.train_epoch()?);
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.model.named_tensors();
        for (i, p) in self.model.store.params().iter().enumerate() {
            tensors.push((format!("adam.m/{}", p.name), self.adam.m[i].clone()));
            tensors.push((format!("adam.v/{}", p.name), self.adam.v[i].clone()));
        }
        Checkpoint {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam.t,
            metrics: self.last,
            vocab: self.vocab.tokens().to_vec(),
            n_identities: self.model.n_identities,
            tensors,
        }
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}
