//! Epoch batch plans and MLM token masking.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Corpus, Split, TokenSequence, MASK};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampler {
    /// Shuffled pairs; the final batch may be short.
    Random,
    /// `identities` identities with `instances` pairs each per batch.
    IdentityAware { identities: usize, instances: usize },
}

/// A batch of annotated (image, caption) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub texts: Vec<usize>,
    pub images: Vec<usize>,
    /// Dense split-local identity index per row.
    pub labels: Vec<usize>,
}

impl PairBatch {
    pub fn from_texts(corpus: &Corpus, texts: Vec<usize>) -> Self {
        let images = texts.iter().map(|&t| corpus.texts()[t].pair_id).collect();
        let labels = texts.iter().map(|&t| corpus.text_label(t)).collect();
        Self { texts, images, labels }
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Sorted distinct labels present in the batch.
    pub fn identities(&self) -> Vec<usize> {
        let mut ids = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Plans one epoch of batches over a split. `(corpus, seed, epoch)` fully
/// determines the result.
pub fn make_batches(corpus: &Corpus, split: Split, batch_size: usize, sampler: Sampler, seed: u64, epoch: u64) -> Result<Vec<PairBatch>> {
    let pairs = corpus.text_indices(split);
    if pairs.is_empty() {
        return Err(Error::Data(format!("{split} split has no pairs")));
    }
    if batch_size == 0 || batch_size > pairs.len() {
        return Err(Error::BatchTooLarge { batch: batch_size, available: pairs.len() });
    }
    let mut rng = rng::stream(seed, &[rng::tags::BATCHES, epoch]);
    let batches = match sampler {
        Sampler::Random => {
            let mut order = pairs;
            order.shuffle(&mut rng);
            order.chunks(batch_size).map(|c| PairBatch::from_texts(corpus, c.to_vec())).collect()
        }
        Sampler::IdentityAware { identities, instances } => {
            if identities * instances != batch_size || instances == 0 {
                return Err(Error::Config(format!(
                    "identity-aware sampler needs identities × instances = batch size ({identities} × {instances} ≠ {batch_size})"
                )));
            }
            let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for t in pairs {
                by_id.entry(corpus.text_label(t)).or_default().push(t);
            }
            if by_id.len() < identities {
                return Err(Error::Config(format!("{identities} identities per batch but only {} available", by_id.len())));
            }
            // Per identity: shuffle, top up by resampling to a multiple of
            // `instances`, cut into chunks.
            let mut chunks: Vec<(usize, Vec<Vec<usize>>)> = Vec::with_capacity(by_id.len());
            for (id, mut members) in by_id {
                members.shuffle(&mut rng);
                while members.len() % instances != 0 {
                    let pick = members[rng.random_range(0..members.len())];
                    members.push(pick);
                }
                let mut cs: Vec<Vec<usize>> = members.chunks(instances).map(<[usize]>::to_vec).collect();
                cs.reverse();
                chunks.push((id, cs));
            }
            let mut out = Vec::new();
            loop {
                let mut avail: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].1.is_empty()).collect();
                if avail.len() < identities {
                    break;
                }
                avail.shuffle(&mut rng);
                let mut texts = Vec::with_capacity(batch_size);
                for &i in &avail[..identities] {
                    texts.extend(chunks[i].1.pop().unwrap());
                }
                out.push(PairBatch::from_texts(corpus, texts));
            }
            out
        }
    };
    Ok(batches)
}

/// MLM input: the masked sequence plus the positions and original ids of
/// the selected tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedTokens {
    pub input: TokenSequence,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Selects each word token with probability `prob`; a selected token becomes
/// MASK 80% of the time, a random word 10%, and stays unchanged 10%.
pub fn mask_sequence(seq: &TokenSequence, prob: f64, first_word_id: u32, vocab_size: usize, rng: &mut rng::Rng) -> MaskedTokens {
    let mut input = seq.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for pos in seq.word_positions() {
        if rng.random::<f64>() >= prob {
            continue;
        }
        positions.push(pos);
        targets.push(seq.ids[pos]);
        let roll: f64 = rng.random();
        if roll < 0.8 {
            input.ids[pos] = MASK;
        } else if roll < 0.9 && (vocab_size as u32) > first_word_id {
            input.ids[pos] = rng.random_range(first_word_id..vocab_size as u32);
        }
    }
    MaskedTokens { input, positions, targets }
}

/// Masks every sequence of a batch from the `(seed, epoch, batch)` stream.
pub fn mask_batch(seqs: &[TokenSequence], prob: f64, first_word_id: u32, vocab_size: usize, seed: u64, epoch: u64, batch: u64) -> Vec<MaskedTokens> {
    let mut rng = rng::stream(seed, &[rng::tags::MASKING, epoch, batch]);
    seqs.iter().map(|s| mask_sequence(s, prob, first_word_id, vocab_size, &mut rng)).collect()
}
