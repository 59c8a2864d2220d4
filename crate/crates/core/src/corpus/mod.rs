//! Corpus data model: identities, image and caption instances, splits.

mod annotations;
mod augment;
mod batching;
mod raster;
mod synthetic;
mod tokenizer;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotations::{ingest_annotations, parse_annotations, write_annotations, AnnotationRecord};
pub use augment::{augment, AugmentConfig};
pub use batching::{make_batches, mask_batch, MaskedTokens, PairBatch, Sampler};
pub use raster::Raster;
pub use synthetic::{attribute_lexicon, generate_synthetic, SyntheticSpec};
pub use tokenizer::{TokenSequence, Vocabulary, BOS, EOS, MASK, PAD, SPECIAL_TOKENS, TEXT_LEN, UNK};

pub const IMAGE_HEIGHT: usize = 384;
pub const IMAGE_WIDTH: usize = 128;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A person. `index` is dense within the identity's split and follows the
/// sorted order of labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identity {
    pub label: String,
    pub split: Split,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub enum ImageSource {
    Raster(Arc<Raster>),
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ImageInstance {
    pub file_path: String,
    /// Position in [`Corpus::identities`].
    pub identity: usize,
    pub split: Split,
    pub source: ImageSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextInstance {
    pub caption: String,
    /// Index of the annotated image in [`Corpus::images`].
    pub pair_id: usize,
    pub identity: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub identities: usize,
    pub images: usize,
    pub texts: usize,
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Corpus {
    identities: Vec<Identity>,
    images: Vec<ImageInstance>,
    texts: Vec<TextInstance>,
}

/// One image with its captions, the unit both ingestion and synthesis build.
#[derive(Debug, Clone)]
pub(crate) struct RawEntry {
    pub label: String,
    pub split: Split,
    pub file_path: String,
    pub source: ImageSource,
    pub captions: Vec<String>,
}

impl Corpus {
    pub(crate) fn from_entries(entries: Vec<RawEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut splits: BTreeMap<String, Split> = BTreeMap::new();
        for e in &entries {
            match splits.get(&e.label) {
                Some(&s) if s != e.split => {
                    return Err(Error::IdentityInTwoSplits {
                        label: e.label.clone(),
                        first: s.to_string(),
                        second: e.split.to_string(),
                    })
                }
                Some(_) => {}
                None => {
                    splits.insert(e.label.clone(), e.split);
                }
            }
        }
        // Sorted by (split, label) so each split's indices are dense and ordered.
        let mut keyed: Vec<(Split, String)> = splits.into_iter().map(|(l, s)| (s, l)).collect();
        keyed.sort();
        let mut identities = Vec::with_capacity(keyed.len());
        let mut position: BTreeMap<String, usize> = BTreeMap::new();
        let mut per_split: BTreeMap<Split, usize> = BTreeMap::new();
        for (split, label) in keyed {
            let idx = per_split.entry(split).or_insert(0);
            position.insert(label.clone(), identities.len());
            identities.push(Identity { label, split, index: *idx });
            *idx += 1;
        }

        let mut images = Vec::with_capacity(entries.len());
        let mut texts = Vec::new();
        for e in entries {
            let identity = position[&e.label];
            let pair_id = images.len();
            for caption in e.captions {
                texts.push(TextInstance { caption, pair_id, identity, split: e.split });
            }
            images.push(ImageInstance { file_path: e.file_path, identity, split: e.split, source: e.source });
        }
        Ok(Self { identities, images, texts })
    }

    pub fn identities(&self) -> &[Identity] {
        &self.identities
    }

    pub fn images(&self) -> &[ImageInstance] {
        &self.images
    }

    pub fn texts(&self) -> &[TextInstance] {
        &self.texts
    }

    /// Number of identities in a split (N for the training split).
    pub fn num_identities(&self, split: Split) -> usize {
        self.identities.iter().filter(|i| i.split == split).count()
    }

    /// Dense split-local identity index of an image.
    pub fn image_label(&self, image: usize) -> usize {
        self.identities[self.images[image].identity].index
    }

    pub fn text_label(&self, text: usize) -> usize {
        self.identities[self.texts[text].identity].index
    }

    pub fn image_indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.images[i].split == split).collect()
    }

    pub fn text_indices(&self, split: Split) -> Vec<usize> {
        (0..self.texts.len()).filter(|&i| self.texts[i].split == split).collect()
    }

    pub fn counts(&self, split: Split) -> SplitCounts {
        SplitCounts {
            identities: self.num_identities(split),
            images: self.images.iter().filter(|i| i.split == split).count(),
            texts: self.texts.iter().filter(|t| t.split == split).count(),
        }
    }

    /// Loads an image resized to 384×128.
    pub fn load_image(&self, image: usize) -> Result<Raster> {
        match &self.images[image].source {
            ImageSource::Raster(r) => Ok(r.resized(IMAGE_HEIGHT, IMAGE_WIDTH)),
            ImageSource::File(path) => Raster::load(path)?.resized_checked(IMAGE_HEIGHT, IMAGE_WIDTH),
        }
    }

    /// Stable instance key used by embedding files.
    pub fn image_key(image: usize) -> String {
        format!("image:{image}")
    }

    pub fn text_key(text: usize) -> String {
        format!("text:{text}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(label: &str, split: Split, caps: usize) -> RawEntry {
        RawEntry {
            label: label.into(),
            split,
            file_path: format!("{label}.png"),
            source: ImageSource::Raster(Arc::new(Raster::filled(4, 4, [0.0; 3]))),
            captions: (0..caps).map(|i| format!("caption {i}")).collect(),
        }
    }

    #[test]
    fn identity_indices_are_dense_per_split() {
        let corpus = Corpus::from_entries(vec![
            entry("b", Split::Train, 1),
            entry("z", Split::Test, 1),
            entry("a", Split::Train, 2),
            entry("b", Split::Train, 1),
            entry("y", Split::Test, 1),
        ])
        .unwrap();
        let train: Vec<_> = corpus.identities().iter().filter(|i| i.split == Split::Train).collect();
        assert_eq!((train[0].label.as_str(), train[0].index), ("a", 0));
        assert_eq!((train[1].label.as_str(), train[1].index), ("b", 1));
        let test: Vec<_> = corpus.identities().iter().filter(|i| i.split == Split::Test).map(|i| i.index).collect();
        assert_eq!(test, vec![0, 1]);
        assert_eq!(corpus.image_label(0), 1);
        assert_eq!(corpus.counts(Split::Train), SplitCounts { identities: 2, images: 3, texts: 4 });
    }

    #[test]
    fn texts_point_at_images_of_the_same_identity() {
        let corpus = Corpus::from_entries(vec![entry("a", Split::Train, 2), entry("b", Split::Train, 3)]).unwrap();
        for t in corpus.texts() {
            assert_eq!(corpus.images()[t.pair_id].identity, t.identity);
        }
    }

    #[test]
    fn identity_in_two_splits_is_rejected() {
        let err = Corpus::from_entries(vec![entry("a", Split::Train, 1), entry("a", Split::Test, 1)]).unwrap_err();
        assert!(matches!(err, Error::IdentityInTwoSplits { .. }));
    }
}
