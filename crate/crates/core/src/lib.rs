//! Identity-enriched prototype learning for text-to-image person
//! re-identification.
//!
//! The crate covers the whole desk-scale pipeline: corpus ingestion and
//! synthesis, toy visual/textual encoders, the prototype pipeline
//! (initialize, adapt, enrich, aggregate), the training objectives, the
//! training loop and retrieval evaluation.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod objectives;
pub mod prototype;
pub mod rng;
pub mod training;

pub use corpus::{Corpus, Split, SyntheticSpec, Vocabulary};
pub use encoders::{EmbeddingBatch, EncoderConfig, Encoders, Modality};
pub use error::{Error, ErrorKind, Result};
pub use evaluation::{EvalMetrics, RankedRetrieval};
pub use objectives::{LossBundle, LossConfig};
pub use prototype::{Aggregation, EnrichedPrototypeSet, PrototypeBank};
pub use training::{Checkpoint, Model, TrainConfig, Trainer};
