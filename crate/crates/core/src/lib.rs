//! Phrase-based image captioning.
//!
//! A low-rank bilinear metric scores caption phrases against fixed image
//! feature vectors. The best-scoring noun, verb and prepositional phrases of
//! an image are assembled into sentences by a chunk-tag constrained trigram
//! model, and the candidates are re-ranked by their mean phrase score.
//!
//! Modules follow the pipeline: [`corpus`] ingests chunked captions,
//! [`embeddings`] initializes phrase vectors, [`bilinear`] trains the metric,
//! [`langmodel`] counts phrase trigrams, [`generator`] decodes and re-ranks,
//! and [`eval`] scores the output.

pub mod bilinear;
pub mod corpus;
pub mod embeddings;
pub mod eval;
pub mod generator;
pub mod langmodel;
pub mod matrix;
pub mod rng;

pub use bilinear::{BilinearError, BilinearModel, FeatureStore, TrainConfig};
pub use corpus::{ChunkedSentence, CorpusError, Phrase, PhraseId, PhraseTag, PhraseVocabulary};
pub use embeddings::{EmbeddingError, EmbeddingTable};
pub use eval::{BleuReport, EvalError, RecallReport};
pub use generator::{
    Candidate, DecodeConfig, GeneratedSentence, GeneratorError, PhraseSelection, SelectionCaps,
};
pub use langmodel::{LmError, PhraseSequence, TrigramModel};
pub use matrix::Matrix;
