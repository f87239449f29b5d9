//! Corpus-to-report pipeline for tracking diachronic shifts in lexical
//! semantic modality.
//!
//! The pipeline ingests time-stamped lemmatized documents, groups them into
//! fixed-width year windows, trains skip-gram embeddings, fits a dynamic
//! embedded topic model over the windows, and derives per-word bimodality
//! curves, change-points, and per-author novelty scores from the fitted
//! model. The [`report`] module orchestrates the stages and emits the
//! analysis tables as CSV/JSON.

pub mod corpus;
pub mod detm;
pub mod embeddings;
pub mod measures;
pub mod report;
pub mod synth;

pub use corpus::{Document, Vocabulary, WindowSpec, WindowedCorpus};
pub use detm::{DetmConfig, DetmState, TopicWordDist, WordTopicCurve};
pub use embeddings::{EmbeddingMatrix, SgnsConfig};
pub use measures::{ChangePointResult, NoveltyRecord};
