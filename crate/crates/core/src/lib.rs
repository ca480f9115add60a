//! Time-aware transformer encoder and semantic change detection.
//!
//! The encoder supports standard self-attention, temporal attention (scores
//! conditioned on learned time-point representations), time-token
//! prepending and fixed per-time-point score scaling. Trained with masked
//! language modeling over time-sliced corpora, it yields time-specific word
//! embeddings whose cosine distance across slices ranks words by semantic
//! change.

pub mod attention;
pub mod checkpoint;
pub mod change;
pub mod error;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tape;
pub mod vocab;
pub mod corpus;
pub mod training;

pub use attention::{AttentionInputs, AttentionMode, AttentionOutput};
pub use checkpoint::Checkpoint;
pub use change::{ScoreReport, WordTimeEmbedding};
pub use corpus::{Corpus, Dataset, TargetWordRecord};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use metrics::EvalReport;
pub use model::{HiddenStates, Model, ModelConfig, ParameterCount};
pub use tape::{GradTape, Gradients, NodeId};
pub use vocab::{TimeVocab, TimedSequence, Vocab};
