//! Set-based cross-modal embeddings.
//!
//! Each sample (an image or a caption) is represented by a small set of `K`
//! embedding vectors produced by an iterated slot-attention module. Sets are
//! compared with smooth-Chamfer similarity, a log-sum-exp relaxation of the
//! bidirectional Chamfer matching. The crate covers the full pipeline at desk
//! scale: a synthetic ambiguous corpus, the set predictor, the triplet
//! objective with diversity and MMD regularizers, AdamW training and
//! Recall@K / RSUM evaluation.

pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod predictor;
pub mod retrieval;
pub mod similarity;
pub mod tensor;
pub mod trainer;

pub use config::RunConfig;
pub use io::Checkpoint;
pub use error::{Error, Result};
pub use similarity::{EmbeddingSet, SimilarityConfig, SimilarityKind};
pub use tensor::{Matrix, Tape, Var};
