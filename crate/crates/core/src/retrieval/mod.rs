//! Embedding storage, scorers and Recall@K evaluation over curated
//! galleries and over a global gallery.

mod embeddings;
mod recall;
mod scorer;

use std::path::PathBuf;

use thiserror::Error;

use crate::combiner::CombinerError;
use crate::io::DataError;

pub use embeddings::{
    sidecar_path, stub_embed, EmbeddingKind, EmbeddingTable, SidecarEntry, StubEmbedder, UNIT_TOLERANCE,
};
pub use recall::{
    evaluate_global, evaluate_global_by, rank_of, recall_at_k, recall_at_k_with, render_table, EvalReport,
    GlobalQuery, GlobalRecall, TaskRecall, CURATED_KS, GLOBAL_KS,
};
pub use scorer::{score_gallery, score_vectors, Scorer, ScorerKind};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("missing {kind} embedding for {id:?}")]
    MissingEmbedding { kind: EmbeddingKind, id: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{kind} embedding {id:?} has norm {norm}, expected 1")]
    NotUnitNorm { kind: EmbeddingKind, id: String, norm: f64 },
    #[error("duplicate {kind} embedding {id:?}")]
    DuplicateId { kind: EmbeddingKind, id: String },
    #[error("no templates to evaluate")]
    EmptyTemplateSet,
    #[error("gallery of {size} is smaller than K = {k}")]
    GalleryTooSmall { size: usize, k: usize },
    #[error("positive {0:?} is not in the gallery")]
    PositiveNotInGallery(String),
    #[error("invalid K list: {0}")]
    InvalidKs(String),
    #[error(transparent)]
    Combiner(#[from] CombinerError),
}
