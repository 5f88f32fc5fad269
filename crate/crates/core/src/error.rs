use crate::types::{ItemId, Modality};
use thiserror::Error;

/// Errors surfaced by every part of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has (near) zero norm")]
    ZeroVector(usize),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("store is not normalized")]
    NotNormalized,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("pool for {0} is empty")]
    EmptyPool(Modality),

    #[error("degenerate batch: {0} rows (need at least 2)")]
    DegenerateBatch(usize),
    #[error("no temperature for pair ({0}, {1})")]
    UnknownPair(Modality, Modality),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("missing {1} embedding for item {0}")]
    MissingEmbedding(ItemId, Modality),

    #[error("no ground truth for query {0}")]
    MissingGroundTruth(ItemId),
    #[error("class count mismatch: {0}")]
    ClassCountMismatch(String),
    #[error("class {0} has no positive items")]
    EmptyClass(usize),
    #[error("fewer than two classes shared between modalities")]
    NoSharedClasses,

    #[error("could not place concept {0} after 10000 attempts")]
    InfeasibleConcepts(usize),

    #[error("project {0} already exists with different inputs")]
    DuplicateProject(String),
    #[error("unknown project {0}")]
    UnknownProject(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("candidate {candidate} does not belong to task {task}")]
    ForeignCandidate { task: String, candidate: ItemId },
    #[error("conflicting duplicate label for task {task}, candidate {candidate}, annotator {annotator}")]
    DuplicateLabel {
        task: String,
        candidate: ItemId,
        annotator: String,
    },
    #[error("task {0} already has its required annotators")]
    TaskSaturated(String),
}

pub type Result<T> = std::result::Result<T, Error>;
