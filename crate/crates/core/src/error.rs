use thiserror::Error;

use crate::taskgen::TaskKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "could not place {entities} boxes on a {width}x{height} scene after {attempts} attempts"
    )]
    Placement {
        entities: usize,
        width: u32,
        height: u32,
        attempts: usize,
    },

    #[error("scene {width}x{height} is too small for a {box_w}x{box_h} box")]
    SceneTooSmall {
        width: u32,
        height: u32,
        box_w: u32,
        box_h: u32,
    },

    #[error("name wordlist exhausted: {needed} names requested, {available} available")]
    NamesExhausted { needed: usize, available: usize },

    #[error("task needs {needed} entities but the world has {available}")]
    InsufficientEntities { needed: usize, available: usize },

    #[error("{0} reference views requested; at most 3 are allowed per query")]
    TooManyReferences(usize),

    #[error("target entity {0} is not in the scene")]
    TargetNotInScene(u32),

    #[error("expected a {expected:?} task, got {got:?}")]
    KindMismatch {
        expected: &'static str,
        got: TaskKind,
    },

    #[error("token {token} is outside the vocabulary of size {size}")]
    TokenOutOfVocab { token: u32, size: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("duplicate concept name {0:?}")]
    DuplicateName(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("retrieval mode requires a concept database")]
    MissingDatabase,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
