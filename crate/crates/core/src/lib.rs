//! Synthetic personalized-captioning world, task generation, verifiable
//! rewards and a group-relative policy-gradient trainer for a small
//! linear-softmax captioner.

pub mod error;
pub mod eval;
pub mod grpo;
pub mod policy;
pub mod primitives;
pub mod retrieval;
pub mod rewards;
pub mod seed;
pub mod synthworld;
pub mod taskgen;
pub mod vocab;

pub use error::{Error, Result};
pub use eval::{EvalConfig, EvalMode, EvalReport};
pub use grpo::{Group, GrpoConfig, TrainError, TrainLog, TrainOutcome, TrainRow};
pub use policy::{FeatureEncoder, Policy, PolicyConfig, PolicyInit, PolicyParams, Rollout};
pub use primitives::{iou, BBox, EmbeddingVector, GroundingScore};
pub use retrieval::{ConceptRecord, RetrievalIndex};
pub use rewards::{RewardBreakdown, RewardConfig, RewardEngine};
pub use synthworld::{Entity, Scene, View, World, WorldConfig};
pub use taskgen::{DatasetConfig, TaskContext, TaskKind, TaskRecord, Universe};
pub use vocab::{TokenId, TokenSequence, Vocabulary};
