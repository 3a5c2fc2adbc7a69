//! Desk-scale decoder-only transformer lab for attention-ranked image-token
//! pruning.
//!
//! The crate provides a small f32 transformer engine with a KV cache
//! ([`model`]), pruning of image tokens after a chosen layer ([`pruning`]),
//! per-segment attention statistics ([`profiler`]), and an analytic FLOPs
//! model that is checked against the engine's MAC counter ([`costmodel`]).

pub mod clock;
pub mod costmodel;
pub mod model;
pub mod numkernel;
pub mod profiler;
pub mod pruning;
pub mod segments;

pub use model::{GenerateOptions, GenerationResult, InferenceMode, Model, ModelConfig};
pub use numkernel::{DenseMatrix, MacCounter};
pub use pruning::{PruneConfig, PruneCriterion, PruneDecision, StreamingMask};
pub use segments::{SegmentKind, SegmentedSequence, SequenceSpec, TokenId};

use segments::SegmentError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] numkernel::KernelError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Config(#[from] model::ConfigError),
    #[error(transparent)]
    Weights(#[from] model::WeightFormatError),
    #[error(transparent)]
    Prune(#[from] pruning::PruneError),
    #[error(transparent)]
    Profile(#[from] profiler::ProfileError),
    #[error(transparent)]
    Cost(#[from] costmodel::CostError),
    #[error("input of {len} tokens exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    Token { id: TokenId, vocab: usize },
    #[error("decode position {got} does not follow the cache (expected {expected})")]
    Position { expected: usize, got: usize },
    #[error("position {position} reaches max_seq {max_seq}")]
    LengthCap { position: usize, max_seq: usize },
    #[error("integrity check failed: {0}")]
    Integrity(String),
}

impl Error {
    /// Errors caused by bad configuration or input rather than by the engine.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Segment(_)
                | Error::Config(_)
                | Error::Prune(_)
                | Error::SequenceTooLong { .. }
                | Error::Token { .. }
                | Error::Cost(_)
        )
    }
}
