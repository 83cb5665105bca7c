use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("unknown tape node {0}")]
    UnknownNode(usize),
    #[error("non-finite environment state at step {step}")]
    NonFiniteState { step: u64 },
    #[error("non-finite {what} at rollout step {step}")]
    NonFiniteRollout { what: &'static str, step: usize },
    #[error("replay buffer holds {have} transitions, minimum fill is {need}")]
    Underfilled { have: usize, need: usize },
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("no episode long enough for segments of {len} transitions")]
    NoValidSegments { len: usize },
    #[error("segment holds {have} transitions, {need} required")]
    ShortSegment { have: usize, need: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite importance ratio at step {step}")]
    NonFiniteRatio { step: usize },
    #[error("non-finite {component} gradient at update {update}")]
    NonFiniteGradient {
        component: &'static str,
        update: u64,
    },
    #[error("non-finite {component} loss at update {update}")]
    NonFiniteLoss {
        component: &'static str,
        update: u64,
    },
    #[error("{have} samples given, at least {need} required")]
    TooFewSamples { have: usize, need: usize },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("output sink: {0}")]
    Sink(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
