//! Online temporal action segmentation for step-structured procedures.
//!
//! The pipeline: per-frame feature sequences are fed through a multi-stage
//! causal temporal convolutional network ([`tcn`]), trained per task with a
//! smoothed cross-entropy loss ([`training`]). At inference time frames stream
//! through a bounded buffer ([`online`]), logits are penalized against the
//! task's canonical step order, and a rule-based state machine
//! ([`state_machine`]) turns the smoothed probabilities into
//! unobserved/current/done step states. Those states are serialized as belief
//! CSV files ([`belief`]) and scored as an action detection problem with
//! IOU-matched average precision ([`eval`]). [`synth`] generates seeded
//! benchmark episodes calibrated to published task statistics.

pub mod belief;
pub mod eval;
pub mod matrix;
pub mod online;
pub mod pipeline;
pub mod state_machine;
pub mod synth;
pub mod tcn;
pub mod training;
pub mod windowing;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use thiserror::Error;

/// Scalar type the numeric core is generic over.
///
/// Implemented for `f32` and `f64`; training and the acceptance tolerances
/// assume `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + Sum
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Concrete aliases for the common instantiations.
pub type Matrix32 = matrix::Matrix<f32>;
pub type Matrix64 = matrix::Matrix<f64>;
pub type Features32 = tcn::FeatureSequence<f32>;
pub type Features64 = tcn::FeatureSequence<f64>;
pub type Model32 = tcn::CausalTcnModel<f32>;
pub type Model64 = tcn::CausalTcnModel<f64>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum StepwiseError {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("training diverged at epoch {epoch}: loss is non-finite")]
    Diverged { epoch: usize },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StepwiseError>;

/// Ordered canonical step list for one task.
///
/// Class ids are `0` for background/no-step and `1..=num_steps` for the real
/// steps in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDefinition {
    pub code: String,
    pub steps: Vec<String>,
}

impl TaskDefinition {
    pub fn new(code: impl Into<String>, steps: Vec<String>) -> Self {
        Self {
            code: code.into(),
            steps,
        }
    }

    /// Task with numbered step names, e.g. `step_1 .. step_n`.
    pub fn numbered(code: impl Into<String>, num_steps: usize) -> Self {
        let steps = (1..=num_steps).map(|i| format!("step_{i}")).collect();
        Self::new(code, steps)
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Step classes plus the background class.
    pub fn num_classes(&self) -> usize {
        self.steps.len() + 1
    }
}
