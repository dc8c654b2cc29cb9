//! Rule-based step-state tracker over smoothed probability vectors.

use std::collections::VecDeque;
use std::fmt;

use crate::belief::BeliefRecord;
use crate::{Result, StepwiseError};

/// Lifecycle of one task step. Transitions only ever move forward:
/// unobserved, then current, then done.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StepState {
    Unobserved,
    Current,
    Done,
}

impl StepState {
    pub fn as_str(self) -> &'static str {
        match self {
            StepState::Unobserved => "unobserved",
            StepState::Current => "current",
            StepState::Done => "done",
        }
    }

    /// Case-insensitive parse of the wire literal.
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unobserved" => Some(StepState::Unobserved),
            "current" => Some(StepState::Current),
            "done" => Some(StepState::Done),
            _ => None,
        }
    }
}

impl fmt::Display for StepState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// States plus the smoothed confidence vector after one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    /// Per real step, index 0 holding step 1.
    pub states: Vec<StepState>,
    /// Median-smoothed, renormalized class probabilities (background first).
    pub confidence: Vec<f64>,
}

pub const DEFAULT_MEDIAN_WINDOW: usize = 3;

/// Tracks per-step states from a stream of probability vectors.
///
/// Each update medians the last `p` vectors elementwise, renormalizes, and
/// promotes the argmax step to current (previous current steps become done).
/// A background argmax freezes the states, as does an argmax on an already
/// done step: states are monotone and never demoted.
#[derive(Debug, Clone)]
pub struct StateMachine {
    states: Vec<StepState>,
    history: VecDeque<Vec<f64>>,
    smoothed: Vec<f64>,
    window: usize,
}

impl StateMachine {
    pub fn new(num_steps: usize, window: usize) -> Result<Self> {
        if num_steps == 0 || window == 0 {
            return Err(StepwiseError::InvalidArgument(
                "state machine needs at least one step and a positive window".into(),
            ));
        }
        Ok(Self {
            states: vec![StepState::Unobserved; num_steps],
            history: VecDeque::with_capacity(window),
            smoothed: vec![0.0; num_steps + 1],
            window,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[StepState] {
        &self.states
    }

    pub fn update(&mut self, probs: &[f64]) -> Result<StateSnapshot> {
        let classes = self.states.len() + 1;
        if probs.len() != classes {
            return Err(StepwiseError::DimMismatch {
                expected: classes,
                actual: probs.len(),
                context: "StateMachine::update",
            });
        }
        let sum: f64 = probs.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
            return Err(StepwiseError::InvalidArgument(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        self.history.push_back(probs.to_vec());
        if self.history.len() > self.window {
            self.history.pop_front();
        }

        // Elementwise median over the retained vectors, then renormalize.
        let mut smoothed = vec![0.0; classes];
        let mut column = Vec::with_capacity(self.history.len());
        for (k, s) in smoothed.iter_mut().enumerate() {
            column.clear();
            column.extend(self.history.iter().map(|v| v[k]));
            column.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = column.len();
            *s = if n % 2 == 1 {
                column[n / 2]
            } else {
                0.5 * (column[n / 2 - 1] + column[n / 2])
            };
        }
        let norm: f64 = smoothed.iter().sum();
        if norm > 0.0 {
            for s in smoothed.iter_mut() {
                *s /= norm;
            }
        }

        let argmax = (0..classes)
            .max_by(|&a, &b| smoothed[a].partial_cmp(&smoothed[b]).unwrap())
            .unwrap();
        if argmax != 0 {
            let idx = argmax - 1;
            if self.states[idx] == StepState::Unobserved {
                for s in self.states.iter_mut() {
                    if *s == StepState::Current {
                        *s = StepState::Done;
                    }
                }
                self.states[idx] = StepState::Current;
            }
            // A current argmax leaves everything unchanged; a done argmax is
            // never re-promoted.
        }
        self.smoothed = smoothed.clone();
        Ok(StateSnapshot {
            states: self.states.clone(),
            confidence: smoothed,
        })
    }

    /// One belief record per real step at the given timestamp.
    pub fn emit_states(&self, task_code: &str, timestamp: f64) -> Result<Vec<BeliefRecord>> {
        (0..self.states.len())
            .map(|idx| {
                BeliefRecord::new(
                    task_code,
                    (idx + 1) as u32,
                    self.states[idx],
                    self.smoothed[idx + 1].clamp(0.0, 1.0),
                    timestamp,
                )
            })
            .collect()
    }
}
