//! Streaming inference: bounded frame buffer, per-frame logits, canonical
//! order penalty on the logits and the final softmax.

use std::collections::VecDeque;

use crate::matrix::Matrix;
use crate::tcn::{softmax_row, CausalTcnModel, FeatureSequence, KERNEL_WIDTH};
use crate::{Result, Scalar, StepwiseError};

pub const DEFAULT_BUFFER_CAPACITY: usize = 1200;

/// Sliding window over the most recent frames; oldest frames evict first.
#[derive(Debug, Clone)]
pub struct FrameBuffer<S> {
    capacity: usize,
    dim: usize,
    start_index: u64,
    frames: VecDeque<Vec<S>>,
}

impl<S: Scalar> FrameBuffer<S> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(StepwiseError::InvalidArgument(
                "buffer capacity and feature dim must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            dim,
            start_index: 0,
            frames: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push_frame(&mut self, feature: &[S]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(StepwiseError::DimMismatch {
                expected: self.dim,
                actual: feature.len(),
                context: "push_frame",
            });
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(StepwiseError::NonFinite("pushed frame"));
        }
        self.frames.push_back(feature.to_vec());
        if self.frames.len() > self.capacity {
            self.frames.pop_front();
            self.start_index += 1;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Absolute index of the oldest retained frame.
    pub fn oldest_index(&self) -> u64 {
        self.start_index
    }

    pub fn frames(&self) -> impl Iterator<Item = &[S]> {
        self.frames.iter().map(Vec::as_slice)
    }
}

/// Final-stage raw logits for the newest buffered frame.
///
/// Semantically this runs the model over the whole buffered window; only the
/// trailing `receptive_field` frames can influence the newest frame (anything
/// earlier is equivalent to the zero left-padding), so the computation is
/// restricted to that suffix.
pub fn infer_current<S: Scalar>(buffer: &FrameBuffer<S>, model: &CausalTcnModel<S>) -> Result<Vec<S>> {
    if buffer.is_empty() {
        return Err(StepwiseError::InvalidArgument("empty frame buffer".into()));
    }
    if buffer.dim() != model.config.in_dim {
        return Err(StepwiseError::DimMismatch {
            expected: model.config.in_dim,
            actual: buffer.dim(),
            context: "infer_current",
        });
    }
    let rf = model.receptive_field();
    let skip = buffer.len().saturating_sub(rf);
    let rows: Vec<Vec<S>> = buffer.frames().skip(skip).map(<[S]>::to_vec).collect();
    let features = FeatureSequence {
        data: Matrix::from_rows(&rows)?,
        frame_rate: 1.0,
    };
    let outputs = model.forward(&features)?;
    let last = outputs.last().unwrap();
    Ok(last.logits.row(last.logits.rows() - 1).to_vec())
}

/// Monotone per-step completion flags plus the penalty coefficient.
#[derive(Debug, Clone)]
pub struct ProgressTracker {
    done: Vec<bool>,
    alpha: f64,
}

impl ProgressTracker {
    pub fn new(num_steps: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(StepwiseError::InvalidArgument(format!(
                "penalty coefficient must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            done: vec![false; num_steps],
            alpha,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.done.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Marks a step (1-based canonical id) completed. Flags never reset.
    pub fn mark_done(&mut self, step_id: usize) -> Result<()> {
        if step_id == 0 || step_id > self.done.len() {
            return Err(StepwiseError::InvalidArgument(format!(
                "step id {step_id} out of range 1..={}",
                self.done.len()
            )));
        }
        self.done[step_id - 1] = true;
        Ok(())
    }

    pub fn is_done(&self, step_id: usize) -> bool {
        self.done[step_id - 1]
    }

    /// True when all predecessors of `step_id` are complete and all
    /// successors are incomplete.
    pub fn is_frontier(&self, step_id: usize) -> bool {
        let pos = step_id - 1;
        self.done[..pos].iter().all(|&d| d) && self.done[pos + 1..].iter().all(|&d| !d)
    }
}

/// Subtracts `alpha * (incomplete predecessors + completed successors)` from
/// every real action's logit; the background class (index 0) is exempt.
pub fn apply_ordering_penalty<S: Scalar>(logits: &[S], tracker: &ProgressTracker) -> Result<Vec<S>> {
    let num_steps = tracker.num_steps();
    if logits.len() != num_steps + 1 {
        return Err(StepwiseError::DimMismatch {
            expected: num_steps + 1,
            actual: logits.len(),
            context: "apply_ordering_penalty",
        });
    }
    let mut out = logits.to_vec();
    for step in 1..=num_steps {
        let pos = step - 1;
        let mut count = 0usize;
        for a in 0..pos {
            if !tracker.done[a] {
                count += 1;
            }
        }
        for a in pos + 1..num_steps {
            if tracker.done[a] {
                count += 1;
            }
        }
        out[step] -= S::from_f64_lossy(tracker.alpha * count as f64);
    }
    Ok(out)
}

/// Softmax over the (penalized) logits.
pub fn finalize_probabilities<S: Scalar>(logits: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); logits.len()];
    softmax_row(logits, &mut out);
    out
}

/// Incremental streaming runner.
///
/// Keeps per-stage activation histories so each pushed frame costs one frame's
/// worth of convolution work. With the buffer capacity at least the model's
/// receptive field the emitted logits are bit-identical to running the full
/// offline forward pass and reading the newest frame.
pub struct StreamingSession<'m, S> {
    model: &'m CausalTcnModel<S>,
    buffer: FrameBuffer<S>,
    /// Per stage, per depth (input projection output plus one entry per
    /// layer), the retained recent activations.
    hidden: Vec<Vec<VecDeque<Vec<S>>>>,
    keep: usize,
}

impl<'m, S: Scalar> StreamingSession<'m, S> {
    pub fn new(model: &'m CausalTcnModel<S>, capacity: usize) -> Result<Self> {
        let rf = model.receptive_field();
        if capacity < rf {
            return Err(StepwiseError::InvalidArgument(format!(
                "buffer capacity {capacity} is below the receptive field {rf}; \
                 incremental streaming would diverge from the buffered window"
            )));
        }
        let buffer = FrameBuffer::new(capacity, model.config.in_dim)?;
        let layers = model.config.layers_per_stage;
        let hidden = (0..model.config.num_stages)
            .map(|_| (0..=layers).map(|_| VecDeque::new()).collect())
            .collect();
        // Deepest lookback of any layer is 2 * 2^(L-1) frames.
        let keep = 2 * (1usize << (layers - 1)) + 1;
        Ok(Self {
            model,
            buffer,
            hidden,
            keep,
        })
    }

    pub fn buffer(&self) -> &FrameBuffer<S> {
        &self.buffer
    }

    /// Ingests one frame; returns the final-stage logits at that frame.
    pub fn push(&mut self, feature: &[S]) -> Result<Vec<S>> {
        self.buffer.push_frame(feature)?;
        let hidden_dim = self.model.config.hidden_dim;
        let mut input = feature.to_vec();
        let mut logits = Vec::new();
        for (stage, caches) in self.model.stages.iter().zip(self.hidden.iter_mut()) {
            let mut h = vec![S::zero(); hidden_dim];
            stage.input_proj.apply_frame(&input, &mut h);
            push_trimmed(&mut caches[0], h, self.keep);
            for (l, layer) in stage.layers.iter().enumerate() {
                let d = layer.conv.dilation;
                let deque = &caches[l];
                let newest = deque.len() - 1;
                let taps: [Option<&[S]>; KERNEL_WIDTH] = std::array::from_fn(|k| {
                    let back = (KERNEL_WIDTH - 1 - k) * d;
                    newest.checked_sub(back).map(|idx| deque[idx].as_slice())
                });
                let mut conv = vec![S::zero(); hidden_dim];
                layer.conv.apply_frame(taps, &mut conv);
                for v in conv.iter_mut() {
                    *v = v.max(S::zero());
                }
                let mut u = vec![S::zero(); hidden_dim];
                layer.out.apply_frame(&conv, &mut u);
                let prev = &deque[newest];
                let next: Vec<S> = prev.iter().zip(u.iter()).map(|(&a, &b)| a + b).collect();
                push_trimmed(&mut caches[l + 1], next, self.keep);
            }
            let last = caches.last().unwrap().back().unwrap();
            let mut z = vec![S::zero(); self.model.config.num_classes];
            stage.classifier.apply_frame(last, &mut z);
            let mut probs = vec![S::zero(); z.len()];
            softmax_row(&z, &mut probs);
            input = probs;
            logits = z;
        }
        Ok(logits)
    }
}

fn push_trimmed<S>(deque: &mut VecDeque<Vec<S>>, value: Vec<S>, keep: usize) {
    deque.push_back(value);
    while deque.len() > keep {
        deque.pop_front();
    }
}
