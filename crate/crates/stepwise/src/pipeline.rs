//! End-to-end orchestration: generate episodes, train one model per task,
//! stream evaluation episodes through online inference plus the state
//! machine, and score the resulting segments.

use crate::belief::BeliefRecord;
use crate::eval::{self, ActionSegment, EvalReport};
use crate::online::{apply_ordering_penalty, finalize_probabilities, ProgressTracker, StreamingSession};
use crate::state_machine::{StateMachine, StepState, DEFAULT_MEDIAN_WINDOW};
use crate::synth::{TaskGenerator, TaskProfile};
use crate::tcn::{CausalTcnModel, FeatureSequence, ModelConfig};
use crate::training::{train_task, LabeledSequence, TrainConfig};
use crate::{Result, StepwiseError, TaskDefinition};

/// Everything the end-to-end benchmark needs. The defaults are sized for a
/// commodity CPU: a deliberately small two-stage model is enough for the
/// well-separated synthetic features.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub separation: f64,
    pub train_episodes: u64,
    pub eval_episodes: u64,
    pub lambda: f64,
    /// Ordering-penalty coefficient.
    pub alpha: f64,
    pub num_stages: usize,
    pub layers_per_stage: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    pub median_window: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            feature_dim: 64,
            separation: 10.0,
            train_episodes: 40,
            eval_episodes: 10,
            lambda: 0.15,
            alpha: 3.0,
            num_stages: 2,
            layers_per_stage: 4,
            hidden_dim: 16,
            epochs: 6,
            batch_size: 4,
            learning_rate: 0.01,
            buffer_capacity: crate::online::DEFAULT_BUFFER_CAPACITY,
            median_window: DEFAULT_MEDIAN_WINDOW,
        }
    }
}

impl PipelineConfig {
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_stages: self.num_stages,
            layers_per_stage: self.layers_per_stage,
            hidden_dim: self.hidden_dim,
            num_classes,
            in_dim: self.feature_dim,
        }
    }

    pub fn train_config(&self, task_index: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            // Distinct init per task, stable across runs.
            seed: self.seed.wrapping_add(task_index.wrapping_mul(0x9e37)),
            ..TrainConfig::default()
        }
    }
}

/// Trains one model on the generator's first `train_episodes` episodes.
pub fn train_profile_model(
    generator: &TaskGenerator,
    cfg: &PipelineConfig,
    task_index: u64,
) -> Result<(CausalTcnModel<f64>, Vec<f64>)> {
    let mut dataset = Vec::with_capacity(cfg.train_episodes as usize);
    for idx in 0..cfg.train_episodes {
        let episode = generator.episode(idx)?;
        dataset.push(LabeledSequence::new(episode.features, episode.labels)?);
    }
    let model_cfg = cfg.model_config(generator.task().num_classes());
    train_task(&dataset, model_cfg, &cfg.train_config(task_index))
}

/// Streams one feature sequence through online inference, the ordering
/// penalty, and the state machine, emitting one belief record per step per
/// frame. Steps the state machine marks done feed the penalty's completion
/// flags for subsequent frames.
pub fn infer_episode(
    model: &CausalTcnModel<f64>,
    features: &FeatureSequence<f64>,
    task: &TaskDefinition,
    alpha: f64,
    median_window: usize,
    buffer_capacity: usize,
) -> Result<Vec<BeliefRecord>> {
    if model.config.num_classes != task.num_classes() {
        return Err(StepwiseError::DimMismatch {
            expected: task.num_classes(),
            actual: model.config.num_classes,
            context: "infer_episode class count",
        });
    }
    let mut session = StreamingSession::new(model, buffer_capacity)?;
    let mut tracker = ProgressTracker::new(task.num_steps(), alpha)?;
    let mut machine = StateMachine::new(task.num_steps(), median_window)?;
    let mut records = Vec::with_capacity(features.num_frames() * task.num_steps());
    for t in 0..features.num_frames() {
        let logits = session.push(features.data.row(t))?;
        let penalized = apply_ordering_penalty(&logits, &tracker)?;
        let probs = finalize_probabilities(&penalized);
        let snapshot = machine.update(&probs)?;
        for (idx, &state) in snapshot.states.iter().enumerate() {
            if state == StepState::Done && !tracker.is_done(idx + 1) {
                tracker.mark_done(idx + 1)?;
            }
        }
        let timestamp = t as f64 / features.frame_rate;
        records.extend(machine.emit_states(&task.code, timestamp)?);
    }
    Ok(records)
}

/// One task's pooled predictions and ground truth over all eval episodes.
pub struct TaskRun {
    pub code: String,
    pub predictions: Vec<ActionSegment>,
    pub ground_truth: Vec<ActionSegment>,
    pub warnings: Vec<String>,
    pub loss_trace: Vec<f64>,
}

/// Trains and evaluates one profile end to end.
pub fn run_profile(profile: &TaskProfile, cfg: &PipelineConfig, task_index: u64) -> Result<TaskRun> {
    let generator = TaskGenerator::new(profile, cfg.feature_dim, cfg.separation, cfg.seed)?;
    let (model, loss_trace) = train_profile_model(&generator, cfg, task_index)?;
    let mut runs = Vec::with_capacity(cfg.eval_episodes as usize);
    let mut warnings = Vec::new();
    for idx in cfg.train_episodes..cfg.train_episodes + cfg.eval_episodes {
        let episode = generator.episode(idx)?;
        let records = infer_episode(
            &model,
            &episode.features,
            generator.task(),
            cfg.alpha,
            cfg.median_window,
            cfg.buffer_capacity,
        )?;
        let extraction = eval::bin_and_extract_segments(&records)?;
        warnings.extend(
            extraction
                .warnings
                .into_iter()
                .map(|w| format!("{} episode {idx}: {w}", profile.code)),
        );
        runs.push((extraction.segments, episode.ground_truth_segments()));
    }
    let (predictions, ground_truth) = eval::pool_runs(&runs);
    Ok(TaskRun {
        code: profile.code.to_string(),
        predictions,
        ground_truth,
        warnings,
        loss_trace,
    })
}

/// The full benchmark over the given profiles.
pub struct BenchmarkResult {
    pub report: EvalReport,
    pub runs: Vec<TaskRun>,
}

pub fn run_benchmark(profiles: &[&TaskProfile], cfg: &PipelineConfig) -> Result<BenchmarkResult> {
    if profiles.is_empty() {
        return Err(StepwiseError::InvalidArgument("benchmark needs at least one profile".into()));
    }
    let mut runs = Vec::with_capacity(profiles.len());
    for (idx, profile) in profiles.iter().enumerate() {
        runs.push(run_profile(profile, cfg, idx as u64)?);
    }
    let per_task: Vec<(String, Vec<ActionSegment>, Vec<ActionSegment>)> = runs
        .iter()
        .map(|r| (r.code.clone(), r.predictions.clone(), r.ground_truth.clone()))
        .collect();
    let report = eval::build_report(&per_task)?;
    Ok(BenchmarkResult { report, runs })
}
