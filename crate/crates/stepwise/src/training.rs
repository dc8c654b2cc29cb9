//! Per-task supervised training: smoothed cross-entropy loss, random-trim
//! augmentation and an Adam loop over whole sequences.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;
use crate::tcn::{CausalTcnModel, FeatureSequence, ModelConfig, StageOutput};
use crate::{Result, Scalar, StepwiseError};

/// Features plus per-frame class ids (`0` is background).
#[derive(Debug, Clone)]
pub struct LabeledSequence<S> {
    pub features: FeatureSequence<S>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> LabeledSequence<S> {
    pub fn new(features: FeatureSequence<S>, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.num_frames() {
            return Err(StepwiseError::DimMismatch {
                expected: features.num_frames(),
                actual: labels.len(),
                context: "LabeledSequence labels",
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the temporal smoothing term.
    pub lambda: f64,
    pub epochs: usize,
    /// Sequences per optimizer step; gradients are averaged.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Trim lengths are drawn uniformly from this fraction range of `T`.
    pub trim_range: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            epochs: 30,
            batch_size: 4,
            learning_rate: 5e-4,
            seed: 0,
            trim_range: (0.5, 1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.trim_range;
        if self.lambda < 0.0 {
            return Err(StepwiseError::InvalidArgument("lambda must be >= 0".into()));
        }
        if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
            return Err(StepwiseError::InvalidArgument(format!(
                "trim range must lie in (0,1], got ({lo}, {hi})"
            )));
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(StepwiseError::InvalidArgument(
                "batch size and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

const LOG_CLAMP: f64 = 1e-12;

/// Loss value, gradients with respect to each stage's probabilities, and a
/// flag noting whether any probability had to be clamped inside the log.
#[derive(Debug, Clone)]
pub struct LossResult<S> {
    pub value: S,
    pub grad_probs: Vec<Matrix<S>>,
    pub clamped: bool,
}

/// Sum over stages and frames of cross-entropy plus `lambda` times the squared
/// frame-to-frame probability differences; the frame before the first counts
/// as all-zero probabilities.
pub fn loss<S: Scalar>(
    outputs: &[StageOutput<S>],
    labels: &[usize],
    lambda: S,
) -> Result<LossResult<S>> {
    let clamp = S::from_f64_lossy(LOG_CLAMP);
    let two = S::from_f64_lossy(2.0);
    let mut value = S::zero();
    let mut clamped = false;
    let mut grad_probs = Vec::with_capacity(outputs.len());
    for out in outputs {
        let probs = &out.probabilities;
        let t_len = probs.rows();
        let classes = probs.cols();
        if labels.len() != t_len {
            return Err(StepwiseError::DimMismatch {
                expected: t_len,
                actual: labels.len(),
                context: "loss labels",
            });
        }
        let mut grad = Matrix::zeros(t_len, classes);
        for (t, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(StepwiseError::InvalidArgument(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            let mut p = probs.get(t, y);
            if p < clamp {
                p = clamp;
                clamped = true;
            }
            value -= p.ln();
            grad.add_assign_at(t, y, -S::one() / p);
            for k in 0..classes {
                let prev = if t > 0 { probs.get(t - 1, k) } else { S::zero() };
                let d = probs.get(t, k) - prev;
                value += lambda * d * d;
                grad.add_assign_at(t, k, two * lambda * d);
                if t > 0 {
                    grad.add_assign_at(t - 1, k, -(two * lambda * d));
                }
            }
        }
        grad_probs.push(grad);
    }
    Ok(LossResult {
        value,
        grad_probs,
        clamped,
    })
}

/// Contiguous random sub-sequence; features and labels trimmed identically.
pub fn random_trim<S: Scalar, R: Rng>(
    seq: &LabeledSequence<S>,
    trim_range: (f64, f64),
    rng: &mut R,
) -> LabeledSequence<S> {
    let t_len = seq.len();
    if t_len < 2 {
        return seq.clone();
    }
    let frac = if trim_range.0 >= trim_range.1 {
        trim_range.0
    } else {
        Uniform::new(trim_range.0, trim_range.1).sample(rng)
    };
    let len = ((frac * t_len as f64).round() as usize).clamp(1, t_len);
    let start = rng.gen_range(0..=t_len - len);
    let rows: Vec<Vec<S>> = (start..start + len)
        .map(|t| seq.features.data.row(t).to_vec())
        .collect();
    LabeledSequence {
        features: FeatureSequence {
            data: Matrix::from_rows(&rows).expect("trim rows"),
            frame_rate: seq.features.frame_rate,
        },
        labels: seq.labels[start..start + len].to_vec(),
    }
}

struct Adam<S> {
    m: CausalTcnModel<S>,
    v: CausalTcnModel<S>,
    step: u64,
    lr: f64,
}

impl<S: Scalar> Adam<S> {
    fn new(config: ModelConfig, lr: f64) -> Result<Self> {
        Ok(Self {
            m: CausalTcnModel::zeros(config)?,
            v: CausalTcnModel::zeros(config)?,
            step: 0,
            lr,
        })
    }

    fn update(&mut self, model: &mut CausalTcnModel<S>, grads: &CausalTcnModel<S>) {
        self.step += 1;
        let b1 = S::from_f64_lossy(0.9);
        let b2 = S::from_f64_lossy(0.999);
        let eps = S::from_f64_lossy(1e-8);
        let lr = S::from_f64_lossy(self.lr);
        let c1 = S::from_f64_lossy(1.0 - 0.9f64.powi(self.step as i32));
        let c2 = S::from_f64_lossy(1.0 - 0.999f64.powi(self.step as i32));
        let one = S::one();
        let mut params = model.param_slices_mut();
        let grads = grads.param_slices();
        let mut ms = self.m.param_slices_mut();
        let mut vs = self.v.param_slices_mut();
        for idx in 0..params.len() {
            let p = &mut params[idx];
            let g = grads[idx];
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Trains one model on the given sequences. Returns the model and the
/// per-epoch mean of the per-frame loss. Deterministic for a fixed seed.
pub fn train_task<S: Scalar>(
    dataset: &[LabeledSequence<S>],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(CausalTcnModel<S>, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(StepwiseError::InvalidArgument("empty training set".into()));
    }
    for seq in dataset {
        if seq.features.dim() != model_cfg.in_dim {
            return Err(StepwiseError::DimMismatch {
                expected: model_cfg.in_dim,
                actual: seq.features.dim(),
                context: "train_task feature dim",
            });
        }
        if let Some(&y) = seq.labels.iter().find(|&&y| y >= model_cfg.num_classes) {
            return Err(StepwiseError::InvalidArgument(format!(
                "label {y} out of range for {} classes",
                model_cfg.num_classes
            )));
        }
    }
    let mut model = CausalTcnModel::init(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(model_cfg, cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let lambda = S::from_f64_lossy(cfg.lambda);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for batch in dataset.chunks(cfg.batch_size) {
            let mut acc: Option<CausalTcnModel<S>> = None;
            for seq in batch {
                let trimmed = random_trim(seq, cfg.trim_range, &mut rng);
                let (outputs, cache) = model.forward_cached(&trimmed.features)?;
                let l = loss(&outputs, &trimmed.labels, lambda)?;
                let lval = l.value.to_f64_lossy();
                if !lval.is_finite() {
                    return Err(StepwiseError::Diverged { epoch });
                }
                epoch_loss += lval / trimmed.len() as f64;
                let grads = model.backward(&cache, &l.grad_probs)?;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (dst, src) in a.param_slices_mut().into_iter().zip(grads.param_slices()) {
                            for (d, s) in dst.iter_mut().zip(src.iter()) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
            if let Some(mut grads) = acc {
                let scale = S::from_f64_lossy(1.0 / batch.len() as f64);
                for slice in grads.param_slices_mut() {
                    for g in slice.iter_mut() {
                        *g *= scale;
                    }
                }
                adam.update(&mut model, &grads);
            }
        }
        trace.push(epoch_loss / dataset.len() as f64);
    }
    Ok((model, trace))
}

/// Fraction of frames whose final-stage argmax equals the label.
pub fn frame_accuracy<S: Scalar>(model: &CausalTcnModel<S>, seq: &LabeledSequence<S>) -> Result<f64> {
    let outputs = model.forward(&seq.features)?;
    let probs = &outputs.last().unwrap().probabilities;
    let mut correct = 0usize;
    for (t, &y) in seq.labels.iter().enumerate() {
        let row = probs.row(t);
        let argmax = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        if argmax == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / seq.len() as f64)
}

/// Writes the per-epoch loss trace as `epoch,mean_loss` CSV.
pub fn write_loss_trace<W: Write>(mut w: W, trace: &[f64]) -> Result<()> {
    writeln!(w, "epoch,mean_loss")?;
    for (epoch, loss) in trace.iter().enumerate() {
        writeln!(w, "{},{:.9}", epoch + 1, loss)?;
    }
    Ok(())
}

/// Plain-text `key=value` configuration; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| StepwiseError::Parse {
            line: idx + 1,
            message: format!("expected key=value, got {line:?}"),
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn load_config_file(path: &Path) -> Result<HashMap<String, String>> {
    parse_key_values(&std::fs::read_to_string(path)?)
}

impl TrainConfig {
    /// Applies recognized `key=value` entries over the current values.
    pub fn apply_map(&mut self, map: &HashMap<String, String>) -> Result<()> {
        fn get<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
            match map.get(key) {
                None => Ok(None),
                Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                    StepwiseError::InvalidArgument(format!("bad value for {key}: {v:?}"))
                }),
            }
        }
        if let Some(v) = get(map, "lambda")? {
            self.lambda = v;
        }
        if let Some(v) = get(map, "epochs")? {
            self.epochs = v;
        }
        if let Some(v) = get(map, "batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = get(map, "learning_rate")? {
            self.learning_rate = v;
        }
        if let Some(v) = get(map, "seed")? {
            self.seed = v;
        }
        if let Some(v) = get(map, "trim_min")? {
            self.trim_range.0 = v;
        }
        if let Some(v) = get(map, "trim_max")? {
            self.trim_range.1 = v;
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcn::ModelConfig;

    fn one_hot_outputs(n_stages: usize, t_len: usize, classes: usize, hot: usize) -> Vec<StageOutput<f64>> {
        let mut probs = Matrix::zeros(t_len, classes);
        for t in 0..t_len {
            probs.set(t, hot, 1.0);
        }
        (0..n_stages)
            .map(|_| StageOutput {
                logits: Matrix::zeros(t_len, classes),
                probabilities: probs.clone(),
            })
            .collect()
    }

    #[test]
    fn perfect_one_hot_costs_n_lambda() {
        // Cross-entropy is zero; the smoothing term only fires at t = 1 where
        // the previous-frame probabilities count as zero.
        let lambda = 0.37;
        for t_len in [1, 2, 7] {
            let outputs = one_hot_outputs(3, t_len, 4, 2);
            let labels = vec![2; t_len];
            let l = loss(&outputs, &labels, lambda).unwrap();
            assert!((l.value - 3.0 * lambda).abs() < 1e-12, "T={t_len}");
        }
    }

    #[test]
    fn uniform_predictions_with_zero_lambda() {
        let t_len = 6;
        let classes = 5;
        let mut probs = Matrix::zeros(t_len, classes);
        for t in 0..t_len {
            for k in 0..classes {
                probs.set(t, k, 1.0 / classes as f64);
            }
        }
        let outputs: Vec<StageOutput<f64>> = (0..2)
            .map(|_| StageOutput {
                logits: Matrix::zeros(t_len, classes),
                probabilities: probs.clone(),
            })
            .collect();
        let l = loss(&outputs, &vec![0; t_len], 0.0).unwrap();
        let expect = 2.0 * t_len as f64 * (classes as f64).ln();
        assert!((l.value - expect).abs() < 1e-12);
    }

    /// Direct double-loop evaluation, independent of the implementation path.
    fn oracle_loss(outputs: &[StageOutput<f64>], labels: &[usize], lambda: f64) -> f64 {
        let mut total = 0.0;
        for out in outputs {
            let p = &out.probabilities;
            for t in 0..p.rows() {
                total -= p.get(t, labels[t]).max(1e-12).ln();
                for k in 0..p.cols() {
                    let prev = if t == 0 { 0.0 } else { p.get(t - 1, k) };
                    total += lambda * (p.get(t, k) - prev).powi(2);
                }
            }
        }
        total
    }

    #[test]
    fn loss_matches_double_loop_oracle() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (n, t_len, classes) = (2, 5, 3);
        let dist = Uniform::new(0.05f64, 1.0);
        let outputs: Vec<StageOutput<f64>> = (0..n)
            .map(|_| {
                let mut probs = Matrix::zeros(t_len, classes);
                for t in 0..t_len {
                    let raw: Vec<f64> = (0..classes).map(|_| dist.sample(&mut rng)).collect();
                    let sum: f64 = raw.iter().sum();
                    for k in 0..classes {
                        probs.set(t, k, raw[k] / sum);
                    }
                }
                StageOutput {
                    logits: Matrix::zeros(t_len, classes),
                    probabilities: probs,
                }
            })
            .collect();
        let labels: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..classes)).collect();
        let lambda = 0.15;
        let l = loss(&outputs, &labels, lambda).unwrap();
        assert!((l.value - oracle_loss(&outputs, &labels, lambda)).abs() < 1e-12);
        assert!(l.value >= 0.0);
    }

    #[test]
    fn smoothing_term_linear_in_lambda() {
        let outputs = one_hot_outputs(2, 4, 3, 1);
        let labels = vec![1; 4];
        let l1 = loss(&outputs, &labels, 0.5).unwrap().value;
        let l2 = loss(&outputs, &labels, 1.0).unwrap().value;
        assert!(l2 >= l1);
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped_and_flagged() {
        let mut probs = Matrix::zeros(1, 2);
        probs.set(0, 1, 1.0);
        let outputs = vec![StageOutput {
            logits: Matrix::zeros(1, 2),
            probabilities: probs,
        }];
        let l = loss(&outputs, &[0], 0.0f64).unwrap();
        assert!(l.clamped);
        assert!(l.value.is_finite());
    }

    fn toy_sequence(t_len: usize, dim: usize, label: usize, seed: u64) -> LabeledSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0);
        let rows: Vec<Vec<f64>> = (0..t_len)
            .map(|_| (0..dim).map(|_| dist.sample(&mut rng)).collect())
            .collect();
        LabeledSequence::new(
            FeatureSequence::new(Matrix::from_rows(&rows).unwrap(), 30.0).unwrap(),
            vec![label; t_len],
        )
        .unwrap()
    }

    #[test]
    fn full_trim_fraction_is_identity() {
        let seq = toy_sequence(20, 3, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trimmed = random_trim(&seq, (1.0, 1.0), &mut rng);
        assert_eq!(trimmed.labels, seq.labels);
        assert_eq!(trimmed.features.data, seq.features.data);
    }

    #[test]
    fn trim_is_reproducible_for_fixed_seed() {
        let seq = toy_sequence(50, 2, 0, 6);
        let a = random_trim(&seq, (0.3, 0.9), &mut ChaCha8Rng::seed_from_u64(9));
        let b = random_trim(&seq, (0.3, 0.9), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.features.data, b.features.data);
    }

    #[test]
    fn trim_start_positions_are_uniform() {
        // Fixed trim fraction 0.5 on T=100 gives starts in 0..=50; chi-square
        // over the 51 cells against the uniform null, alpha = 0.01.
        let seq = toy_sequence(100, 1, 0, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let draws = 10_000;
        let mut counts = vec![0usize; 51];
        for _ in 0..draws {
            let t = random_trim(&seq, (0.5, 0.5), &mut rng);
            assert_eq!(t.len(), 50);
            // Recover the start from the first label row's feature values.
            let first = t.features.data.row(0);
            let start = (0..51)
                .find(|&s| seq.features.data.row(s) == first)
                .expect("trim must be a contiguous slice");
            counts[start] += 1;
        }
        let expected = draws as f64 / 51.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // Critical value for df = 50 at the 0.01 level.
        assert!(chi2 < 76.154, "chi2 = {chi2}");
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let seq = toy_sequence(10, 3, 1, 1);
        let model_cfg = ModelConfig {
            num_stages: 1,
            layers_per_stage: 1,
            hidden_dim: 3,
            num_classes: 2,
            in_dim: 3,
        };
        let cfg = TrainConfig {
            epochs: 0,
            seed: 21,
            ..TrainConfig::default()
        };
        let (model, trace) = train_task(&[seq], model_cfg, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(model, CausalTcnModel::init(model_cfg, 21).unwrap());
    }

    #[test]
    fn constant_label_sequence_is_learned() {
        let seq = toy_sequence(30, 4, 1, 33);
        let model_cfg = ModelConfig {
            num_stages: 1,
            layers_per_stage: 2,
            hidden_dim: 8,
            num_classes: 3,
            in_dim: 4,
        };
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e-2,
            seed: 2,
            trim_range: (1.0, 1.0),
            ..TrainConfig::default()
        };
        let (model, trace) = train_task(std::slice::from_ref(&seq), model_cfg, &cfg).unwrap();
        assert_eq!(trace.len(), 50);
        assert_eq!(frame_accuracy(&model, &seq).unwrap(), 1.0);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = vec![toy_sequence(12, 3, 1, 8), toy_sequence(15, 3, 2, 9)];
        let model_cfg = ModelConfig {
            num_stages: 2,
            layers_per_stage: 2,
            hidden_dim: 4,
            num_classes: 3,
            in_dim: 3,
        };
        let cfg = TrainConfig {
            epochs: 3,
            seed: 44,
            ..TrainConfig::default()
        };
        let (m1, t1) = train_task(&data, model_cfg, &cfg).unwrap();
        let (m2, t2) = train_task(&data, model_cfg, &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn key_value_parsing() {
        let map = parse_key_values("# comment\nlambda = 0.25\n\nepochs=7\n").unwrap();
        let mut cfg = TrainConfig::default();
        cfg.apply_map(&map).unwrap();
        assert_eq!(cfg.lambda, 0.25);
        assert_eq!(cfg.epochs, 7);
        assert!(parse_key_values("no equals sign").is_err());
    }

    #[test]
    fn loss_trace_csv_format() {
        let mut buf = Vec::new();
        write_loss_trace(&mut buf, &[1.5, 0.25]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,mean_loss\n1,1.500000000\n2,0.250000000\n");
    }
}
