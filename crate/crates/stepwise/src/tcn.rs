//! Multi-stage causal temporal convolutional network.
//!
//! Stage layout follows the MSTCN design with causal padding: a 1x1 input
//! projection, `L` dilated residual layers (width-3 causal conv with dilation
//! `2^l`, rectifier, 1x1 conv, residual add) and a 1x1 classifier head. Stage
//! 1 consumes the frame features; every later stage consumes the previous
//! stage's softmaxed class probabilities.
//!
//! All operations are pure and deterministic; gradients are computed by
//! explicit reverse-mode passes over the cached forward activations.

use std::io::{Read, Write};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;
use crate::{Result, Scalar, StepwiseError};

/// Per-frame feature matrix (`T` frames x `D` features) plus the capture rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<S> {
    pub data: Matrix<S>,
    pub frame_rate: f64,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(data: Matrix<S>, frame_rate: f64) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(StepwiseError::InvalidArgument(
                "feature sequence needs T >= 1 and D >= 1".into(),
            ));
        }
        if !data.is_finite() {
            return Err(StepwiseError::NonFinite("feature sequence"));
        }
        if !(frame_rate > 0.0) {
            return Err(StepwiseError::InvalidArgument(format!(
                "frame rate must be positive, got {frame_rate}"
            )));
        }
        Ok(Self { data, frame_rate })
    }

    pub fn num_frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// 1x1 convolution, i.e. a per-frame affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1x1<S> {
    /// `out x in` weight matrix.
    pub weight: Matrix<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Conv1x1<S> {
    fn zeros(out_ch: usize, in_ch: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_ch, in_ch),
            bias: vec![S::zero(); out_ch],
        }
    }

    pub fn out_ch(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_ch(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn apply_frame(&self, x: &[S], out: &mut [S]) {
        let in_ch = self.in_ch();
        for o in 0..self.out_ch() {
            let mut acc = self.bias[o];
            let w = self.weight.row(o);
            for i in 0..in_ch {
                acc += w[i] * x[i];
            }
            out[o] = acc;
        }
    }

    pub fn apply(&self, input: &Matrix<S>) -> Result<Matrix<S>> {
        if input.cols() != self.in_ch() {
            return Err(StepwiseError::DimMismatch {
                expected: self.in_ch(),
                actual: input.cols(),
                context: "Conv1x1::apply",
            });
        }
        let mut out = Matrix::zeros(input.rows(), self.out_ch());
        for t in 0..input.rows() {
            // Split borrow: compute into a scratch row.
            let mut row = vec![S::zero(); self.out_ch()];
            self.apply_frame(input.row(t), &mut row);
            out.row_mut(t).copy_from_slice(&row);
        }
        Ok(out)
    }
}

pub const KERNEL_WIDTH: usize = 3;

/// Width-3 dilated causal convolution.
///
/// Tap `k` of the kernel reads the input at `t - (2 - k) * dilation`; frames
/// before the sequence start are treated as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalConv<S> {
    /// Flat `[out][in][k]` kernel weights.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub dilation: usize,
}

impl<S: Scalar> CausalConv<S> {
    fn zeros(out_ch: usize, in_ch: usize, dilation: usize) -> Self {
        Self {
            weight: vec![S::zero(); out_ch * in_ch * KERNEL_WIDTH],
            bias: vec![S::zero(); out_ch],
            in_ch,
            out_ch,
            dilation,
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, k: usize) -> S {
        self.weight[(o * self.in_ch + i) * KERNEL_WIDTH + k]
    }

    /// Convolves a single output frame given its (up to three) source frames.
    /// `taps[k]` is the input row at `t - (2 - k) * dilation`, `None` when that
    /// index falls before the sequence start.
    #[inline]
    pub fn apply_frame(&self, taps: [Option<&[S]>; KERNEL_WIDTH], out: &mut [S]) {
        for o in 0..self.out_ch {
            let mut acc = self.bias[o];
            for (k, tap) in taps.iter().enumerate() {
                if let Some(x) = tap {
                    for i in 0..self.in_ch {
                        acc += self.w(o, i, k) * x[i];
                    }
                }
            }
            out[o] = acc;
        }
    }

    pub fn apply(&self, input: &Matrix<S>) -> Result<Matrix<S>> {
        if input.cols() != self.in_ch {
            return Err(StepwiseError::DimMismatch {
                expected: self.in_ch,
                actual: input.cols(),
                context: "CausalConv::apply",
            });
        }
        let t_len = input.rows();
        let mut out = Matrix::zeros(t_len, self.out_ch);
        let mut row = vec![S::zero(); self.out_ch];
        for t in 0..t_len {
            let taps = std::array::from_fn(|k| {
                let back = (KERNEL_WIDTH - 1 - k) * self.dilation;
                if t >= back {
                    Some(input.row(t - back))
                } else {
                    None
                }
            });
            self.apply_frame(taps, &mut row);
            out.row_mut(t).copy_from_slice(&row);
        }
        Ok(out)
    }
}

/// Standalone dilated causal convolution over a `T x C` input.
pub fn dilated_causal_conv<S: Scalar>(input: &Matrix<S>, conv: &CausalConv<S>) -> Result<Matrix<S>> {
    if conv.dilation == 0 {
        return Err(StepwiseError::InvalidArgument("dilation must be >= 1".into()));
    }
    if !input.is_finite() {
        return Err(StepwiseError::NonFinite("dilated_causal_conv input"));
    }
    conv.apply(input)
}

/// One dilated residual layer: causal conv, rectifier, 1x1 conv, residual add.
#[derive(Debug, Clone, PartialEq)]
pub struct DilatedResidualLayer<S> {
    pub conv: CausalConv<S>,
    pub out: Conv1x1<S>,
}

/// One refinement stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<S> {
    pub input_proj: Conv1x1<S>,
    pub layers: Vec<DilatedResidualLayer<S>>,
    pub classifier: Conv1x1<S>,
}

impl<S: Scalar> Stage<S> {
    fn zeros(in_dim: usize, hidden: usize, classes: usize, layers: usize) -> Self {
        Self {
            input_proj: Conv1x1::zeros(hidden, in_dim),
            layers: (0..layers)
                .map(|l| DilatedResidualLayer {
                    conv: CausalConv::zeros(hidden, hidden, 1 << l),
                    out: Conv1x1::zeros(hidden, hidden),
                })
                .collect(),
            classifier: Conv1x1::zeros(classes, hidden),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.input_proj.in_ch()
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub layers_per_stage: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub in_dim: usize,
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if self.num_stages < 1
            || self.layers_per_stage < 1
            || self.hidden_dim < 1
            || self.num_classes < 2
            || self.in_dim < 1
        {
            return Err(StepwiseError::InvalidArgument(format!(
                "invalid model config: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Parameters of the full multi-stage model.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalTcnModel<S> {
    pub config: ModelConfig,
    pub stages: Vec<Stage<S>>,
}

/// Per-stage logits and softmaxed probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<S> {
    pub logits: Matrix<S>,
    pub probabilities: Matrix<S>,
}

/// Numerically stable softmax of one logit row.
pub fn softmax_row<S: Scalar>(z: &[S], out: &mut [S]) {
    let mut max = z[0];
    for &v in &z[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(z.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn softmax_rows<S: Scalar>(logits: &Matrix<S>) -> Matrix<S> {
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut row = vec![S::zero(); logits.cols()];
    for t in 0..logits.rows() {
        softmax_row(logits.row(t), &mut row);
        probs.row_mut(t).copy_from_slice(&row);
    }
    probs
}

/// Forward activations retained for the backward pass.
pub struct StageCache<S> {
    input: Matrix<S>,
    /// `hidden[0]` is the input projection output; `hidden[l]` the output of
    /// residual layer `l-1`.
    hidden: Vec<Matrix<S>>,
    /// Per layer: (pre-rectifier conv output, rectified activation).
    layer_acts: Vec<(Matrix<S>, Matrix<S>)>,
    probs: Matrix<S>,
}

pub struct ModelCache<S> {
    stages: Vec<StageCache<S>>,
}

impl<S: Scalar> CausalTcnModel<S> {
    /// All-zero parameters with the stage wiring implied by `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let stages = (0..config.num_stages)
            .map(|s| {
                let in_dim = if s == 0 { config.in_dim } else { config.num_classes };
                Stage::zeros(in_dim, config.hidden_dim, config.num_classes, config.layers_per_stage)
            })
            .collect();
        Ok(Self { config, stages })
    }

    /// Seeded uniform init in `+-1/sqrt(fan_in)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |slice: &mut [S], fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-b, b);
            for v in slice.iter_mut() {
                *v = S::from_f64_lossy(dist.sample(&mut rng));
            }
        };
        for stage in &mut model.stages {
            let fan = stage.input_proj.in_ch();
            fill(stage.input_proj.weight.data_mut(), fan);
            fill(&mut stage.input_proj.bias, fan);
            for layer in &mut stage.layers {
                let fan = layer.conv.in_ch * KERNEL_WIDTH;
                fill(&mut layer.conv.weight, fan);
                fill(&mut layer.conv.bias, fan);
                let fan = layer.out.in_ch();
                fill(layer.out.weight.data_mut(), fan);
                fill(&mut layer.out.bias, fan);
            }
            let fan = stage.classifier.in_ch();
            fill(stage.classifier.weight.data_mut(), fan);
            fill(&mut stage.classifier.bias, fan);
        }
        Ok(model)
    }

    /// Frames the newest output can depend on (inclusive of itself).
    pub fn receptive_field(&self) -> usize {
        let per_stage: usize = (0..self.config.layers_per_stage)
            .map(|l| 2 * (1usize << l))
            .sum();
        1 + self.config.num_stages * per_stage
    }

    fn stage_forward_cached(&self, stage: &Stage<S>, input: &Matrix<S>) -> Result<(StageOutput<S>, StageCache<S>)> {
        if input.cols() != stage.in_dim() {
            return Err(StepwiseError::DimMismatch {
                expected: stage.in_dim(),
                actual: input.cols(),
                context: "stage_forward",
            });
        }
        let mut hidden = Vec::with_capacity(stage.layers.len() + 1);
        let mut layer_acts = Vec::with_capacity(stage.layers.len());
        hidden.push(stage.input_proj.apply(input)?);
        for layer in &stage.layers {
            let prev = hidden.last().unwrap();
            let pre = layer.conv.apply(prev)?;
            let mut act = pre.clone();
            for v in act.data_mut() {
                *v = v.max(S::zero());
            }
            let u = layer.out.apply(&act)?;
            let mut h = prev.clone();
            for (hv, uv) in h.data_mut().iter_mut().zip(u.data().iter()) {
                *hv += *uv;
            }
            hidden.push(h);
            layer_acts.push((pre, act));
        }
        let logits = stage.classifier.apply(hidden.last().unwrap())?;
        let probs = softmax_rows(&logits);
        Ok((
            StageOutput {
                logits,
                probabilities: probs.clone(),
            },
            StageCache {
                input: input.clone(),
                hidden,
                layer_acts,
                probs,
            },
        ))
    }

    /// Forward pass of one stage in isolation.
    pub fn stage_forward(&self, stage_idx: usize, input: &Matrix<S>) -> Result<StageOutput<S>> {
        let (out, _) = self.stage_forward_cached(&self.stages[stage_idx], input)?;
        Ok(out)
    }

    /// Full multi-stage forward pass.
    pub fn forward(&self, features: &FeatureSequence<S>) -> Result<Vec<StageOutput<S>>> {
        Ok(self.forward_cached(features)?.0)
    }

    pub fn forward_cached(
        &self,
        features: &FeatureSequence<S>,
    ) -> Result<(Vec<StageOutput<S>>, ModelCache<S>)> {
        if features.dim() != self.config.in_dim {
            return Err(StepwiseError::DimMismatch {
                expected: self.config.in_dim,
                actual: features.dim(),
                context: "model_forward",
            });
        }
        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut input = features.data.clone();
        for stage in &self.stages {
            let (out, cache) = self.stage_forward_cached(stage, &input)?;
            input = out.probabilities.clone();
            outputs.push(out);
            caches.push(cache);
        }
        Ok((outputs, ModelCache { stages: caches }))
    }

    /// Reverse-mode pass. `grad_probs[s]` holds the loss gradient with respect
    /// to stage `s`'s probabilities; the return value is a model-shaped
    /// container of parameter gradients.
    pub fn backward(&self, cache: &ModelCache<S>, grad_probs: &[Matrix<S>]) -> Result<CausalTcnModel<S>> {
        if grad_probs.len() != self.stages.len() {
            return Err(StepwiseError::DimMismatch {
                expected: self.stages.len(),
                actual: grad_probs.len(),
                context: "model_backward",
            });
        }
        let mut grads = CausalTcnModel::zeros(self.config)?;
        // Gradient flowing into the previous stage's probabilities through the
        // stage-chaining path.
        let mut chained: Option<Matrix<S>> = None;
        for s in (0..self.stages.len()).rev() {
            let stage = &self.stages[s];
            let sc = &cache.stages[s];
            let t_len = sc.probs.rows();
            let classes = sc.probs.cols();

            let mut g_probs = grad_probs[s].clone();
            if let Some(extra) = chained.take() {
                for (g, e) in g_probs.data_mut().iter_mut().zip(extra.data().iter()) {
                    *g += *e;
                }
            }

            // Softmax Jacobian: g_z = p .* (g_p - <g_p, p>).
            let mut g_logits = Matrix::zeros(t_len, classes);
            for t in 0..t_len {
                let p = sc.probs.row(t);
                let g = g_probs.row(t);
                let mut dot = S::zero();
                for k in 0..classes {
                    dot += p[k] * g[k];
                }
                let out = g_logits.row_mut(t);
                for k in 0..classes {
                    out[k] = p[k] * (g[k] - dot);
                }
            }

            let sg = &mut grads.stages[s];
            let hidden_dim = self.config.hidden_dim;

            // Classifier.
            let h_last = sc.hidden.last().unwrap();
            let mut g_h = Matrix::zeros(t_len, hidden_dim);
            for t in 0..t_len {
                let h = h_last.row(t);
                let gz = g_logits.row(t);
                for o in 0..classes {
                    sg.classifier.bias[o] += gz[o];
                    for i in 0..hidden_dim {
                        sg.classifier.weight.add_assign_at(o, i, gz[o] * h[i]);
                        g_h.add_assign_at(t, i, gz[o] * stage.classifier.weight.get(o, i));
                    }
                }
            }

            // Residual layers, reversed.
            for l in (0..stage.layers.len()).rev() {
                let layer = &stage.layers[l];
                let lg = &mut sg.layers[l];
                let (pre, act) = &sc.layer_acts[l];
                let prev_h = &sc.hidden[l];
                let d = layer.conv.dilation;

                // Residual: gradient reaches both the layer body and the skip.
                let mut g_prev = g_h.clone();
                // 1x1 conv.
                let mut g_act = Matrix::zeros(t_len, hidden_dim);
                for t in 0..t_len {
                    let gu = g_h.row(t);
                    let a = act.row(t);
                    for o in 0..hidden_dim {
                        lg.out.bias[o] += gu[o];
                        for i in 0..hidden_dim {
                            lg.out.weight.add_assign_at(o, i, gu[o] * a[i]);
                            g_act.add_assign_at(t, i, gu[o] * layer.out.weight.get(o, i));
                        }
                    }
                }
                // Rectifier.
                for (g, &p) in g_act.data_mut().iter_mut().zip(pre.data().iter()) {
                    if p <= S::zero() {
                        *g = S::zero();
                    }
                }
                // Dilated causal conv.
                for t in 0..t_len {
                    let gc = g_act.row(t).to_vec();
                    for o in 0..hidden_dim {
                        lg.conv.bias[o] += gc[o];
                        for k in 0..KERNEL_WIDTH {
                            let back = (KERNEL_WIDTH - 1 - k) * d;
                            if t < back {
                                continue;
                            }
                            let src = t - back;
                            for i in 0..hidden_dim {
                                let idx = (o * hidden_dim + i) * KERNEL_WIDTH + k;
                                lg.conv.weight[idx] += gc[o] * prev_h.get(src, i);
                                g_prev.add_assign_at(src, i, gc[o] * layer.conv.w(o, i, k));
                            }
                        }
                    }
                }
                g_h = g_prev;
            }

            // Input projection.
            let in_dim = stage.in_dim();
            let mut g_input = Matrix::zeros(t_len, in_dim);
            for t in 0..t_len {
                let x = sc.input.row(t);
                let gh = g_h.row(t);
                for o in 0..hidden_dim {
                    sg.input_proj.bias[o] += gh[o];
                    for i in 0..in_dim {
                        sg.input_proj.weight.add_assign_at(o, i, gh[o] * x[i]);
                        g_input.add_assign_at(t, i, gh[o] * stage.input_proj.weight.get(o, i));
                    }
                }
            }
            if s > 0 {
                chained = Some(g_input);
            }
        }
        Ok(grads)
    }

    /// Flat views over every parameter tensor, in serialization order.
    pub fn param_slices(&self) -> Vec<&[S]> {
        let mut out = Vec::new();
        for stage in &self.stages {
            out.push(stage.input_proj.weight.data());
            out.push(stage.input_proj.bias.as_slice());
            for layer in &stage.layers {
                out.push(layer.conv.weight.as_slice());
                out.push(layer.conv.bias.as_slice());
                out.push(layer.out.weight.data());
                out.push(layer.out.bias.as_slice());
            }
            out.push(stage.classifier.weight.data());
            out.push(stage.classifier.bias.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            out.push(stage.input_proj.weight.data_mut());
            out.push(stage.input_proj.bias.as_mut_slice());
            for layer in &mut stage.layers {
                out.push(layer.conv.weight.as_mut_slice());
                out.push(layer.conv.bias.as_mut_slice());
                out.push(layer.out.weight.data_mut());
                out.push(layer.out.bias.as_mut_slice());
            }
            out.push(stage.classifier.weight.data_mut());
            out.push(stage.classifier.bias.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

const MODEL_MAGIC: &[u8; 8] = b"SWTCN001";

/// Writes the model as magic bytes, a dims header and little-endian f64
/// parameters. Round-trips exactly for `f64` models.
pub fn write_model<S: Scalar, W: Write>(model: &CausalTcnModel<S>, mut w: W) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    let c = model.config;
    for dim in [c.num_stages, c.layers_per_stage, c.hidden_dim, c.num_classes, c.in_dim] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for slice in model.param_slices() {
        for &v in slice {
            if !v.is_finite() {
                return Err(StepwiseError::NonFinite("model parameters"));
            }
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<CausalTcnModel<f64>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(StepwiseError::Format("bad model file magic".into()));
    }
    let mut dim = || -> Result<usize> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    };
    let config = ModelConfig {
        num_stages: dim()?,
        layers_per_stage: dim()?,
        hidden_dim: dim()?,
        num_classes: dim()?,
        in_dim: dim()?,
    };
    let mut model = CausalTcnModel::zeros(config)?;
    for slice in model.param_slices_mut() {
        for v in slice.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(StepwiseError::Format("trailing bytes after model parameters".into()));
    }
    Ok(model)
}
