//! Seeded generator of desk-scale task episodes: step timelines calibrated to
//! per-task statistics, overlap-resolved frame labels, and class-conditional
//! feature sequences.

use std::io::{Read, Write};

use num_traits::cast::ToPrimitive;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::eval::ActionSegment;
use crate::matrix::Matrix;
use crate::tcn::FeatureSequence;
use crate::{Result, StepwiseError, TaskDefinition};

/// All generation runs at 30 frames per second with a feature per frame.
pub const FRAME_RATE: f64 = 30.0;

/// Log-normal shape parameter for step durations; the scale is solved so the
/// distribution mean hits the profile's mean step duration.
pub const DURATION_SIGMA: f64 = 0.35;

/// When a step overlaps its predecessor, it backs up by this fraction of the
/// shorter of the two step durations.
pub const DEFAULT_OVERLAP_DEPTH: f64 = 0.25;

/// Summary statistics driving one task's generator.
#[derive(Debug, Clone)]
pub struct TaskProfile {
    pub code: &'static str,
    pub num_steps: usize,
    /// Mean full-video duration in seconds.
    pub mean_video_s: f64,
    /// Mean single-step duration in seconds.
    pub mean_step_s: f64,
    /// Minimum step duration in seconds (duration floor).
    pub min_step_s: f64,
    /// Fraction of eligible steps (all but the first) that overlap their
    /// predecessor.
    pub overlap_fraction: f64,
}

impl TaskProfile {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0
            || self.mean_step_s <= 0.0
            || self.min_step_s <= 0.0
            || self.min_step_s > self.mean_step_s
            || !(0.0..=1.0).contains(&self.overlap_fraction)
        {
            return Err(StepwiseError::InvalidArgument(format!(
                "inconsistent task profile {}",
                self.code
            )));
        }
        Ok(())
    }

    pub fn task_definition(&self) -> TaskDefinition {
        TaskDefinition {
            code: self.code.to_string(),
            steps: (1..=self.num_steps)
                .map(|k| format!("{}_step_{k}", self.code.to_ascii_lowercase()))
                .collect(),
        }
    }
}

/// The eight built-in task profiles.
pub const BUILTIN_PROFILES: [TaskProfile; 8] = [
    TaskProfile { code: "A8", num_steps: 5, mean_video_s: 45.12, mean_step_s: 5.12, min_step_s: 0.81, overlap_fraction: 0.0 },
    TaskProfile { code: "M2", num_steps: 8, mean_video_s: 51.31, mean_step_s: 4.01, min_step_s: 0.37, overlap_fraction: 0.163 },
    TaskProfile { code: "M3", num_steps: 5, mean_video_s: 82.88, mean_step_s: 15.98, min_step_s: 0.43, overlap_fraction: 0.151 },
    TaskProfile { code: "M4", num_steps: 3, mean_video_s: 98.97, mean_step_s: 32.15, min_step_s: 2.41, overlap_fraction: 0.296 },
    TaskProfile { code: "M5", num_steps: 5, mean_video_s: 41.37, mean_step_s: 7.55, min_step_s: 0.65, overlap_fraction: 0.0 },
    TaskProfile { code: "R16", num_steps: 5, mean_video_s: 41.54, mean_step_s: 6.85, min_step_s: 0.43, overlap_fraction: 0.011 },
    TaskProfile { code: "R18", num_steps: 5, mean_video_s: 44.02, mean_step_s: 8.55, min_step_s: 0.13, overlap_fraction: 0.148 },
    TaskProfile { code: "R19", num_steps: 6, mean_video_s: 81.15, mean_step_s: 9.72, min_step_s: 0.43, overlap_fraction: 0.047 },
];

pub fn profile_by_code(code: &str) -> Option<&'static TaskProfile> {
    BUILTIN_PROFILES.iter().find(|p| p.code.eq_ignore_ascii_case(code))
}

/// One step occurrence on the episode timeline, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInterval {
    /// 1-based canonical step number.
    pub step_id: u32,
    pub start: f64,
    pub stop: f64,
}

/// Samples step intervals in canonical order. Durations are log-normal with
/// the profile's mean, floored at the minimum; each step after the first
/// overlaps its predecessor with probability equal to the profile's overlap
/// fraction, backing up by a fraction of the shorter step.
pub fn sample_timeline<R: Rng>(profile: &TaskProfile, rng: &mut R) -> Result<Vec<StepInterval>> {
    profile.validate()?;
    let mu = profile.mean_step_s.ln() - 0.5 * DURATION_SIGMA * DURATION_SIGMA;
    let duration_dist = Normal::new(mu, DURATION_SIGMA).expect("finite parameters");

    // Background budget: whatever the mean video length leaves after the
    // steps, split into a lead-in and the inter-step gaps.
    let gap_mean = ((profile.mean_video_s - profile.num_steps as f64 * profile.mean_step_s)
        / (profile.num_steps + 1) as f64)
        .max(0.2);

    let mut intervals = Vec::with_capacity(profile.num_steps);
    let mut cursor = rng.gen_range(0.5 * gap_mean..1.5 * gap_mean);
    let mut prev: Option<StepInterval> = None;
    for step in 1..=profile.num_steps {
        let duration = duration_dist.sample(rng).exp().max(profile.min_step_s);
        let mut start = cursor;
        if let Some(prev) = &prev {
            if rng.gen_bool(profile.overlap_fraction) {
                let depth = DEFAULT_OVERLAP_DEPTH * duration.min(prev.stop - prev.start);
                // Back into the predecessor, but never past its start.
                start = (prev.stop - depth).max(prev.start + 1.0 / FRAME_RATE);
            }
        }
        let interval = StepInterval {
            step_id: step as u32,
            start,
            stop: start + duration,
        };
        cursor = interval.stop + rng.gen_range(0.5 * gap_mean..1.5 * gap_mean);
        prev = Some(interval.clone());
        intervals.push(interval);
    }
    Ok(intervals)
}

/// Fraction of eligible steps (all but the first) whose start precedes the
/// previous step's stop. This is the statistic the generator calibrates.
pub fn overlap_rate(intervals: &[StepInterval]) -> f64 {
    if intervals.len() < 2 {
        return 0.0;
    }
    let overlapping = intervals
        .windows(2)
        .filter(|pair| pair[1].start < pair[0].stop)
        .count();
    overlapping as f64 / (intervals.len() - 1) as f64
}

/// Rasterizes intervals to one label per frame. Where two steps overlap, the
/// later step owns the shared frames (the earlier step's overlapped portion is
/// removed); frames under no step are background (class 0).
pub fn resolve_overlaps(intervals: &[StepInterval]) -> Result<Vec<usize>> {
    for pair in intervals.windows(2) {
        if pair[1].start < pair[0].start {
            return Err(StepwiseError::InvalidArgument(
                "intervals must be ordered by start time".into(),
            ));
        }
    }
    let t_max = intervals.iter().map(|i| i.stop).fold(0.0f64, f64::max);
    let frames = (t_max * FRAME_RATE).ceil() as usize;
    let mut labels = vec![0usize; frames];
    for interval in intervals {
        let lo = (interval.start * FRAME_RATE).floor().max(0.0) as usize;
        let hi = ((interval.stop * FRAME_RATE).floor() as usize).min(frames);
        for label in labels.iter_mut().take(hi).skip(lo) {
            *label = interval.step_id as usize;
        }
    }
    Ok(labels)
}

/// Draws one unit-norm direction per class, scaled by `separation`. Index 0 is
/// the background class mean.
pub fn class_means<R: Rng>(num_classes: usize, dim: usize, separation: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..num_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in v.iter_mut() {
                *x = *x / norm * separation;
            }
            v
        })
        .collect()
}

/// Per-frame feature = class mean + unit Gaussian noise. Separation 0 reduces
/// to pure noise with no class signal.
pub fn emit_features<R: Rng>(
    labels: &[usize],
    means: &[Vec<f64>],
    rng: &mut R,
) -> Result<FeatureSequence<f64>> {
    if labels.is_empty() || means.is_empty() {
        return Err(StepwiseError::InvalidArgument(
            "emit_features needs at least one frame and one class mean".into(),
        ));
    }
    let dim = means[0].len();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut data = Matrix::zeros(labels.len(), dim);
    for (t, &label) in labels.iter().enumerate() {
        let mean = means.get(label).ok_or_else(|| {
            StepwiseError::InvalidArgument(format!("label {label} has no class mean"))
        })?;
        let row = data.row_mut(t);
        for (x, m) in row.iter_mut().zip(mean.iter()) {
            *x = m + normal.sample(rng);
        }
    }
    FeatureSequence::new(data, FRAME_RATE)
}

/// One generated episode: features, the raw (possibly overlapping) intervals,
/// and the overlap-resolved frame labels.
#[derive(Debug, Clone)]
pub struct SyntheticEpisode {
    pub features: FeatureSequence<f64>,
    pub intervals: Vec<StepInterval>,
    pub labels: Vec<usize>,
    pub task: TaskDefinition,
}

impl SyntheticEpisode {
    /// Ground-truth segments from the resolved labels: one segment per
    /// contiguous run of a step label, confidence 1.
    pub fn ground_truth_segments(&self) -> Vec<ActionSegment> {
        let mut segments = Vec::new();
        let mut run_start = 0usize;
        let mut run_label = 0usize;
        for t in 0..=self.labels.len() {
            let label = self.labels.get(t).copied().unwrap_or(0);
            if t == 0 || label != run_label {
                if run_label != 0 {
                    segments.push(
                        ActionSegment::new(
                            run_label as u32,
                            run_start as f64 / FRAME_RATE,
                            t as f64 / FRAME_RATE,
                            1.0,
                        )
                        .expect("run bounds are ordered"),
                    );
                }
                run_start = t;
                run_label = label;
            }
        }
        segments
    }
}

/// Deterministic per-task episode factory. Class means are drawn once per
/// task so training and evaluation episodes share the same feature geometry.
#[derive(Debug, Clone)]
pub struct TaskGenerator {
    profile: TaskProfile,
    task: TaskDefinition,
    means: Vec<Vec<f64>>,
    base_seed: u64,
}

fn mix_seed(base: u64, code: &str, stream: u64) -> u64 {
    // FNV-1a over the task code, folded with the base seed and stream id.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in code.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ base.wrapping_mul(0x9e3779b97f4a7c15) ^ stream.wrapping_mul(0xd1b54a32d192ed03)
}

impl TaskGenerator {
    pub fn new(profile: &TaskProfile, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        profile.validate()?;
        if dim == 0 || separation < 0.0 {
            return Err(StepwiseError::InvalidArgument(
                "feature dim must be >= 1 and separation >= 0".into(),
            ));
        }
        let task = profile.task_definition();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, profile.code, u64::MAX));
        let means = class_means(task.num_classes(), dim, separation, &mut rng);
        Ok(Self {
            profile: profile.clone(),
            task,
            means,
            base_seed: seed,
        })
    }

    pub fn task(&self) -> &TaskDefinition {
        &self.task
    }

    pub fn profile(&self) -> &TaskProfile {
        &self.profile
    }

    /// Generates episode `index`; identical `(seed, code, index)` triples give
    /// identical episodes.
    pub fn episode(&self, index: u64) -> Result<SyntheticEpisode> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.base_seed, self.profile.code, index));
        let intervals = sample_timeline(&self.profile, &mut rng)?;
        let labels = resolve_overlaps(&intervals)?;
        let features = emit_features(&labels, &self.means, &mut rng)?;
        Ok(SyntheticEpisode {
            features,
            intervals,
            labels,
            task: self.task.clone(),
        })
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"SWFEAT01";

/// Binary feature container: magic, frame count, feature dim, frame rate,
/// then row-major 32-bit floats.
pub fn write_features<W: Write>(features: &FeatureSequence<f64>, mut w: W) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(features.num_frames() as u32).to_le_bytes())?;
    w.write_all(&(features.dim() as u32).to_le_bytes())?;
    w.write_all(&(features.frame_rate as f32).to_le_bytes())?;
    for value in features.data.data() {
        w.write_all(&(value.to_f32().unwrap()).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeatureSequence<f64>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(StepwiseError::Format("bad feature file magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let frames = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let frame_rate = f32::from_le_bytes(u32buf) as f64;
    let mut data = Matrix::zeros(frames, dim);
    let mut f32buf = [0u8; 4];
    for idx in 0..frames * dim {
        r.read_exact(&mut f32buf)?;
        data.data_mut()[idx] = f32::from_le_bytes(f32buf) as f64;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(StepwiseError::Format("trailing bytes after feature data".into()));
    }
    FeatureSequence::new(data, frame_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_profiles_are_consistent() {
        for profile in &BUILTIN_PROFILES {
            profile.validate().unwrap();
        }
        assert_eq!(profile_by_code("m2").unwrap().num_steps, 8);
        assert!(profile_by_code("XX").is_none());
    }

    #[test]
    fn zero_overlap_profile_gives_disjoint_intervals() {
        let profile = profile_by_code("A8").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let intervals = sample_timeline(profile, &mut rng).unwrap();
            assert_eq!(intervals.len(), 5);
            for pair in intervals.windows(2) {
                assert!(pair[1].start >= pair[0].stop);
            }
        }
    }

    #[test]
    fn single_step_profile_gives_one_interval() {
        let profile = TaskProfile {
            code: "T1",
            num_steps: 1,
            mean_video_s: 10.0,
            mean_step_s: 5.0,
            min_step_s: 1.0,
            overlap_fraction: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_timeline(&profile, &mut rng).unwrap().len(), 1);
    }

    #[test]
    fn m2_monte_carlo_matches_profile_targets() {
        // Smoke-scale version of the full 10 000-episode calibration check.
        let profile = profile_by_code("M2").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut dur_sum = 0.0;
        let mut dur_count = 0usize;
        let mut rate_sum = 0.0;
        let episodes = 2000;
        for _ in 0..episodes {
            let intervals = sample_timeline(profile, &mut rng).unwrap();
            for i in &intervals {
                dur_sum += i.stop - i.start;
                dur_count += 1;
            }
            rate_sum += overlap_rate(&intervals);
        }
        let mean_dur = dur_sum / dur_count as f64;
        let mean_rate = rate_sum / episodes as f64;
        assert!((mean_dur - 4.01).abs() < 0.1 * 4.01, "mean duration {mean_dur}");
        assert!((mean_rate - 0.163).abs() < 0.03, "overlap rate {mean_rate}");
    }

    #[test]
    fn overlap_resolution_favors_the_later_step() {
        let intervals = vec![
            StepInterval { step_id: 1, start: 0.0, stop: 10.0 },
            StepInterval { step_id: 2, start: 8.0, stop: 15.0 },
        ];
        let labels = resolve_overlaps(&intervals).unwrap();
        assert_eq!(labels.len(), 450);
        // Step 1 keeps [0, 8) s, step 2 owns [8, 15) s.
        assert!(labels[..240].iter().all(|&l| l == 1));
        assert!(labels[240..450].iter().all(|&l| l == 2));
    }

    #[test]
    fn no_overlap_resolution_is_verbatim() {
        let intervals = vec![
            StepInterval { step_id: 1, start: 0.0, stop: 1.0 },
            StepInterval { step_id: 2, start: 2.0, stop: 3.0 },
        ];
        let labels = resolve_overlaps(&intervals).unwrap();
        assert!(labels[..30].iter().all(|&l| l == 1));
        assert!(labels[30..60].iter().all(|&l| l == 0));
        assert!(labels[60..90].iter().all(|&l| l == 2));
    }

    /// Sweep-line oracle: each frame belongs to the covering interval with
    /// the latest start (ties to the higher step id).
    fn sweep_line_labels(intervals: &[StepInterval], frames: usize) -> Vec<usize> {
        (0..frames)
            .map(|f| {
                intervals
                    .iter()
                    .filter(|i| {
                        let lo = (i.start * FRAME_RATE).floor() as usize;
                        let hi = (i.stop * FRAME_RATE).floor() as usize;
                        lo <= f && f < hi
                    })
                    // Later steps own shared frames.
                    .max_by_key(|i| i.step_id)
                    .map_or(0, |i| i.step_id as usize)
            })
            .collect()
    }

    #[test]
    fn random_timelines_match_sweep_line_oracle() {
        let profile = TaskProfile {
            code: "T6",
            num_steps: 6,
            mean_video_s: 30.0,
            mean_step_s: 4.0,
            min_step_s: 0.5,
            overlap_fraction: 0.6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let intervals = sample_timeline(&profile, &mut rng).unwrap();
            let labels = resolve_overlaps(&intervals).unwrap();
            assert_eq!(labels, sweep_line_labels(&intervals, labels.len()));
        }
    }

    #[test]
    fn canonical_order_of_first_resolved_frames() {
        let profile = profile_by_code("M4").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..200 {
            let intervals = sample_timeline(profile, &mut rng).unwrap();
            let labels = resolve_overlaps(&intervals).unwrap();
            let first_frame = |step: usize| labels.iter().position(|&l| l == step);
            let mut prev = None;
            for step in 1..=profile.num_steps {
                let f = first_frame(step).expect("every step keeps frames");
                if let Some(p) = prev {
                    assert!(f > p);
                }
                prev = Some(f);
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_episodes() {
        let profile = profile_by_code("R16").unwrap();
        let gen_a = TaskGenerator::new(profile, 16, 5.0, 9).unwrap();
        let gen_b = TaskGenerator::new(profile, 16, 5.0, 9).unwrap();
        let ep_a = gen_a.episode(3).unwrap();
        let ep_b = gen_b.episode(3).unwrap();
        assert_eq!(ep_a.labels, ep_b.labels);
        assert_eq!(ep_a.features.data.data(), ep_b.features.data.data());
        let ep_c = gen_a.episode(4).unwrap();
        assert_ne!(ep_a.features.data.data(), ep_c.features.data.data());
    }

    #[test]
    fn separation_zero_means_are_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let means = class_means(4, 8, 0.0, &mut rng);
        assert!(means.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn nearest_mean_classifier_separates_at_separation_ten() {
        let profile = profile_by_code("M2").unwrap();
        let generator = TaskGenerator::new(profile, 64, 10.0, 2).unwrap();
        let episode = generator.episode(0).unwrap();
        let means = {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(2, "M2", u64::MAX));
            class_means(profile.num_steps + 1, 64, 10.0, &mut rng)
        };
        let mut correct = 0usize;
        for (t, &label) in episode.labels.iter().enumerate() {
            let frame = episode.features.data.row(t);
            let nearest = (0..means.len())
                .min_by(|&a, &b| {
                    let da: f64 = frame.iter().zip(&means[a]).map(|(x, m)| (x - m).powi(2)).sum();
                    let db: f64 = frame.iter().zip(&means[b]).map(|(x, m)| (x - m).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if nearest == label {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / episode.labels.len() as f64;
        assert!(accuracy > 0.99, "nearest-mean accuracy {accuracy}");
    }

    #[test]
    fn ground_truth_segments_cover_label_runs() {
        let profile = profile_by_code("A8").unwrap();
        let generator = TaskGenerator::new(profile, 8, 5.0, 4).unwrap();
        let episode = generator.episode(0).unwrap();
        let segments = episode.ground_truth_segments();
        assert_eq!(segments.len(), 5);
        for (idx, seg) in segments.iter().enumerate() {
            assert_eq!(seg.step_id, (idx + 1) as u32);
            let lo = (seg.start * FRAME_RATE).round() as usize;
            let hi = (seg.stop * FRAME_RATE).round() as usize;
            assert!(episode.labels[lo..hi].iter().all(|&l| l == idx + 1));
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let profile = profile_by_code("M5").unwrap();
        let generator = TaskGenerator::new(profile, 6, 3.0, 7).unwrap();
        let features = generator.episode(0).unwrap().features;
        let mut buf = Vec::new();
        write_features(&features, &mut buf).unwrap();
        let back = read_features(buf.as_slice()).unwrap();
        assert_eq!(back.num_frames(), features.num_frames());
        assert_eq!(back.dim(), features.dim());
        assert_eq!(back.frame_rate, features.frame_rate);
        for (a, b) in back.data.data().iter().zip(features.data.data()) {
            // Values pass through f32 on disk.
            assert!((a - b).abs() <= (*b as f32).abs() as f64 * 1e-6 + 1e-6);
        }
    }

    #[test]
    fn read_features_rejects_garbage() {
        assert!(read_features(&b"not a feature file"[..]).is_err());
        let mut buf = Vec::new();
        let profile = profile_by_code("M5").unwrap();
        let generator = TaskGenerator::new(profile, 4, 1.0, 7).unwrap();
        write_features(&generator.episode(0).unwrap().features, &mut buf).unwrap();
        buf.push(0);
        assert!(read_features(buf.as_slice()).is_err());
    }
}
