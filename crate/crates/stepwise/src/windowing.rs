//! Clip windowing for window-based training: fixed-duration windows slid over
//! each step clip with randomized first-window alignment and positional
//! labels.

use rand::Rng;

use crate::{Result, StepwiseError};

/// Default window duration in seconds.
pub const DEFAULT_WINDOW_SECONDS: f64 = 2.0;
/// Default fractional overlap between consecutive windows.
pub const DEFAULT_OVERLAP: f64 = 0.5;
/// The first window's last frame lands uniformly among this many of the
/// clip's leading frames.
pub const DEFAULT_ALIGN_FRAMES: usize = 5;

/// One training window over the frame stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// First video frame of the window (inclusive).
    pub start_frame: usize,
    /// Last video frame of the window (inclusive).
    pub last_frame: usize,
    /// The owning clip's step label (1-based; never background).
    pub step_label: usize,
    /// Fraction of the clip elapsed at the window's last frame.
    pub begin: f64,
    /// Always exactly `1 - begin`.
    pub end: f64,
}

/// Windows plus notes about skipped clips.
#[derive(Debug, Clone)]
pub struct SlideResult {
    pub windows: Vec<Window>,
    pub warnings: Vec<String>,
}

/// Maximal runs of one non-background label: `(start_frame, last_frame, label)`.
fn step_clips(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut clips = Vec::new();
    let mut run_start = 0usize;
    let mut run_label = 0usize;
    for t in 0..=labels.len() {
        let label = labels.get(t).copied().unwrap_or(0);
        if t == 0 || label != run_label {
            if run_label != 0 {
                clips.push((run_start, t - 1, run_label));
            }
            run_start = t;
            run_label = label;
        }
    }
    clips
}

/// Slides windows of `round(k_seconds * frame_rate)` frames over every step
/// clip, advancing by `round(window * (1 - overlap))` frames.
///
/// Within each clip, the first window's last frame is aligned with a
/// uniformly chosen frame among the clip's first `align_frames` frames; later
/// windows advance by the stride. Windows reaching past the clip's last frame
/// or starting before video frame 0 are discarded. Each kept window carries
/// the clip's step label and the positional label
/// `begin = (last frame - clip start) / clip length`, `end = 1 - begin`.
pub fn slide_windows<R: Rng>(
    labels: &[usize],
    frame_rate: f64,
    k_seconds: f64,
    overlap: f64,
    align_frames: usize,
    rng: &mut R,
) -> Result<SlideResult> {
    if !(k_seconds > 0.0) || !(frame_rate > 0.0) {
        return Err(StepwiseError::InvalidArgument(
            "window duration and frame rate must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(StepwiseError::InvalidArgument(format!(
            "overlap must lie in [0, 1), got {overlap}"
        )));
    }
    if align_frames == 0 {
        return Err(StepwiseError::InvalidArgument(
            "alignment needs at least one candidate frame".into(),
        ));
    }
    let window = (k_seconds * frame_rate).round() as usize;
    let stride = ((window as f64) * (1.0 - overlap)).round().max(1.0) as usize;

    let mut windows = Vec::new();
    let mut warnings = Vec::new();
    for (clip_start, clip_last, label) in step_clips(labels) {
        let clip_len = clip_last - clip_start + 1;
        if clip_len == 0 {
            warnings.push(format!("clip of step {label} has no frames; skipped"));
            continue;
        }
        let align = rng.gen_range(0..align_frames.min(clip_len));
        let mut last = clip_start + align;
        let mut kept = 0usize;
        while last <= clip_last {
            // Discard windows that would reach before the start of the video.
            if last + 1 >= window {
                let begin = (last - clip_start) as f64 / clip_len as f64;
                windows.push(Window {
                    start_frame: last + 1 - window,
                    last_frame: last,
                    step_label: label,
                    begin,
                    end: 1.0 - begin,
                });
                kept += 1;
            }
            last += stride;
        }
        if kept == 0 {
            warnings.push(format!(
                "clip of step {label} at frame {clip_start} yielded no windows"
            ));
        }
    }
    Ok(SlideResult { windows, warnings })
}
