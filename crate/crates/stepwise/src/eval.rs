//! Detection scoring: belief records to binned segments, IOU matching,
//! average precision, report tables and simple SVG rendering.

use std::collections::BTreeMap;
use std::io::Write;

use crate::belief::BeliefRecord;
use crate::state_machine::StepState;
use crate::{Result, StepwiseError};

/// Temporal bin width used when turning belief records into segments.
pub const BIN_SECONDS: f64 = 0.1;

/// IOU thresholds reported by the kit.
pub const IOU_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// One detected or annotated step interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSegment {
    pub step_id: u32,
    pub start: f64,
    pub stop: f64,
    pub confidence: f64,
}

impl ActionSegment {
    pub fn new(step_id: u32, start: f64, stop: f64, confidence: f64) -> Result<Self> {
        if !(start >= 0.0 && stop > start && stop.is_finite()) {
            return Err(StepwiseError::InvalidArgument(format!(
                "segment needs stop > start >= 0, got [{start}, {stop}]"
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(StepwiseError::InvalidArgument(format!(
                "segment confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Self {
            step_id,
            start,
            stop,
            confidence,
        })
    }

    pub fn duration(&self) -> f64 {
        self.stop - self.start
    }
}

/// Segments plus human-readable notes about dropped or force-closed steps.
#[derive(Debug, Clone)]
pub struct SegmentExtraction {
    pub segments: Vec<ActionSegment>,
    pub warnings: Vec<String>,
}

/// Converts one run's belief records into action segments.
///
/// Timestamps are floored into 0.1 s bins. A step's segment starts at the
/// first bin where it is `current` and stops at the first bin where it is
/// `done`; a step still `current` at the end of the stream is closed at the
/// final timestamp plus one bin and flagged. Segment confidence is the
/// maximum smoothed confidence over the step's `current` bins.
pub fn bin_and_extract_segments(records: &[BeliefRecord]) -> Result<SegmentExtraction> {
    if records.is_empty() {
        return Ok(SegmentExtraction {
            segments: Vec::new(),
            warnings: Vec::new(),
        });
    }
    let code = &records[0].task_code;
    if records.iter().any(|r| &r.task_code != code) {
        return Err(StepwiseError::InvalidArgument(
            "belief records span multiple task codes; extract one run at a time".into(),
        ));
    }
    let last_bin = records
        .iter()
        .map(|r| (r.timestamp / BIN_SECONDS).floor() as i64)
        .max()
        .unwrap();

    let mut per_step: BTreeMap<u32, Vec<&BeliefRecord>> = BTreeMap::new();
    for rec in records {
        per_step.entry(rec.task_step_num).or_default().push(rec);
    }

    let mut segments = Vec::new();
    let mut warnings = Vec::new();
    for (step, mut recs) in per_step {
        recs.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap());
        let mut start_bin: Option<i64> = None;
        let mut stop_bin: Option<i64> = None;
        let mut confidence: f64 = 0.0;
        let mut dropped = false;
        for rec in &recs {
            let bin = (rec.timestamp / BIN_SECONDS).floor() as i64;
            match rec.step_state {
                StepState::Current => {
                    if start_bin.is_none() {
                        start_bin = Some(bin);
                    }
                    if stop_bin.is_none() {
                        confidence = confidence.max(rec.step_state_confidence);
                    }
                }
                StepState::Done => {
                    if start_bin.is_none() {
                        warnings.push(format!("step {step}: done before any current; segment dropped"));
                        dropped = true;
                        break;
                    }
                    if stop_bin.is_none() {
                        stop_bin = Some(bin);
                    }
                }
                StepState::Unobserved => {}
            }
        }
        if dropped {
            continue;
        }
        let Some(start_bin) = start_bin else { continue };
        let stop_bin = match stop_bin {
            Some(b) => b,
            None => {
                warnings.push(format!(
                    "step {step}: still current at end of stream; closed at final timestamp + one bin"
                ));
                last_bin + 1
            }
        };
        let start = start_bin as f64 * BIN_SECONDS;
        let stop = (stop_bin.max(start_bin + 1)) as f64 * BIN_SECONDS;
        segments.push(ActionSegment::new(step, start, stop, confidence.clamp(0.0, 1.0))?);
    }
    Ok(SegmentExtraction { segments, warnings })
}

/// Intersection-over-union of two segments on the time axis.
pub fn iou(a: &ActionSegment, b: &ActionSegment) -> f64 {
    let inter = (a.stop.min(b.stop) - a.start.max(b.start)).max(0.0);
    let union = a.duration() + b.duration() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Prediction indices ordered by descending confidence; ties break on earlier
/// start time, then lower step id.
pub fn ranked_order(segments: &[ActionSegment]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = &segments[a];
        let sb = &segments[b];
        sb.confidence
            .partial_cmp(&sa.confidence)
            .unwrap()
            .then(sa.start.partial_cmp(&sb.start).unwrap())
            .then(sa.step_id.cmp(&sb.step_id))
    });
    order
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    /// `(prediction index, ground-truth index, iou)` triples.
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// One-to-one greedy matching: predictions in descending confidence order each
/// claim the unclaimed same-class ground-truth segment of highest IOU,
/// provided the IOU reaches the threshold.
pub fn match_segments(pred: &[ActionSegment], gt: &[ActionSegment], threshold: f64) -> Result<MatchResult> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(StepwiseError::InvalidArgument(format!(
            "IOU threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let mut claimed = vec![false; gt.len()];
    let mut matches = Vec::new();
    let mut unmatched_pred = Vec::new();
    for &p_idx in &ranked_order(pred) {
        let p = &pred[p_idx];
        let mut best: Option<(usize, f64)> = None;
        for (g_idx, g) in gt.iter().enumerate() {
            if claimed[g_idx] || g.step_id != p.step_id {
                continue;
            }
            let score = iou(p, g);
            if score < threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((b_idx, b_score)) => {
                    score > b_score
                        || (score == b_score
                            && (g.start, g_idx) < (gt[b_idx].start, b_idx))
                }
            };
            if better {
                best = Some((g_idx, score));
            }
        }
        match best {
            Some((g_idx, score)) => {
                claimed[g_idx] = true;
                matches.push((p_idx, g_idx, score));
            }
            None => unmatched_pred.push(p_idx),
        }
    }
    let unmatched_gt = (0..gt.len()).filter(|&g| !claimed[g]).collect();
    Ok(MatchResult {
        matches,
        unmatched_pred,
        unmatched_gt,
    })
}

/// Interpolation-free, confidence-ranked average precision.
pub fn average_precision(pred: &[ActionSegment], gt: &[ActionSegment], threshold: f64) -> Result<f64> {
    if gt.is_empty() {
        return Err(StepwiseError::InvalidArgument(
            "average precision is undefined for empty ground truth".into(),
        ));
    }
    let result = match_segments(pred, gt, threshold)?;
    let matched: std::collections::HashSet<usize> = result.matches.iter().map(|&(p, _, _)| p).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    for &p_idx in &ranked_order(pred) {
        if matched.contains(&p_idx) {
            tp += 1;
            ap += tp as f64 / (tp + fp) as f64 / gt.len() as f64;
        } else {
            fp += 1;
        }
    }
    Ok(ap)
}

/// `(precision, recall)` from the match counts at one threshold.
pub fn precision_recall(pred: &[ActionSegment], gt: &[ActionSegment], threshold: f64) -> Result<(f64, f64)> {
    let result = match_segments(pred, gt, threshold)?;
    let tp = result.matches.len() as f64;
    let precision = if pred.is_empty() { 0.0 } else { tp / pred.len() as f64 };
    let recall = if gt.is_empty() { 0.0 } else { tp / gt.len() as f64 };
    Ok((precision, recall))
}

/// Precision-recall staircase swept over rank cutoffs.
pub fn pr_curve_points(pred: &[ActionSegment], gt: &[ActionSegment], threshold: f64) -> Result<Vec<(f64, f64)>> {
    let result = match_segments(pred, gt, threshold)?;
    let matched: std::collections::HashSet<usize> = result.matches.iter().map(|&(p, _, _)| p).collect();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(pred.len());
    for (rank, &p_idx) in ranked_order(pred).iter().enumerate() {
        if matched.contains(&p_idx) {
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = if gt.is_empty() { 0.0 } else { tp as f64 / gt.len() as f64 };
        points.push((recall, precision));
    }
    Ok(points)
}

/// Per-task scores plus precision/recall at IOU 0.5.
#[derive(Debug, Clone)]
pub struct TaskEval {
    pub code: String,
    pub ap: [f64; 5],
    pub precision: f64,
    pub recall: f64,
}

/// The full report: per-task AP at each threshold, mAP per threshold and the
/// average mAP over the five thresholds.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
    pub map: [f64; 5],
    pub avg_map: f64,
}

pub fn build_report(per_task: &[(String, Vec<ActionSegment>, Vec<ActionSegment>)]) -> Result<EvalReport> {
    if per_task.is_empty() {
        return Err(StepwiseError::InvalidArgument("report needs at least one task".into()));
    }
    let mut tasks = Vec::with_capacity(per_task.len());
    for (code, pred, gt) in per_task {
        let mut ap = [0.0; 5];
        for (slot, &thr) in ap.iter_mut().zip(IOU_THRESHOLDS.iter()) {
            *slot = average_precision(pred, gt, thr)?;
        }
        let (precision, recall) = precision_recall(pred, gt, 0.5)?;
        tasks.push(TaskEval {
            code: code.clone(),
            ap,
            precision,
            recall,
        });
    }
    let mut map = [0.0; 5];
    for (i, slot) in map.iter_mut().enumerate() {
        *slot = tasks.iter().map(|t| t.ap[i]).sum::<f64>() / tasks.len() as f64;
    }
    let avg_map = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalReport { tasks, map, avg_map })
}

/// Shifts every episode onto its own disjoint stretch of the time axis so
/// segments from different runs can be pooled for task-level scoring without
/// cross-run IOU overlap. AP is invariant under per-run time translation.
pub fn pool_runs(runs: &[(Vec<ActionSegment>, Vec<ActionSegment>)]) -> (Vec<ActionSegment>, Vec<ActionSegment>) {
    const RUN_STRIDE: f64 = 1.0e6;
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (idx, (p, g)) in runs.iter().enumerate() {
        let offset = idx as f64 * RUN_STRIDE;
        for s in p {
            pred.push(ActionSegment {
                start: s.start + offset,
                stop: s.stop + offset,
                ..s.clone()
            });
        }
        for s in g {
            gt.push(ActionSegment {
                start: s.start + offset,
                stop: s.stop + offset,
                ..s.clone()
            });
        }
    }
    (pred, gt)
}

/// Writes the mAP table: one row per task, one `mAP` summary row.
pub fn write_map_report<W: Write>(report: &EvalReport, mut w: W) -> Result<()> {
    writeln!(w, "task,AP@0.1,AP@0.2,AP@0.3,AP@0.4,AP@0.5,avg_AP")?;
    for task in &report.tasks {
        let avg = task.ap.iter().sum::<f64>() / task.ap.len() as f64;
        writeln!(
            w,
            "{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            task.code, task.ap[0], task.ap[1], task.ap[2], task.ap[3], task.ap[4], avg
        )?;
    }
    writeln!(
        w,
        "mAP,{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
        report.map[0], report.map[1], report.map[2], report.map[3], report.map[4], report.avg_map
    )?;
    Ok(())
}

/// Writes per-task precision/recall at IOU 0.5.
pub fn write_pr_report<W: Write>(report: &EvalReport, mut w: W) -> Result<()> {
    writeln!(w, "task,precision,recall")?;
    for task in &report.tasks {
        writeln!(w, "{},{:.3},{:.3}", task.code, task.precision, task.recall)?;
    }
    Ok(())
}

/// Parses a ground-truth segment CSV: `step_id,start,stop` per line, with an
/// optional trailing confidence column and optional header.
pub fn parse_segments_csv(text: &str) -> Result<Vec<ActionSegment>> {
    let mut segments = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 && line.to_ascii_lowercase().starts_with("step_id") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(StepwiseError::Parse {
                line: line_no,
                message: format!("expected 3 or 4 fields, got {}", fields.len()),
            });
        }
        let err = |message: String| StepwiseError::Parse {
            line: line_no,
            message,
        };
        let step_id: u32 = fields[0].trim().parse().map_err(|_| err(format!("bad step id {:?}", fields[0])))?;
        let start: f64 = fields[1].trim().parse().map_err(|_| err(format!("bad start {:?}", fields[1])))?;
        let stop: f64 = fields[2].trim().parse().map_err(|_| err(format!("bad stop {:?}", fields[2])))?;
        let confidence: f64 = match fields.get(3) {
            Some(f) => f.trim().parse().map_err(|_| err(format!("bad confidence {f:?}")))?,
            None => 1.0,
        };
        segments.push(ActionSegment::new(step_id, start, stop, confidence).map_err(|e| err(e.to_string()))?);
    }
    Ok(segments)
}

pub fn write_segments_csv<W: Write>(segments: &[ActionSegment], mut w: W) -> Result<()> {
    writeln!(w, "step_id,start,stop,confidence")?;
    for s in segments {
        writeln!(w, "{},{:.6},{:.6},{:.6}", s.step_id, s.start, s.stop, s.confidence)?;
    }
    Ok(())
}

/// Renders ground truth (green) and predictions (red) as one lane per step
/// over a time axis. Empty inputs produce an axis-only document.
pub fn render_timeline(pred: &[ActionSegment], gt: &[ActionSegment]) -> String {
    let t_max = pred
        .iter()
        .chain(gt.iter())
        .map(|s| s.stop)
        .fold(0.0f64, f64::max)
        .max(1.0);
    let steps: Vec<u32> = {
        let mut ids: Vec<u32> = pred.iter().chain(gt.iter()).map(|s| s.step_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let lane_h = 28.0;
    let margin_left = 60.0;
    let margin_top = 20.0;
    let plot_w = 720.0;
    let height = margin_top + (steps.len().max(1) as f64) * lane_h + 40.0;
    let width = margin_left + plot_w + 20.0;
    let x = |t: f64| margin_left + t / t_max * plot_w;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    ));
    let axis_y = height - 30.0;
    svg.push_str(&format!(
        "  <line x1=\"{margin_left}\" y1=\"{axis_y}\" x2=\"{:.1}\" y2=\"{axis_y}\" stroke=\"black\"/>\n",
        margin_left + plot_w
    ));
    for tick in 0..=5 {
        let t = t_max * tick as f64 / 5.0;
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{t:.1}s</text>\n",
            x(t),
            axis_y + 14.0
        ));
    }
    for (lane, &step) in steps.iter().enumerate() {
        let y0 = margin_top + lane as f64 * lane_h;
        svg.push_str(&format!(
            "  <text x=\"8\" y=\"{:.1}\" font-size=\"11\">step {step}</text>\n",
            y0 + lane_h * 0.6
        ));
        for seg in gt.iter().filter(|s| s.step_id == step) {
            svg.push_str(&format!(
                "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"8\" fill=\"green\"/>\n",
                x(seg.start),
                y0 + 4.0,
                (x(seg.stop) - x(seg.start)).max(1.0)
            ));
        }
        for seg in pred.iter().filter(|s| s.step_id == step) {
            svg.push_str(&format!(
                "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"8\" fill=\"red\"/>\n",
                x(seg.start),
                y0 + 14.0,
                (x(seg.stop) - x(seg.start)).max(1.0)
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Renders a precision-recall staircase.
pub fn render_pr_curve(points: &[(f64, f64)], title: &str) -> String {
    let (w, h, m) = (420.0, 420.0, 50.0);
    let x = |r: f64| m + r * (w - 2.0 * m);
    let y = |p: f64| h - m - p * (h - 2.0 * m);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"20\" font-size=\"13\" text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    ));
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        h - m,
        w - m,
        h - m
    ));
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        h - m
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">recall</text>\n",
        w / 2.0,
        h - 14.0
    ));
    if !points.is_empty() {
        let mut d = format!("M {:.2} {:.2}", x(0.0), y(points[0].1));
        let mut prev_r = 0.0;
        for &(r, p) in points {
            d.push_str(&format!(" L {:.2} {:.2}", x(prev_r), y(p)));
            d.push_str(&format!(" L {:.2} {:.2}", x(r), y(p)));
            prev_r = r;
        }
        svg.push_str(&format!("  <path d=\"{d}\" fill=\"none\" stroke=\"blue\" stroke-width=\"1.5\"/>\n"));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(step: u32, start: f64, stop: f64, conf: f64) -> ActionSegment {
        ActionSegment::new(step, start, stop, conf).unwrap()
    }

    fn rec(step: u32, state: StepState, conf: f64, ts: f64) -> BeliefRecord {
        BeliefRecord::new("M2", step, state, conf, ts).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = seg(1, 0.0, 10.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = seg(1, 20.0, 30.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
        let c = seg(1, 5.0, 15.0, 1.0);
        assert!((iou(&a, &c) - 5.0 / 15.0).abs() < 1e-12);
        assert_eq!(iou(&a, &c), iou(&c, &a));
    }

    #[test]
    fn extraction_basic_segment() {
        let records = vec![
            rec(1, StepState::Unobserved, 0.1, 0.5),
            rec(1, StepState::Current, 0.8, 1.0),
            rec(1, StepState::Current, 0.9, 2.0),
            rec(1, StepState::Done, 0.9, 3.5),
        ];
        let out = bin_and_extract_segments(&records).unwrap();
        assert_eq!(out.segments.len(), 1);
        let s = &out.segments[0];
        assert!((s.start - 1.0).abs() < 1e-9);
        assert!((s.stop - 3.5).abs() < 1e-9);
        assert_eq!(s.confidence, 0.9);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn unobserved_step_emits_nothing() {
        let records = vec![rec(2, StepState::Unobserved, 0.0, 0.0), rec(2, StepState::Unobserved, 0.0, 5.0)];
        let out = bin_and_extract_segments(&records).unwrap();
        assert!(out.segments.is_empty());
    }

    #[test]
    fn unfinished_step_closed_at_final_timestamp_plus_one_bin() {
        let records = vec![
            rec(1, StepState::Current, 0.7, 2.0),
            rec(2, StepState::Unobserved, 0.1, 4.0),
        ];
        let out = bin_and_extract_segments(&records).unwrap();
        assert_eq!(out.segments.len(), 1);
        assert!((out.segments[0].stop - 4.1).abs() < 1e-9);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn done_before_current_drops_segment() {
        let records = vec![rec(3, StepState::Done, 0.5, 1.0)];
        let out = bin_and_extract_segments(&records).unwrap();
        assert!(out.segments.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn exact_predictions_match_at_any_threshold() {
        let gt = vec![seg(1, 0.0, 5.0, 1.0), seg(2, 6.0, 9.0, 1.0)];
        for thr in [0.1, 0.5, 1.0] {
            let m = match_segments(&gt, &gt, thr).unwrap();
            assert_eq!(m.matches.len(), 2);
            assert!(m.unmatched_gt.is_empty());
        }
    }

    #[test]
    fn empty_predictions_leave_gt_unmatched() {
        let gt = vec![seg(1, 0.0, 5.0, 1.0)];
        let m = match_segments(&[], &gt, 0.5).unwrap();
        assert!(m.matches.is_empty());
        assert_eq!(m.unmatched_gt, vec![0]);
    }

    #[test]
    fn higher_confidence_wins_contended_gt() {
        let gt = vec![seg(1, 0.0, 10.0, 1.0)];
        let pred = vec![seg(1, 0.0, 9.0, 0.4), seg(1, 1.0, 10.0, 0.9)];
        let m = match_segments(&pred, &gt, 0.5).unwrap();
        assert_eq!(m.matches.len(), 1);
        assert_eq!(m.matches[0].0, 1);
        assert_eq!(m.unmatched_pred, vec![0]);
    }

    #[test]
    fn matching_requires_same_class() {
        let gt = vec![seg(2, 0.0, 10.0, 1.0)];
        let pred = vec![seg(1, 0.0, 10.0, 0.9)];
        let m = match_segments(&pred, &gt, 0.1).unwrap();
        assert!(m.matches.is_empty());
    }

    #[test]
    fn perfect_predictions_have_ap_one() {
        let gt = vec![seg(1, 0.0, 5.0, 1.0), seg(2, 6.0, 9.0, 1.0)];
        assert_eq!(average_precision(&gt, &gt, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn hopeless_predictions_have_ap_zero() {
        let gt = vec![seg(1, 0.0, 5.0, 1.0)];
        let pred = vec![seg(1, 100.0, 105.0, 0.9)];
        assert_eq!(average_precision(&pred, &gt, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn ap_matches_hand_enumerated_staircase() {
        // 3 ground truths; ranked prediction pattern (TP, FP, TP, TP) gives
        // AP = 1*(1/3) + (2/3)*(1/3) + (3/4)*(1/3).
        let gt = vec![
            seg(1, 0.0, 10.0, 1.0),
            seg(2, 20.0, 30.0, 1.0),
            seg(3, 40.0, 50.0, 1.0),
        ];
        let pred = vec![
            seg(1, 0.0, 10.0, 0.9),   // TP
            seg(2, 100.0, 110.0, 0.8), // FP
            seg(2, 20.0, 30.0, 0.7),  // TP
            seg(3, 40.0, 50.0, 0.6),  // TP
        ];
        let expect = (1.0 + 2.0 / 3.0 + 3.0 / 4.0) / 3.0;
        let ap = average_precision(&pred, &gt, 0.5).unwrap();
        assert!((ap - expect).abs() < 1e-12, "ap = {ap}");
    }

    #[test]
    fn ap_undefined_for_empty_gt() {
        assert!(average_precision(&[], &[], 0.5).is_err());
    }

    #[test]
    fn report_perfect_predictions_all_ones() {
        let gt = vec![seg(1, 0.0, 5.0, 1.0)];
        let report = build_report(&[("M2".into(), gt.clone(), gt)]).unwrap();
        assert_eq!(report.map, [1.0; 5]);
        assert_eq!(report.avg_map, 1.0);
        assert_eq!(report.tasks[0].precision, 1.0);
        assert_eq!(report.tasks[0].recall, 1.0);
    }

    #[test]
    fn map_averages_over_tasks() {
        let gt = vec![seg(1, 0.0, 5.0, 1.0)];
        let report = build_report(&[
            ("A".into(), gt.clone(), gt.clone()),
            ("B".into(), vec![], gt),
        ])
        .unwrap();
        for i in 0..5 {
            assert_eq!(report.map[i], 0.5);
        }
        // Average mAP is the mean of the five per-threshold mAPs.
        assert!((report.avg_map - report.map.iter().sum::<f64>() / 5.0).abs() < 1e-12);
    }

    #[test]
    fn ap_is_time_translation_invariant() {
        let gt = vec![seg(1, 3.0, 9.0, 1.0), seg(2, 12.0, 20.0, 1.0)];
        let pred = vec![seg(1, 4.0, 9.0, 0.8), seg(2, 11.0, 19.0, 0.6)];
        let shift = |segs: &[ActionSegment], dt: f64| -> Vec<ActionSegment> {
            segs.iter()
                .map(|s| seg(s.step_id, s.start + dt, s.stop + dt, s.confidence))
                .collect()
        };
        for thr in IOU_THRESHOLDS {
            let base = average_precision(&pred, &gt, thr).unwrap();
            let moved = average_precision(&shift(&pred, 123.0), &shift(&gt, 123.0), thr).unwrap();
            assert!((base - moved).abs() < 1e-12);
        }
    }

    #[test]
    fn segments_csv_round_trip() {
        let segs = vec![seg(1, 0.5, 4.25, 1.0), seg(2, 5.0, 9.125, 0.75)];
        let mut buf = Vec::new();
        write_segments_csv(&segs, &mut buf).unwrap();
        let parsed = parse_segments_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed, segs);
    }

    #[test]
    fn timeline_svg_has_expected_bars() {
        let svg = render_timeline(&[seg(1, 0.0, 5.0, 0.9)], &[seg(1, 0.0, 5.0, 1.0)]);
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));

        let empty = render_timeline(&[], &[]);
        assert_eq!(empty.matches("<rect").count(), 0);
        assert!(empty.contains("<line"));
    }
}
