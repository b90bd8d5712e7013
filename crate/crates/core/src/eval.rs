//! Detection metrics: score-ranked matching against ground truth,
//! precision/recall, per-class AP by precision-envelope integration, mAP,
//! PR-curve export and a wall-clock throughput benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use crate::detect::{detection_order, iou, Box, Detection};
use crate::model::{forward, Model, ModelError};
use crate::tensor::Tensor;

/// Ground-truth record: class and pixel box.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub class_id: usize,
    pub boxx: Box,
}

/// One ranked detection outcome for a single class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedMatch {
    pub score: f32,
    pub is_tp: bool,
}

/// Matching outcome for one image: per-class ranked TP/FP flags plus
/// ground-truth totals (unmatched ground truths are the FNs).
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    pub per_class: Vec<ClassMatches>,
}

#[derive(Debug, Clone, Default)]
pub struct ClassMatches {
    pub class_id: usize,
    pub matches: Vec<RankedMatch>,
    pub gt_count: usize,
}

impl MatchResult {
    pub fn class(&self, class_id: usize) -> Option<&ClassMatches> {
        self.per_class.iter().find(|c| c.class_id == class_id)
    }
}

impl ClassMatches {
    pub fn tp(&self) -> usize {
        self.matches.iter().filter(|m| m.is_tp).count()
    }

    pub fn fp(&self) -> usize {
        self.matches.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_count - self.tp()
    }
}

/// Greedy score-ordered matching: each detection takes the unmatched
/// same-class ground truth of highest IoU if that IoU clears the threshold.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thresh: f32,
    class_count: usize,
) -> MatchResult {
    let mut sorted: Vec<Detection> = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut gt_taken = vec![false; gts.len()];
    let mut per_class: Vec<ClassMatches> = (0..class_count)
        .map(|class_id| ClassMatches {
            class_id,
            matches: Vec::new(),
            gt_count: gts.iter().filter(|g| g.class_id == class_id).count(),
        })
        .collect();

    for d in &sorted {
        if d.class_id >= class_count {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.class_id != d.class_id || gt_taken[gi] {
                continue;
            }
            let v = iou(&d.boxx, &g.boxx);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        let is_tp = match best {
            Some((gi, v)) if v >= f64::from(iou_thresh) => {
                gt_taken[gi] = true;
                true
            }
            _ => false,
        };
        per_class[d.class_id].matches.push(RankedMatch {
            score: d.score,
            is_tp,
        });
    }
    MatchResult { per_class }
}

/// Precision and recall from aggregate counts. Empty-detection convention:
/// precision 1.0 when TP+FP = 0; recall None when there are no ground truths.
pub fn precision_recall(tp: usize, fp: usize, fn_count: usize) -> (f32, Option<f32>) {
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f32 / (tp + fp) as f32
    };
    let recall = if tp + fn_count == 0 {
        None
    } else {
        Some(tp as f32 / (tp + fn_count) as f32)
    };
    (precision, recall)
}

/// All-point interpolated AP: sweep the ranked list accumulating PR points,
/// take the monotone precision envelope, integrate exactly over recall.
/// `ranked` must be sorted by score descending.
pub fn average_precision(ranked: &[RankedMatch], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let points = pr_points(ranked, gt_count);
    let env = precision_envelope(&points);
    let mut ap = 0.0f64;
    let mut prev_r = 0.0f64;
    for &(r, p) in &env {
        if r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = r;
        }
    }
    Some(ap)
}

/// Raw (recall, precision) points, one per ranked detection.
pub fn pr_points(ranked: &[RankedMatch], gt_count: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for m in ranked {
        if m.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((
            tp as f64 / gt_count as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    points
}

/// Monotone envelope: precision at recall r is the max precision at any
/// recall >= r. Returned as (recall, precision), non-increasing in recall,
/// deduplicated to the last point per recall value.
pub fn precision_envelope(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut env: Vec<(f64, f64)> = points.to_vec();
    let mut best = 0.0f64;
    for p in env.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    // envelope value at a recall is the max over that recall's points, which
    // is the first one after the right-to-left sweep
    let mut out: Vec<(f64, f64)> = Vec::new();
    for &(r, p) in &env {
        if let Some(last) = out.last() {
            if (last.0 - r).abs() < 1e-12 {
                continue;
            }
        }
        out.push((r, p));
    }
    out
}

/// Arithmetic mean over classes that had at least one ground truth.
pub fn mean_ap(per_class_aps: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = per_class_aps.iter().filter_map(|a| *a).collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub const CLASS_NAMES: [&str; 4] = ["Dead Knot", "Live Knot", "Knot with crack", "Crack"];

/// Corpus-level evaluation report.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class: Vec<ClassReport>,
    pub map: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub gt_count: usize,
    /// Envelope corner points for PR export, (recall, precision).
    pub pr_curve: Vec<(f64, f64)>,
}

fn class_name(id: usize) -> String {
    CLASS_NAMES
        .get(id)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class {id}"))
}

/// Corner points of the envelope step function, starting at recall 0 and
/// emitting both sides of every precision drop.
pub fn envelope_corners(env: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if env.is_empty() {
        return out;
    }
    out.push((0.0, env[0].1));
    let mut prev = (0.0, env[0].1);
    for &(r, p) in env {
        if (p - prev.1).abs() > 1e-12 {
            // vertical drop at the previous recall
            out.push((prev.0, p));
        }
        match out.last() {
            Some(&(lr, lp)) if (lr - r).abs() < 1e-12 && (lp - p).abs() < 1e-12 => {}
            _ => out.push((r, p)),
        }
        prev = (r, p);
    }
    out
}

/// Pool per-image match results into a corpus-level report.
pub fn aggregate(results: &[MatchResult], class_count: usize) -> EvalReport {
    let mut per_class = Vec::with_capacity(class_count);
    for class_id in 0..class_count {
        let mut ranked: Vec<RankedMatch> = Vec::new();
        let mut gt_count = 0usize;
        for r in results {
            if let Some(c) = r.class(class_id) {
                ranked.extend_from_slice(&c.matches);
                gt_count += c.gt_count;
            }
        }
        ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        let tp = ranked.iter().filter(|m| m.is_tp).count();
        let fp = ranked.len() - tp;
        let ap = average_precision(&ranked, gt_count);
        let pr_curve = if gt_count == 0 {
            Vec::new()
        } else {
            envelope_corners(&precision_envelope(&pr_points(&ranked, gt_count)))
        };
        per_class.push(ClassReport {
            class_id,
            name: class_name(class_id),
            ap,
            tp,
            fp,
            fn_count: gt_count - tp,
            gt_count,
            pr_curve,
        });
    }
    let aps: Vec<Option<f64>> = per_class.iter().map(|c| c.ap).collect();
    EvalReport {
        per_class,
        map: mean_ap(&aps),
    }
}

/// One PR file per class: header `# class <name>`, then `recall precision`
/// lines with six decimals.
pub fn pr_curve_text(report: &ClassReport) -> String {
    let mut s = String::new();
    writeln!(s, "# class {}", report.name).unwrap();
    for &(r, p) in &report.pr_curve {
        writeln!(s, "{} {}", crate::format_fixed6(r), crate::format_fixed6(p)).unwrap();
    }
    s
}

/// Text summary table: per-class AP, mAP, and optional params/FLOPs/FPS.
pub fn summary_table(
    report: &EvalReport,
    params: Option<usize>,
    flops: Option<u64>,
    fps: Option<f64>,
) -> String {
    let mut s = String::new();
    writeln!(s, "{:<18} {:>8} {:>6} {:>6} {:>6} {:>6}", "class", "AP(%)", "TP", "FP", "FN", "GT").unwrap();
    for c in &report.per_class {
        let ap = c
            .ap
            .map(|a| format!("{:.1}", a * 100.0))
            .unwrap_or_else(|| "-".into());
        writeln!(
            s,
            "{:<18} {:>8} {:>6} {:>6} {:>6} {:>6}",
            c.name, ap, c.tp, c.fp, c.fn_count, c.gt_count
        )
        .unwrap();
    }
    match report.map {
        Some(m) => writeln!(s, "mAP: {:.1}%", m * 100.0).unwrap(),
        None => writeln!(s, "mAP: - (no ground truths)").unwrap(),
    }
    if let Some(p) = params {
        writeln!(s, "params: {:.2}M ({p})", p as f64 / 1e6).unwrap();
    }
    if let Some(f) = flops {
        writeln!(s, "FLOPs: {:.2}G ({f})", f as f64 / 1e9).unwrap();
    }
    if let Some(f) = fps {
        writeln!(s, "FPS: {f:.1}").unwrap();
    }
    s
}

/// Wall-clock forward benchmark: 5 warm-up runs excluded, then `iterations`
/// timed runs. Returns (mean ms per image, FPS).
pub fn bench_fps(
    model: &Model,
    input: &Tensor,
    iterations: usize,
) -> Result<(f64, f64), ModelError> {
    for _ in 0..5 {
        forward(model, input)?;
    }
    let mut total_ms = 0.0f64;
    let iterations = iterations.max(1);
    for _ in 0..iterations {
        let t0 = Instant::now();
        forward(model, input)?;
        total_ms += t0.elapsed().as_secs_f64() * 1000.0;
    }
    let mean = total_ms / iterations as f64;
    Ok((mean, 1000.0 / mean))
}
