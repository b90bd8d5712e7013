//! From raw head tensors to pixel-space detections: anchor decoding,
//! confidence filtering, IoU and greedy class-wise NMS.

use std::cmp::Ordering;
use std::fmt::Write as _;

use thiserror::Error;

use crate::tensor::{sigmoid_scalar, Tensor};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("raw head tensor has {got} channels, expected {expected} for {anchors} anchors and {nc} classes")]
    ChannelMismatch {
        got: usize,
        expected: usize,
        anchors: usize,
        nc: usize,
    },
    #[error("decode expects a single-image tensor, got batch size {0}")]
    BatchUnsupported(usize),
}

/// Axis-aligned pixel box with x2 >= x1 and y2 >= y1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl Box {
    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    pub boxx: Box,
}

/// Intersection over union; zero-area union yields 0.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let ix = (f64::from(a.x2.min(b.x2)) - f64::from(a.x1.max(b.x1))).max(0.0);
    let iy = (f64::from(a.y2.min(b.y2)) - f64::from(a.y1.max(b.y1))).max(0.0);
    let inter = ix * iy;
    let area = |r: &Box| {
        (f64::from(r.x2) - f64::from(r.x1)).max(0.0) * (f64::from(r.y2) - f64::from(r.y1)).max(0.0)
    };
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Decode one head level for a single image. Per cell and anchor:
/// center = (2*sigmoid(t) - 0.5 + cell) * stride, size = (2*sigmoid(t))^2 *
/// anchor; score = sigmoid(obj) * sigmoid(best class). Boxes are clipped to
/// the network canvas.
pub fn decode(
    raw: &Tensor,
    anchors: &[(f32, f32); 3],
    stride: usize,
    conf_thresh: f32,
) -> Result<Vec<Detection>, DetectError> {
    let (n, c, gh, gw) = raw.shape();
    if n != 1 {
        return Err(DetectError::BatchUnsupported(n));
    }
    if c % 3 != 0 || c / 3 < 6 {
        return Err(DetectError::ChannelMismatch {
            got: c,
            expected: 3 * 6,
            anchors: 3,
            nc: 1,
        });
    }
    let per = c / 3;
    let nc = per - 5;
    let canvas_w = (gw * stride) as f32;
    let canvas_h = (gh * stride) as f32;
    let mut out = Vec::new();
    for a in 0..3 {
        let base = a * per;
        for cy in 0..gh {
            for cx in 0..gw {
                let tx = raw.at(0, base, cy, cx);
                let ty = raw.at(0, base + 1, cy, cx);
                let tw = raw.at(0, base + 2, cy, cx);
                let th = raw.at(0, base + 3, cy, cx);
                let obj = sigmoid_scalar(raw.at(0, base + 4, cy, cx));
                let mut best_cls = 0;
                let mut best_raw = f32::NEG_INFINITY;
                for k in 0..nc {
                    let v = raw.at(0, base + 5 + k, cy, cx);
                    if v > best_raw {
                        best_raw = v;
                        best_cls = k;
                    }
                }
                let score = obj * sigmoid_scalar(best_raw);
                if score < conf_thresh {
                    continue;
                }
                let bx = (2.0 * sigmoid_scalar(tx) - 0.5 + cx as f32) * stride as f32;
                let by = (2.0 * sigmoid_scalar(ty) - 0.5 + cy as f32) * stride as f32;
                let side_w = 2.0 * sigmoid_scalar(tw);
                let side_h = 2.0 * sigmoid_scalar(th);
                let bw = side_w * side_w * anchors[a].0;
                let bh = side_h * side_h * anchors[a].1;
                out.push(Detection {
                    class_id: best_cls,
                    score,
                    boxx: Box {
                        x1: (bx - bw / 2.0).clamp(0.0, canvas_w),
                        y1: (by - bh / 2.0).clamp(0.0, canvas_h),
                        x2: (bx + bw / 2.0).clamp(0.0, canvas_w),
                        y2: (by + bh / 2.0).clamp(0.0, canvas_h),
                    },
                });
            }
        }
    }
    Ok(out)
}

/// Total order for deterministic NMS and dumps: score desc, then class asc,
/// then x1 asc.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.boxx.x1.partial_cmp(&b.boxx.x1).unwrap_or(Ordering::Equal))
}

/// Greedy class-wise NMS. Output is sorted by the same total order and is
/// invariant to input order.
pub fn nms(dets: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut sorted: Vec<Detection> = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let clash = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.boxx, &d.boxx) >= f64::from(iou_thresh));
        if !clash {
            kept.push(d);
        }
    }
    kept
}

/// One line per detection: `class_id score x1 y1 x2 y2`, six decimals.
pub fn dump_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let f = crate::format_fixed6;
        writeln!(
            s,
            "{} {} {} {} {} {}",
            d.class_id,
            f(d.score),
            f(d.boxx.x1),
            f(d.boxx.y1),
            f(d.boxx.x2),
            f(d.boxx.y2)
        )
        .unwrap();
    }
    s
}

/// Parse the dump format back into detections.
pub fn parse_detections(text: &str) -> Option<Vec<Detection>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return None;
        }
        out.push(Detection {
            class_id: parts[0].parse().ok()?,
            score: parts[1].parse().ok()?,
            boxx: Box {
                x1: parts[2].parse().ok()?,
                y1: parts[3].parse().ok()?,
                x2: parts[4].parse().ok()?,
                y2: parts[5].parse().ok()?,
            },
        });
    }
    Some(out)
}
