//! CPU inference engine and evaluation pipeline for a lightweight wood-panel
//! defect detector: a ShuffleNetV2-style backbone with a stem block, SPPF and
//! ECA channel attention, a weighted bidirectional fusion neck, YOLO-style
//! heads, plus the annotation/augmentation tooling and VOC-style mAP metrics
//! needed to exercise it end to end.

pub mod blocks;
pub mod dataset;
pub mod detect;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;

/// Fixed six-decimal formatting with ties rounded away from zero, so text
/// output is stable across platforms (`format!("{:.6}")` rounds ties to even).
pub fn format_fixed6(v: impl Into<f64>) -> String {
    let scaled = (v.into() * 1e6).round();
    let sign = if scaled < 0.0 { "-" } else { "" };
    let mag = scaled.abs() as u64;
    format!("{sign}{}.{:06}", mag / 1_000_000, mag % 1_000_000)
}
