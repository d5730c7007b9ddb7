//! GOT-10k style overlap metrics and centre-error precision.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};

/// Centre-error thresholds (pixels) at which precision is sampled.
pub const PRECISION_THRESHOLDS: [f64; 11] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub predictions: Vec<[f64; 4]>,
}

impl SequenceResult {
    pub fn new(name: impl Into<String>, pred: &[BBox<f64>], gt: &[BBox<f64>]) -> Self {
        assert_eq!(pred.len(), gt.len(), "one prediction per annotated frame");
        let ious = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
        let center_errors = pred
            .iter()
            .zip(gt)
            .map(|(p, g)| {
                let (a, b) = (p.center(), g.center());
                ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
            })
            .collect();
        let predictions = pred.iter().map(|b| [b.x0, b.y0, b.width(), b.height()]).collect();
        Self { name: name.into(), ious, center_errors, predictions }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceResult>,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    /// `(threshold, fraction of frames with centre error <= threshold)`.
    pub precision: Vec<(f64, f64)>,
}

/// Mean of all IoUs.
pub fn average_overlap(ious: &[f64]) -> f64 {
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Fraction of IoUs strictly above `threshold`.
pub fn success_rate(ious: &[f64], threshold: f64) -> f64 {
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().filter(|&&v| v > threshold).count() as f64 / ious.len() as f64
    }
}

impl EvalReport {
    /// Pools every frame of every sequence.
    pub fn from_sequences(sequences: Vec<SequenceResult>) -> Self {
        let ious: Vec<f64> = sequences.iter().flat_map(|s| s.ious.iter().copied()).collect();
        let errs: Vec<f64> = sequences.iter().flat_map(|s| s.center_errors.iter().copied()).collect();
        let precision = PRECISION_THRESHOLDS
            .iter()
            .map(|&t| {
                let p = if errs.is_empty() { 0.0 } else { errs.iter().filter(|&&e| e <= t).count() as f64 / errs.len() as f64 };
                (t, p)
            })
            .collect();
        Self { ao: average_overlap(&ious), sr50: success_rate(&ious, 0.5), sr75: success_rate(&ious, 0.75), precision, sequences }
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.ious.len()).sum()
    }
}
