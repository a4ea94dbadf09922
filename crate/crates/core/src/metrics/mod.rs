//! Tversky objective, per-image overlap metrics, macro aggregation and
//! pooled-pixel ROC / precision–recall curves.

mod curves;
mod report;

pub use curves::{curves, CurveData};
pub use report::{macro_aggregate, ImageRecord, MetricReport, MetricSummary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TverskyParams {
    /// False-positive weight.
    pub alpha: f64,
    /// False-negative weight.
    pub beta: f64,
    pub smooth: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        TverskyParams { alpha: 0.3, beta: 0.7, smooth: 1e-6 }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(Error::Config(format!("Tversky weights need alpha, beta >= 0 and alpha + beta > 0, got {self:?}")));
        }
        if !(self.smooth >= 0.0) {
            return Err(Error::Config("Tversky smoothing must be non-negative".into()));
        }
        Ok(())
    }
}

/// `(ΣPG + s) / (ΣPG + α·ΣP(1−G) + β·Σ(1−P)G + s)`.
pub fn tversky_index(p: &[f64], g: &[f64], params: &TverskyParams) -> Result<f64> {
    if p.len() != g.len() {
        return Err(Error::shape("tversky_index", format!("{} predictions vs {} labels", p.len(), g.len())));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("predictions must lie in [0, 1]".into()));
    }
    if g.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("ground truth must be binary".into()));
    }
    let (tp, fp, fneg) = crate::graph::tversky_sums(p, g);
    Ok((tp + params.smooth) / (tp + params.alpha * fp + params.beta * fneg + params.smooth))
}

/// `(1 − T(p2)) + (1 − T(p1))`, each term averaged over the batch.
pub fn coupled_loss<T: Real>(g: &mut Graph<T>, p1: Var, p2: Var, target: &Tensor<T>, params: &TverskyParams) -> Result<Var> {
    let l2 = g.tversky_loss(p2, target, params.alpha, params.beta, params.smooth)?;
    let l1 = g.tversky_loss(p1, target, params.alpha, params.beta, params.smooth)?;
    g.add(l2, l1)
}

/// UNet-1-only objective used in the first training phase.
pub fn single_loss<T: Real>(g: &mut Graph<T>, p: Var, target: &Tensor<T>, params: &TverskyParams) -> Result<Var> {
    g.tversky_loss(p, target, params.alpha, params.beta, params.smooth)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Binarizes `pred` at `>= threshold` and counts against binary `truth`.
pub fn confusion<P: Copy + Into<f64>>(pred: &[P], truth: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::shape("confusion", format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p.into() >= threshold, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Dice, IoU, recall and precision from counts. Empty prediction and empty
/// truth scores 1 on every metric; exactly one of them empty scores 0.
pub fn image_metrics(c: &ConfusionCounts) -> ImageMetrics {
    let pred_empty = c.tp + c.fp == 0;
    let truth_empty = c.tp + c.fn_ == 0;
    if pred_empty && truth_empty {
        return ImageMetrics { dice: 1.0, iou: 1.0, recall: 1.0, precision: 1.0 };
    }
    if pred_empty || truth_empty {
        return ImageMetrics { dice: 0.0, iou: 0.0, recall: 0.0, precision: 0.0 };
    }
    let (tp, fp, fneg) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    ImageMetrics {
        dice: 2.0 * tp / (2.0 * tp + fp + fneg),
        iou: tp / (tp + fp + fneg),
        recall: tp / (tp + fneg),
        precision: tp / (tp + fp),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_case() -> (Vec<f64>, Vec<u8>) {
        // 4×4 grid: |P| = 6, |G| = 4, overlap 3.
        let mut p = vec![0.0; 16];
        let mut g = vec![0u8; 16];
        for i in [0, 1, 2, 4, 5, 6] {
            p[i] = 1.0;
        }
        for i in [0, 1, 2, 8] {
            g[i] = 1;
        }
        (p, g)
    }

    #[test]
    fn hand_case_counts_and_metrics() {
        let (p, g) = grid_case();
        let c = confusion(&p, &g, 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (3, 3, 1, 9));
        let m = image_metrics(&c);
        assert!((m.dice - 0.6).abs() < 1e-15);
        assert!((m.iou - 3.0 / 7.0).abs() < 1e-15);
        assert!((m.recall - 0.75).abs() < 1e-15);
        assert!((m.precision - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_case_tversky_equals_dice() {
        let (p, g) = grid_case();
        let g: Vec<f64> = g.iter().map(|&v| v as f64).collect();
        let params = TverskyParams { alpha: 0.5, beta: 0.5, smooth: 0.0 };
        let t = tversky_index(&p, &g, &params).unwrap();
        assert!((t - 0.6).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let g = [0.0, 1.0, 1.0, 0.0];
        let params = TverskyParams::default();
        assert!((tversky_index(&g, &g, &params).unwrap() - 1.0).abs() < 1e-12);
        let p = [1.0, 0.0, 0.0, 1.0];
        assert!(tversky_index(&p, &g, &params).unwrap() < 1e-6);
    }

    #[test]
    fn tversky_rejects_bad_inputs() {
        let params = TverskyParams::default();
        assert!(tversky_index(&[0.5], &[1.0, 0.0], &params).is_err());
        assert!(tversky_index(&[1.5], &[1.0], &params).is_err());
        assert!(tversky_index(&[0.5], &[0.5], &params).is_err());
        assert!(TverskyParams { alpha: 0.0, beta: 0.0, smooth: 1e-6 }.validate().is_err());
    }

    #[test]
    fn empty_conventions() {
        let both = image_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 10 });
        assert_eq!(both.dice, 1.0);
        assert_eq!(both.precision, 1.0);
        let one = image_metrics(&ConfusionCounts { tp: 0, fp: 2, fn_: 0, tn: 8 });
        assert_eq!((one.dice, one.iou, one.recall, one.precision), (0.0, 0.0, 0.0, 0.0));
        let other = image_metrics(&ConfusionCounts { tp: 0, fp: 0, fn_: 5, tn: 5 });
        assert_eq!(other.recall, 0.0);
    }

    #[test]
    fn all_zero_prediction() {
        let c = confusion(&[0.0f64; 6], &[1, 1, 0, 1, 0, 0], 0.5).unwrap();
        assert_eq!((c.tp, c.fn_), (0, 3));
        assert_eq!(c.total(), 6);
    }

    #[test]
    fn perfect_counts() {
        let m = image_metrics(&ConfusionCounts { tp: 7, fp: 0, fn_: 0, tn: 3 });
        assert_eq!((m.dice, m.iou, m.recall, m.precision), (1.0, 1.0, 1.0, 1.0));
    }
}
