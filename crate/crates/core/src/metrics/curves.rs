use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveData {
    /// `(false positive rate, true positive rate)` from (0, 0) to (1, 1).
    pub roc: Vec<(f64, f64)>,
    /// `(recall, precision)`, starting at (0, 1).
    pub pr: Vec<(f64, f64)>,
    pub auc: f64,
    /// Average precision: `Σ (R_n − R_{n−1}) · P_n` over thresholds.
    pub map: f64,
}

/// Sweeps a threshold over every distinct score (descending). Tied scores
/// move together, so the trapezoidal AUC equals the probability that a
/// random positive outscores a random negative (ties counted half).
pub fn curves(scores: &[f64], labels: &[u8]) -> Result<CurveData> {
    if scores.len() != labels.len() {
        return Err(Error::shape("curves", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(format!(
            "ROC is undefined without both classes ({positives} positives, {negatives} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let mut roc = vec![(0.0, 0.0)];
    let mut pr = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut auc, mut ap) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (fpr, tpr) = (fp as f64 / n, tp as f64 / p);
        let (prev_fpr, prev_tpr) = *roc.last().unwrap();
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        roc.push((fpr, tpr));
        let precision = tp as f64 / (tp + fp) as f64;
        let prev_recall = pr.last().unwrap().0;
        ap += (tpr - prev_recall) * precision;
        pr.push((tpr, precision));
    }
    Ok(CurveData { roc, pr, auc, map: ap })
}

impl CurveData {
    pub fn roc_csv(&self) -> String {
        points_csv("fpr,tpr", &self.roc)
    }

    pub fn pr_csv(&self) -> String {
        points_csv("recall,precision", &self.pr)
    }
}

fn points_csv(header: &str, pts: &[(f64, f64)]) -> String {
    let mut out = format!("{header}\n");
    for (x, y) in pts {
        let _ = writeln!(out, "{x},{y}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let c = curves(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.map, 1.0);
        assert_eq!(*c.roc.first().unwrap(), (0.0, 0.0));
        assert_eq!(*c.roc.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn constant_scores_are_chance() {
        let c = curves(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(c.auc, 0.5);
        assert_eq!(c.roc, vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn degenerate_labels_rejected() {
        assert!(curves(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(curves(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(curves(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn csv_headers() {
        let c = curves(&[0.9, 0.1], &[1, 0]).unwrap();
        assert!(c.roc_csv().starts_with("fpr,tpr\n0,0\n"));
        assert!(c.pr_csv().starts_with("recall,precision\n"));
    }
}
