use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ImageMetrics;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, m: ImageMetrics) -> Self {
        ImageRecord { id: id.into(), dice: m.dice, iou: m.iou, recall: m.recall, precision: m.precision }
    }

    fn values(&self) -> [f64; 4] {
        [self.dice, self.iou, self.recall, self.precision]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

impl MetricSummary {
    fn from_array(v: [f64; 4]) -> Self {
        MetricSummary { dice: v[0], iou: v[1], recall: v[2], precision: v[3] }
    }
}

/// Per-image metrics with their macro mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f64,
    pub images: Vec<ImageRecord>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

/// Arithmetic mean and sample standard deviation (zero for one image).
/// Records are ordered by id and sums run over sorted values, so the report
/// does not depend on the order images were evaluated in.
pub fn macro_aggregate(mut images: Vec<ImageRecord>, threshold: f64) -> Result<MetricReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate an empty set of images".into()));
    }
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let n = images.len() as f64;
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for k in 0..4 {
        let mut vals: Vec<f64> = images.iter().map(|r| r.values()[k]).collect();
        vals.sort_by(f64::total_cmp);
        let m = vals.iter().sum::<f64>() / n;
        mean[k] = m;
        std[k] = if images.len() > 1 {
            (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
    }
    Ok(MetricReport { threshold, images, mean: MetricSummary::from_array(mean), std: MetricSummary::from_array(std) })
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricReport {
    /// One row per image followed by `mean` and `std` summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dice,iou,recall,precision\n");
        for r in &self.images {
            let _ = writeln!(out, "{},{},{},{},{}", csv_field(&r.id), r.dice, r.iou, r.recall, r.precision);
        }
        for (label, s) in [("mean", &self.mean), ("std", &self.std)] {
            let _ = writeln!(out, "{label},{},{},{},{}", s.dice, s.iou, s.recall, s.precision);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
