use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trainer::Model;
use crate::data::dataset::resize_image;
use crate::data::image::write_gray8;
use crate::data::{read_image, resize_pair, Image, Mask, SamplePair};
use crate::error::{Error, Result};
use crate::kernels;
use crate::metrics::{confusion, curves, image_metrics, macro_aggregate, CurveData, ImageRecord, MetricReport};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Pooled-pixel curves; `None` when the ground truth has a single class.
    pub curves: Option<CurveData>,
}

fn assemble(ids: Vec<String>, probs: &[Vec<f32>], samples: &[SamplePair], threshold: f64) -> Result<Evaluation> {
    let mut records = Vec::with_capacity(samples.len());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for ((id, p), s) in ids.into_iter().zip(probs).zip(samples) {
        records.push(ImageRecord::new(id, image_metrics(&confusion(p, &s.mask.data, threshold)?)));
        scores.extend(p.iter().map(|&v| v as f64));
        labels.extend_from_slice(&s.mask.data);
    }
    let report = macro_aggregate(records, threshold)?;
    let has_both = labels.contains(&0) && labels.contains(&1);
    let curves = if has_both { Some(curves(&scores, &labels)?) } else { None };
    Ok(Evaluation { report, curves })
}

/// Eval-mode forward on every sample (resized to the model side when
/// needed), `p2` binarized at `threshold`, per-image metrics with macro
/// aggregation and pooled-pixel curves.
pub fn evaluate(model: &Model, samples: &[SamplePair], threshold: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let side = model.config.side;
    let sized = samples.iter().map(|s| resize_pair(s, side)).collect::<Result<Vec<_>>>()?;
    let probs = model.probabilities(&sized, true)?;
    assemble(sized.iter().map(|s| s.id.clone()).collect(), &probs, &sized, threshold)
}

/// Uses the ground-truth masks as predictions.
pub fn evaluate_oracle(samples: &[SamplePair], threshold: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let probs: Vec<Vec<f32>> = samples.iter().map(|s| s.mask.data.iter().map(|&v| v as f32).collect()).collect();
    assemble(samples.iter().map(|s| s.id.clone()).collect(), &probs, samples, threshold)
}

pub struct Inference {
    pub mask: Mask,
    /// Final gate coefficients scaled to `0..=255`, at the input resolution.
    pub attention: Option<Vec<u8>>,
}

fn to_planar(img: &Image) -> Tensor<f32> {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in img.data.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c];
        }
    }
    Tensor::new(vec![1, 3, h, w], data).expect("planar shape")
}

/// Runs the model at its side and maps `p2` (and the final attention map)
/// back to the image's own resolution bilinearly before thresholding.
pub fn infer_image(model: &Model, image: &Image, threshold: f64) -> Result<Inference> {
    let side = model.config.side;
    let (h, w) = (image.height, image.width);
    let pred = model.predict(to_planar(&resize_image(image, side, side)))?;
    let back = |t: &Tensor<f32>| kernels::resample_forward(t.data(), 1, side, side, h, w);
    let prob = back(&pred.p2);
    let mask = Mask { height: h, width: w, data: prob.iter().map(|&p| (p as f64 >= threshold) as u8).collect() };
    let attention = pred.attention.as_ref().map(|a| back(a).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect());
    Ok(Inference { mask, attention })
}

/// Writes the binarized mask (0/255) and, when requested, the attention map.
pub fn infer_file(model: &Model, input: &Path, output: &Path, threshold: f64, attention: Option<&Path>) -> Result<()> {
    let image = read_image(input)?;
    let out = infer_image(model, &image, threshold)?;
    write_gray8(output, out.mask.width, out.mask.height, &out.mask.to_gray8())?;
    if let Some(path) = attention {
        let a = out.attention.ok_or_else(|| Error::Config("attention gates are disabled in this model".into()))?;
        write_gray8(path, image.width, image.height, &a)?;
    }
    Ok(())
}
