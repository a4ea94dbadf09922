//! Split-attention residual blocks and the five-stage encoder.
//!
//! A block with cardinality `K` and radix `R` computes `G = K·R` feature
//! groups `U_i` (3×3 conv → BN → ReLU, `C/K` channels each). Within cardinal
//! group `k` the `R` splits are summed, globally pooled and passed through a
//! two-layer MLP whose `R·C/K` logits become per-channel split weights
//! (softmax over splits when `R > 1`, sigmoid when `R = 1`). The weighted
//! split sum of every group is concatenated, projected by a 1×1 conv + BN
//! whose scale starts at zero, and added to the (possibly transformed) input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::layers::{Conv2d, ConvBn, Linear};
use crate::params::ParamSet;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplatConfig {
    pub cardinality: usize,
    pub radix: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub hidden: usize,
}

impl SplatConfig {
    pub fn new(cardinality: usize, radix: usize, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        SplatConfig {
            cardinality,
            radix,
            in_channels,
            out_channels,
            stride,
            hidden: (out_channels / 4).max(8),
        }
    }

    /// Total number of feature groups `K·R`.
    pub fn groups(&self) -> usize {
        self.cardinality * self.radix
    }

    /// Channels per cardinal group.
    pub fn group_width(&self) -> usize {
        self.out_channels / self.cardinality
    }

    pub fn needs_shortcut(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.cardinality == 0 || self.radix == 0 || self.in_channels == 0 || self.out_channels == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("split-attention extents must be positive: {self:?}")));
        }
        if !self.out_channels.is_multiple_of(self.cardinality) {
            return Err(Error::Config(format!(
                "out_channels {} not divisible by cardinality {}",
                self.out_channels, self.cardinality
            )));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Config(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplatBlock {
    pub cfg: SplatConfig,
    /// All `G` group transforms fused into one convolution with `R·C` outputs;
    /// group `i` owns output channels `i·C/K .. (i+1)·C/K`.
    pub splits: ConvBn,
    pub fc1: Vec<Linear>,
    pub fc2: Vec<Linear>,
    pub proj: ConvBn,
    pub shortcut: Option<ConvBn>,
}

pub struct SplatOutput {
    pub y: Var,
    /// Per cardinal group, split weights of shape `[B, R, C/K]`.
    pub attention: Vec<Var>,
}

impl SplatBlock {
    pub fn new<T: Real, R: Rng>(params: &mut ParamSet<T>, rng: &mut R, name: &str, cfg: SplatConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.out_channels;
        let ck = cfg.group_width();
        let splits = ConvBn::new(params, rng, &format!("{name}.splits"), cfg.in_channels, cfg.radix * c, 3, cfg.stride, true)?;
        let mut fc1 = Vec::new();
        let mut fc2 = Vec::new();
        for k in 0..cfg.cardinality {
            fc1.push(Linear::new(params, rng, &format!("{name}.attn{k}.fc1"), ck, cfg.hidden)?);
            fc2.push(Linear::new(params, rng, &format!("{name}.attn{k}.fc2"), cfg.hidden, cfg.radix * ck)?);
        }
        let proj = ConvBn::with_gamma(params, rng, &format!("{name}.proj"), c, c, 1, 1, false, 0.0)?;
        let shortcut = if cfg.needs_shortcut() {
            Some(ConvBn::new(params, rng, &format!("{name}.shortcut"), cfg.in_channels, c, 1, cfg.stride, false)?)
        } else {
            None
        };
        Ok(SplatBlock { cfg, splits, fc1, fc2, proj, shortcut })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var) -> Result<SplatOutput> {
        let cfg = &self.cfg;
        let (_, cin, _, _) = g.value(x).dims4()?;
        if cin != cfg.in_channels {
            return Err(Error::shape("split_attention", format!("input has {cin} channels, block expects {}", cfg.in_channels)));
        }
        let (k_groups, radix, ck) = (cfg.cardinality, cfg.radix, cfg.group_width());
        let u = self.splits.forward(g, p, x)?;
        let batch = g.shape(u)[0];
        let mut groups = Vec::with_capacity(k_groups);
        let mut attention = Vec::with_capacity(k_groups);
        for k in 0..k_groups {
            let splits: Vec<Var> = (0..radix)
                .map(|r| g.slice_channels(u, (k * radix + r) * ck, ck))
                .collect::<Result<_>>()?;
            let mut gathered = splits[0];
            for &s in &splits[1..] {
                gathered = g.add(gathered, s)?;
            }
            let pooled = g.global_avg_pool(gathered)?;
            let h = self.fc1[k].forward(g, p, pooled)?;
            let h = g.relu(h);
            let logits = self.fc2[k].forward(g, p, h)?;
            let logits = g.reshape(logits, &[batch, radix, ck])?;
            let weights = if radix > 1 { g.softmax_axis(logits, 1)? } else { g.sigmoid(logits) };
            attention.push(weights);
            let mut fused = None;
            for (r, &s) in splits.iter().enumerate() {
                let a = g.slice_channels(weights, r, 1)?;
                let a = g.reshape(a, &[batch, ck])?;
                let term = g.scale_channels(s, a)?;
                fused = Some(match fused {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
            groups.push(fused.expect("radix >= 1"));
        }
        let v = if groups.len() == 1 { groups[0] } else { g.concat_channels(&groups)? };
        let branch = self.proj.forward(g, p, v)?;
        let skip = match &self.shortcut {
            Some(t) => t.forward(g, p, x)?,
            None => x,
        };
        let y = g.add(skip, branch)?;
        Ok(SplatOutput { y, attention })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub widths: [usize; 5],
    pub blocks: [usize; 5],
    pub cardinality: usize,
    pub radix: usize,
    pub stem_width: usize,
}

impl EncoderConfig {
    /// Scaled-down layout: widths `w, 2w, 4w, 8w, 8w`, one block per stage.
    pub fn from_base_width(base: usize, cardinality: usize, radix: usize) -> Self {
        EncoderConfig {
            widths: [base, 2 * base, 4 * base, 8 * base, 8 * base],
            blocks: [1; 5],
            cardinality,
            radix,
            stem_width: base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.widths.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::Config("encoder widths and block counts must be positive".into()));
        }
        for &w in &self.widths {
            SplatConfig::new(self.cardinality, self.radix, w, w, 1).validate()?;
        }
        Ok(())
    }

    /// Block configurations in forward order, per stage.
    pub fn block_configs(&self) -> Vec<Vec<SplatConfig>> {
        let mut cin = self.stem_width;
        (0..5)
            .map(|s| {
                (0..self.blocks[s])
                    .map(|b| {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let cfg = SplatConfig::new(self.cardinality, self.radix, cin, self.widths[s], stride);
                        cin = self.widths[s];
                        cfg
                    })
                    .collect()
            })
            .collect()
    }
}

/// Stem (stride-2 3×3 conv) followed by five stages of split-attention
/// blocks; stages 2–5 halve the resolution in their first block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub stem: ConvBn,
    pub stages: Vec<Vec<SplatBlock>>,
    /// 1×1 projections fusing a foreign same-scale feature into the inputs of
    /// stages 2–5 (present only for the second coupled UNet).
    pub fusion: Vec<Conv2d>,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cfg: &EncoderConfig,
        in_channels: usize,
        with_fusion: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvBn::new(params, rng, &format!("{name}.stem"), in_channels, cfg.stem_width, 3, 2, true)?;
        let mut stages = Vec::new();
        for (s, configs) in cfg.block_configs().into_iter().enumerate() {
            let blocks = configs
                .into_iter()
                .enumerate()
                .map(|(b, bc)| SplatBlock::new(params, rng, &format!("{name}.stage{}.block{b}", s + 1), bc))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        let fusion = if with_fusion {
            (1..5)
                .map(|s| {
                    let w = cfg.widths[s - 1];
                    Conv2d::new(params, rng, &format!("{name}.fuse{}", s + 1), 2 * w, w, 1, 1, false)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Encoder { cfg: cfg.clone(), stem, stages, fusion })
    }

    /// Feature pyramid at strides 2, 4, 8, 16, 32. When `foreign` is given
    /// (four maps matching levels 1–4), level `i` is fused with `foreign[i]`
    /// before entering stage `i + 1`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamSet<T>, image: Var, foreign: Option<&[Var]>) -> Result<Vec<Var>> {
        let (_, _, h, w) = g.value(image).dims4()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape("encoder", format!("input side {h}×{w} is not divisible by 32")));
        }
        if let Some(f) = foreign {
            if f.len() != 4 || self.fusion.len() != 4 {
                return Err(Error::shape("encoder", "cross fusion needs four foreign maps and a fusion-enabled encoder"));
            }
        }
        let mut x = self.stem.forward(g, p, image)?;
        let mut pyramid = Vec::with_capacity(5);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                if let Some(f) = foreign {
                    let cat = g.concat_channels(&[x, f[s - 1]])?;
                    x = self.fusion[s - 1].forward(g, p, cat)?;
                }
            }
            for b in blocks {
                x = b.forward(g, p, x)?.y;
            }
            pyramid.push(x);
        }
        Ok(pyramid)
    }
}
