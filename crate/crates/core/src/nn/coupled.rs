//! Two coupled attention-gated UNets.
//!
//! UNet-1 maps the image to `p1`. Its probability map (or logits) is combined
//! with the image and fed to UNet-2, whose encoder stages also receive the
//! same-scale UNet-1 encoder features and whose decoder levels also receive
//! the same-scale UNet-1 decoder features. UNet-2 yields the final map `p2`.
//!
//! Decoder level `j` (coarse to fine) upsamples the previous level by 2 and
//! concatenates the gated skip: encoder levels 4..1 for `j = 0..3` and the
//! UNet input itself at full resolution for `j = 4`. The gate's coarse
//! signal is the decoder feature before upsampling (the bottleneck for
//! `j = 0`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::gate::{default_inter_channels, AttentionGate};
use crate::nn::layers::{Conv2d, ConvBn};
use crate::nn::splat::{Encoder, EncoderConfig};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMode {
    /// Each image channel multiplied by UNet-1's map.
    Multiply,
    /// Image and map concatenated, then a 1×1 conv back to three channels.
    ConcatProject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeSource {
    Probability,
    Logits,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoupledNetConfig {
    pub side: usize,
    pub in_channels: usize,
    pub encoder: EncoderConfig,
    /// Output widths of the five decoder levels, coarse to fine.
    pub decoder_widths: [usize; 5],
    pub enable_attention_gates: bool,
    pub enable_cross_connections: bool,
    pub enable_second_unet: bool,
    pub bridge_mode: BridgeMode,
    pub bridge_source: BridgeSource,
}

impl CoupledNetConfig {
    /// Desk-scale layout derived from one base width, `K = 2`, `R = 2`.
    pub fn scaled(side: usize, base_width: usize) -> Self {
        CoupledNetConfig {
            side,
            in_channels: 3,
            encoder: EncoderConfig::from_base_width(base_width, 2, 2),
            decoder_widths: [4 * base_width, 2 * base_width, base_width, base_width, base_width],
            enable_attention_gates: true,
            enable_cross_connections: true,
            enable_second_unet: true,
            bridge_mode: BridgeMode::Multiply,
            bridge_source: BridgeSource::Probability,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || !self.side.is_multiple_of(32) {
            return Err(Error::Config(format!("input side {} must be a positive multiple of 32", self.side)));
        }
        if self.in_channels == 0 || self.decoder_widths.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        self.encoder.validate()
    }

    /// `(coarse channels, skip channels)` feeding decoder level `j`.
    pub(crate) fn level_inputs(&self, j: usize) -> (usize, usize) {
        let coarse = if j == 0 { self.encoder.widths[4] } else { self.decoder_widths[j - 1] };
        let skip = if j < 4 { self.encoder.widths[3 - j] } else { self.in_channels };
        (coarse, skip)
    }
}

/// Upsample ×2, concatenate skips, then (3×3 conv → BN → ReLU) twice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
}

impl DecoderBlock {
    pub fn new<T: Real, R: Rng>(params: &mut ParamSet<T>, rng: &mut R, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(DecoderBlock {
            conv1: ConvBn::new(params, rng, &format!("{name}.conv1"), cin, cout, 3, 1, true)?,
            conv2: ConvBn::new(params, rng, &format!("{name}.conv2"), cout, cout, 3, 1, true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamSet<T>, coarse: Var, skips: &[Var]) -> Result<Var> {
        let (b, _, h, w) = g.value(coarse).dims4()?;
        for &s in skips {
            let (sb, _, sh, sw) = g.value(s).dims4()?;
            if (sb, sh, sw) != (b, 2 * h, 2 * w) {
                return Err(Error::shape(
                    "decoder_block",
                    format!("skip {sb}×{sh}×{sw} does not match upsampled {b}×{}×{}", 2 * h, 2 * w),
                ));
            }
        }
        let up = g.resample_bilinear(coarse, 2 * h, 2 * w)?;
        let x = if skips.is_empty() {
            up
        } else {
            let mut parts = vec![up];
            parts.extend_from_slice(skips);
            g.concat_channels(&parts)?
        };
        let x = self.conv1.forward(g, p, x)?;
        self.conv2.forward(g, p, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNet {
    pub encoder: Encoder,
    pub gates: Vec<Option<AttentionGate>>,
    pub decoder: Vec<DecoderBlock>,
    pub head: Conv2d,
}

pub struct UNetOutput {
    pub logits: Var,
    pub prob: Var,
    /// Encoder pyramid, strides 2..32.
    pub encoder: Vec<Var>,
    /// Decoder levels, coarse to fine (strides 16..1).
    pub decoder: Vec<Var>,
    /// Attention maps per decoder level (`None` when gates are disabled).
    pub alphas: Vec<Option<Var>>,
}

impl UNet {
    fn new<T: Real, R: Rng>(params: &mut ParamSet<T>, rng: &mut R, name: &str, cfg: &CoupledNetConfig, coupled: bool) -> Result<Self> {
        let encoder = Encoder::new(params, rng, &format!("{name}.encoder"), &cfg.encoder, cfg.in_channels, coupled)?;
        let mut gates = Vec::new();
        let mut decoder = Vec::new();
        for j in 0..5 {
            let (coarse, skip) = cfg.level_inputs(j);
            gates.push(if cfg.enable_attention_gates {
                Some(AttentionGate::new(params, rng, &format!("{name}.gate{j}"), skip, coarse, default_inter_channels(skip))?)
            } else {
                None
            });
            let cross = if coupled { cfg.decoder_widths[j] } else { 0 };
            decoder.push(DecoderBlock::new(params, rng, &format!("{name}.decoder{j}"), coarse + skip + cross, cfg.decoder_widths[j])?);
        }
        let head = Conv2d::new(params, rng, &format!("{name}.head"), cfg.decoder_widths[4], 1, 1, 1, true)?;
        Ok(UNet { encoder, gates, decoder, head })
    }

    /// `foreign_encoder` (levels 1–4) and `foreign_decoder` (all five levels)
    /// come from the other UNet when cross connections are active.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamSet<T>,
        input: Var,
        foreign_encoder: Option<&[Var]>,
        foreign_decoder: Option<&[Var]>,
    ) -> Result<UNetOutput> {
        let enc = self.encoder.forward(g, p, input, foreign_encoder)?;
        let mut coarse = enc[4];
        let mut decoder = Vec::with_capacity(5);
        let mut alphas = Vec::with_capacity(5);
        for j in 0..5 {
            let skip = if j < 4 { enc[3 - j] } else { input };
            let skip = match &self.gates[j] {
                Some(gate) => {
                    let out = gate.forward(g, p, skip, coarse)?;
                    alphas.push(Some(out.alpha));
                    out.x_hat
                }
                None => {
                    alphas.push(None);
                    skip
                }
            };
            let mut skips = vec![skip];
            if let Some(fd) = foreign_decoder {
                skips.push(fd[j]);
            }
            coarse = self.decoder[j].forward(g, p, coarse, &skips)?;
            decoder.push(coarse);
        }
        let logits = self.head.forward(g, p, coarse)?;
        let prob = g.sigmoid(logits);
        Ok(UNetOutput { logits, prob, encoder: enc, decoder, alphas })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledNet {
    pub cfg: CoupledNetConfig,
    pub unet1: UNet,
    pub unet2: Option<UNet>,
    pub bridge: Option<Conv2d>,
}

pub struct NetworkOutput {
    /// UNet-1 probabilities `[B, 1, S, S]` (auxiliary output).
    pub p1: Var,
    /// Final probabilities `[B, 1, S, S]`; equals `p1` without a second UNet.
    pub p2: Var,
    pub unet1: UNetOutput,
    pub unet2: Option<UNetOutput>,
}

impl NetworkOutput {
    /// Attention map of the finest gate of the last UNet.
    pub fn final_attention(&self) -> Option<Var> {
        self.unet2.as_ref().unwrap_or(&self.unet1).alphas[4]
    }
}

impl CoupledNet {
    /// Registers all parameters (prefixed `unet1.`, `unet2.`, `bridge.`).
    pub fn new<T: Real>(cfg: CoupledNetConfig, params: &mut ParamSet<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unet1 = UNet::new(params, &mut rng, "unet1", &cfg, false)?;
        let (unet2, bridge) = if cfg.enable_second_unet {
            let bridge = match cfg.bridge_mode {
                BridgeMode::Multiply => None,
                BridgeMode::ConcatProject => {
                    Some(Conv2d::new(params, &mut rng, "bridge.proj", cfg.in_channels + 1, cfg.in_channels, 1, 1, true)?)
                }
            };
            let coupled = cfg.enable_cross_connections;
            (Some(UNet::new(params, &mut rng, "unet2", &cfg, coupled)?), bridge)
        } else {
            (None, None)
        };
        Ok(CoupledNet { cfg, unet1, unet2, bridge })
    }

    pub fn unet1_forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamSet<T>, image: Var) -> Result<UNetOutput> {
        self.check_input(g, image)?;
        self.unet1.forward(g, p, image, None, None)
    }

    /// Combines the image with UNet-1's last map to form UNet-2's input.
    pub fn bridge_combine<T: Real>(&self, g: &mut Graph<T>, p: &ParamSet<T>, image: Var, f1: Var) -> Result<Var> {
        let (b, c, h, w) = g.value(image).dims4()?;
        if g.shape(f1) != [b, 1, h, w] {
            return Err(Error::shape("bridge_combine", format!("map {:?} for image {:?}", g.shape(f1), [b, c, h, w])));
        }
        match &self.bridge {
            None => g.scale_spatial(image, f1),
            Some(proj) => {
                let cat = g.concat_channels(&[image, f1])?;
                proj.forward(g, p, cat)
            }
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamSet<T>, image: Var) -> Result<NetworkOutput> {
        let u1 = self.unet1_forward(g, p, image)?;
        let Some(unet2) = &self.unet2 else {
            return Ok(NetworkOutput { p1: u1.prob, p2: u1.prob, unet1: u1, unet2: None });
        };
        let f1 = match self.cfg.bridge_source {
            BridgeSource::Probability => u1.prob,
            BridgeSource::Logits => u1.logits,
        };
        let input2 = self.bridge_combine(g, p, image, f1)?;
        let (fe, fd) = if self.cfg.enable_cross_connections {
            (Some(&u1.encoder[..4]), Some(&u1.decoder[..]))
        } else {
            (None, None)
        };
        let u2 = unet2.forward(g, p, input2, fe, fd)?;
        Ok(NetworkOutput { p1: u1.prob, p2: u2.prob, unet1: u1, unet2: Some(u2) })
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, image: Var) -> Result<()> {
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != self.cfg.in_channels || h != self.cfg.side || w != self.cfg.side {
            return Err(Error::shape(
                "coupled_net",
                format!("expected B×{}×{}×{}, got {:?}", self.cfg.in_channels, self.cfg.side, self.cfg.side, g.value(image).shape()),
            ));
        }
        Ok(())
    }

    /// Parameter-name prefix of the first UNet, used for phase-1 training.
    pub const UNET1_PREFIX: &'static str = "unet1.";
}

/// Convenience: builds a batch tensor from an image and runs the network.
pub fn predict<T: Real>(net: &CoupledNet, params: &ParamSet<T>, mode: crate::graph::Mode, images: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new(mode);
    let x = g.input(images);
    let out = net.forward(&mut g, params, x)?;
    Ok((g.value(out.p1).clone(), g.value(out.p2).clone()))
}
