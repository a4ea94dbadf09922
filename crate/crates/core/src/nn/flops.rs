//! Analytic operation and parameter counts for a [`CoupledNetConfig`].
//!
//! Counting rules, per image (batch 1):
//! - convolution: `2 · Cout · H' · W' · Cin · kh · kw` (bias adds not counted)
//! - fully connected: `2 · Cin · Cout`
//! - batch norm: 2 per element; ReLU: 1; sigmoid: 4; softmax: 3
//! - bilinear resampling: 7 per output element (identity resizes are free)
//! - elementwise add / broadcast multiply: 1 per output element
//! - global average pooling: 1 per input element
//! - concatenation, slicing and reshapes: free

use serde::{Deserialize, Serialize};

use crate::nn::coupled::{BridgeMode, CoupledNetConfig};
use crate::nn::gate::default_inter_channels;
use crate::nn::splat::SplatConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub conv_flops: u64,
    pub other_flops: u64,
    pub params: u64,
}

impl FlopReport {
    pub fn total_flops(&self) -> u64 {
        self.conv_flops + self.other_flops
    }
}

#[derive(Default)]
struct Tally {
    r: FlopReport,
}

impl Tally {
    /// Returns the output side.
    fn conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize, side: usize, bias: bool) -> usize {
        let pad = k / 2;
        let out = (side + 2 * pad - k) / stride + 1;
        self.r.conv_flops += 2 * (cout * out * out * cin * k * k) as u64;
        self.r.params += (cout * cin * k * k + if bias { cout } else { 0 }) as u64;
        out
    }

    fn conv_bn(&mut self, cin: usize, cout: usize, k: usize, stride: usize, side: usize, relu: bool) -> usize {
        let out = self.conv(cin, cout, k, stride, side, false);
        let n = (cout * out * out) as u64;
        self.r.other_flops += 2 * n + if relu { n } else { 0 };
        self.r.params += 2 * cout as u64;
        out
    }

    fn fc(&mut self, cin: usize, cout: usize) {
        self.r.other_flops += 2 * (cin * cout) as u64;
        self.r.params += (cin * cout + cout) as u64;
    }

    fn other(&mut self, n: usize) {
        self.r.other_flops += n as u64;
    }

    fn resample(&mut self, channels: usize, from: usize, to: usize) {
        if from != to {
            self.other(7 * channels * to * to);
        }
    }

    fn splat(&mut self, cfg: &SplatConfig, side: usize) -> usize {
        let (c, ck, radix) = (cfg.out_channels, cfg.group_width(), cfg.radix);
        let out = self.conv_bn(cfg.in_channels, radix * c, 3, cfg.stride, side, true);
        let hw = out * out;
        for _ in 0..cfg.cardinality {
            self.other((radix - 1) * ck * hw); // split sum
            self.other(ck * hw); // pooling
            self.fc(ck, cfg.hidden);
            self.other(cfg.hidden);
            self.fc(cfg.hidden, radix * ck);
            self.other(if radix > 1 { 3 } else { 4 } * radix * ck);
            self.other(radix * ck * hw + (radix - 1) * ck * hw); // weighted fusion
        }
        self.conv_bn(c, c, 1, 1, out, false);
        if cfg.needs_shortcut() {
            self.conv_bn(cfg.in_channels, c, 1, cfg.stride, side, false);
        }
        self.other(c * hw); // residual add
        out
    }

    fn gate(&mut self, f_x: usize, f_g: usize, x_side: usize, g_side: usize) {
        let inter = default_inter_channels(f_x);
        self.resample(f_x, x_side, g_side);
        self.conv(f_x, inter, 1, 1, g_side, false);
        self.conv(f_g, inter, 1, 1, g_side, true);
        let n = inter * g_side * g_side;
        self.other(2 * n); // add + relu
        self.conv(inter, 1, 1, 1, g_side, true);
        self.other(4 * g_side * g_side);
        self.resample(1, g_side, x_side);
        self.other(f_x * x_side * x_side);
    }

    fn unet(&mut self, cfg: &CoupledNetConfig, coupled: bool) {
        let enc = &cfg.encoder;
        let mut side = self.conv_bn(cfg.in_channels, enc.stem_width, 3, 2, cfg.side, true);
        let mut sides = Vec::new();
        for (s, blocks) in enc.block_configs().iter().enumerate() {
            if s > 0 && coupled {
                let w = enc.widths[s - 1];
                self.conv(2 * w, w, 1, 1, side, false);
            }
            for b in blocks {
                side = self.splat(b, side);
            }
            sides.push(side);
        }
        let mut coarse_side = sides[4];
        for j in 0..5 {
            let (coarse, skip) = cfg.level_inputs(j);
            let fine = 2 * coarse_side;
            if cfg.enable_attention_gates {
                self.gate(skip, coarse, fine, coarse_side);
            }
            self.resample(coarse, coarse_side, fine);
            let cross = if coupled { cfg.decoder_widths[j] } else { 0 };
            let w = cfg.decoder_widths[j];
            self.conv_bn(coarse + skip + cross, w, 3, 1, fine, true);
            self.conv_bn(w, w, 3, 1, fine, true);
            coarse_side = fine;
        }
        self.conv(cfg.decoder_widths[4], 1, 1, 1, cfg.side, true);
        self.other(4 * cfg.side * cfg.side);
    }
}

/// Operation and trainable-parameter counts for one image.
pub fn estimate_flops_params(cfg: &CoupledNetConfig) -> FlopReport {
    let mut t = Tally::default();
    t.unet(cfg, false);
    if cfg.enable_second_unet {
        let s = cfg.side;
        match cfg.bridge_mode {
            BridgeMode::Multiply => t.other(cfg.in_channels * s * s),
            BridgeMode::ConcatProject => {
                t.conv(cfg.in_channels + 1, cfg.in_channels, 1, 1, s, true);
            }
        }
        t.unet(cfg, cfg.enable_cross_connections);
    }
    t.r
}

/// Counts for a single convolution layer, exposed for unit checks.
pub fn conv_cost(cin: usize, cout: usize, k: usize, stride: usize, side: usize, bias: bool) -> FlopReport {
    let mut t = Tally::default();
    t.conv(cin, cout, k, stride, side, bias);
    t.r
}
