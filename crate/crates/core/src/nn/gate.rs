//! Gated skip connection: a coarse decoder feature `g` decides how much of
//! each location of the encoder feature `x` passes through.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::layers::Conv2d;
use crate::params::ParamSet;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionGate {
    /// 1×1, `F_g → F_i`, with bias.
    pub w_g: Conv2d,
    /// 1×1, `F_x → F_i`, no bias.
    pub w_x: Conv2d,
    /// 1×1, `F_i → 1`, with bias.
    pub psi: Conv2d,
    pub inter: usize,
}

pub struct GateOutput {
    pub x_hat: Var,
    /// Coefficient map `[B, 1, H_x, W_x]`, strictly inside (0, 1).
    pub alpha: Var,
}

/// Default intermediate width: half the skip width, at least 4.
pub fn default_inter_channels(f_x: usize) -> usize {
    (f_x / 2).max(4)
}

impl AttentionGate {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        f_x: usize,
        f_g: usize,
        inter: usize,
    ) -> Result<Self> {
        if inter == 0 {
            return Err(Error::Config("attention gate intermediate width must be positive".into()));
        }
        Ok(AttentionGate {
            w_g: Conv2d::new(params, rng, &format!("{name}.w_g"), f_g, inter, 1, 1, true)?,
            w_x: Conv2d::new(params, rng, &format!("{name}.w_x"), f_x, inter, 1, 1, false)?,
            psi: Conv2d::new(params, rng, &format!("{name}.psi"), inter, 1, 1, 1, true)?,
            inter,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var, gating: Var) -> Result<GateOutput> {
        let (bx, _, hx, wx) = g.value(x).dims4()?;
        let (bg, _, hg, wg) = g.value(gating).dims4()?;
        if bx != bg {
            return Err(Error::shape("attention_gate", format!("batch {bx} vs {bg}")));
        }
        if hg > hx || wg > wx {
            return Err(Error::shape("attention_gate", format!("gating map {hg}×{wg} is finer than skip {hx}×{wx}")));
        }
        let x_small = g.resample_bilinear(x, hg, wg)?;
        let theta = self.w_x.forward(g, p, x_small)?;
        let phi = self.w_g.forward(g, p, gating)?;
        let q = g.add(theta, phi)?;
        let q = g.relu(q);
        let logits = self.psi.forward(g, p, q)?;
        let coarse = g.sigmoid(logits);
        let alpha = g.resample_bilinear(coarse, hx, wx)?;
        let x_hat = g.scale_spatial(x, alpha)?;
        Ok(GateOutput { x_hat, alpha })
    }
}
