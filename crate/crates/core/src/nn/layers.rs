use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{BatchNormSpec, Graph, Var};
use crate::params::{ParamId, ParamKind, ParamSet};
use crate::tensor::{Real, Tensor};

/// Kaiming-style fan-in uniform initialization, drawn in f64 so both
/// precisions see the same values for a given seed.
pub(crate) fn kaiming<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("positive extents")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = params.add(format!("{name}.weight"), kaiming(rng, vec![cout, cin, kernel, kernel], fan_in), ParamKind::Trainable)?;
        let bias = if bias {
            Some(params.add(format!("{name}.bias"), Tensor::zeros(vec![cout]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, cin, cout, kernel, stride, pad: kernel / 2 })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(p, self.weight);
        let b = self.bias.map(|b| g.param(p, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + if self.bias.is_some() { self.cout } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, channels: usize, gamma_init: f64) -> Result<Self> {
        let c = vec![channels];
        Ok(BatchNorm2d {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(c.clone(), T::from_f64_lossy(gamma_init)), ParamKind::Trainable)?,
            beta: params.add(format!("{name}.beta"), Tensor::zeros(c.clone()), ParamKind::Trainable)?,
            running_mean: params.add(format!("{name}.running_mean"), Tensor::zeros(c.clone()), ParamKind::Buffer)?,
            running_var: params.add(format!("{name}.running_var"), Tensor::full(c, T::one()), ParamKind::Buffer)?,
            channels,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var) -> Result<Var> {
        let gamma = g.param(p, self.gamma);
        let beta = g.param(p, self.beta);
        g.batch_norm(x, gamma, beta, p, self.running_mean, self.running_var, BatchNormSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(params: &mut ParamSet<T>, rng: &mut R, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Linear {
            weight: params.add(format!("{name}.weight"), kaiming(rng, vec![cout, cin], cin), ParamKind::Trainable)?,
            bias: params.add(format!("{name}.bias"), Tensor::zeros(vec![cout]), ParamKind::Trainable)?,
            cin,
            cout,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        g.fully_connected(x, w, b)
    }
}

/// Convolution (no bias) → batch norm → optional ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Result<Self> {
        Self::with_gamma(params, rng, name, cin, cout, kernel, stride, relu, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gamma<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        gamma: f64,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::new(params, rng, &format!("{name}.conv"), cin, cout, kernel, stride, false)?,
            bn: BatchNorm2d::new(params, &format!("{name}.bn"), cout, gamma)?,
            relu,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.bn.forward(g, p, y)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}
