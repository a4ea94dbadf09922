//! Tape-based reverse-mode differentiation.
//!
//! Every operation is evaluated eagerly and appended to the tape, so the
//! tape order is always a valid topological order. [`Graph::backward`] walks
//! it once in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamKind, ParamSet};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormSpec {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormSpec {
    fn default() -> Self {
        BatchNormSpec { eps: 1e-5, momentum: 0.1 }
    }
}

enum Op<T> {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Resample { x: Var, h: usize, w: usize },
    MaxPool { x: Var, arg: Vec<usize> },
    GlobalAvgPool { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Linear { x: Var, w: Var, b: Var },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleChannels { x: Var, s: Var },
    ScaleSpatial { x: Var, m: Var },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    Tversky { p: Var, target: Vec<T>, alpha: T, beta: T, smooth: T, batch: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation tape owned by a single forward/backward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    param_vars: HashMap<ParamId, Var>,
    frozen: Option<Vec<bool>>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
    track_kinks: bool,
    kink_digest: u64,
    conv_flops: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv(mut h: u64, word: u64) -> u64 {
    for byte in word.to_le_bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            param_vars: HashMap::new(),
            frozen: None,
            buffer_updates: Vec::new(),
            track_kinks: false,
            kink_digest: FNV_OFFSET,
            conv_flops: 0,
        }
    }

    /// Records a digest of every piecewise branch taken (ReLU signs, pooling
    /// winners) so finite-difference probes can tell when they crossed a kink.
    pub fn with_kink_tracking(mut self) -> Self {
        self.track_kinks = true;
        self
    }

    /// Parameters whose flag is `true` are recorded without gradient.
    pub fn with_frozen(mut self, frozen: Vec<bool>) -> Self {
        self.frozen = Some(frozen);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn kink_digest(&self) -> u64 {
        self.kink_digest
    }

    /// Multiply-accumulate count (×2) of every convolution recorded so far.
    pub fn conv_flops(&self) -> u64 {
        self.conv_flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Running-statistic updates produced by train-mode normalization.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter value; repeated requests share one node so uses
    /// accumulate into a single gradient.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let frozen = self.frozen.as_ref().is_some_and(|f| f[id.0]);
        let needs = params.kind(id) == ParamKind::Trainable && !frozen;
        let v = self.push(params.get(id).clone(), Op::Param, needs);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::shape("conv2d", format!("kernel expects {wcin} input channels, input has {cin}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}×{kw} larger than padded input {h}×{wd}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let geom = ConvGeom { batch, cin, h, w: wd, cout, kh, kw, stride, pad };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let (oh, ow) = (geom.out_h(), geom.out_w());
        self.conv_flops += 2 * (batch * cout * oh * ow * cin * kh * kw) as u64;
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::new(vec![batch, cout, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, needs))
    }

    /// Bilinear resize with the align-corners=false convention.
    pub fn resample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("resample_bilinear", "output extents must be positive"));
        }
        let out = kernels::resample_forward(self.value(x).data(), b * c, h, w, oh, ow);
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::Resample { x, h, w }, needs))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if k == 0 || stride == 0 {
            return Err(Error::shape("max_pool2d", "window and stride must be positive"));
        }
        if h < k || w < k {
            return Err(Error::shape("max_pool2d", format!("window {k} larger than input {h}×{w}")));
        }
        let (out, arg) = kernels::max_pool_forward(self.value(x).data(), b * c, h, w, k, stride);
        if self.track_kinks {
            self.kink_digest = arg.iter().fold(self.kink_digest, |d, &i| fnv(d, i as u64));
        }
        let value = Tensor::new(vec![b, c, (h - k) / stride + 1, (w - k) / stride + 1], out)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::MaxPool { x, arg }, needs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let n = T::from_usize(h * w).unwrap();
        let out = self.value(x).data().chunks(h * w).map(|p| kernels::compensated_sum(p.iter().copied()) / n).collect();
        let value = Tensor::new(vec![b, c], out)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, needs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        if self.track_kinks {
            let mut d = self.kink_digest;
            for chunk in self.value(x).data().chunks(64) {
                let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (((v > T::zero()) as u64) << i));
                d = fnv(d, bits);
            }
            self.kink_digest = d;
        }
        let needs = self.ng(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let needs = self.ng(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = shape[..axis].iter().product();
        let len = shape[axis];
        let inner = shape[axis + 1..].iter().product();
        let out = kernels::softmax_forward(self.value(x).data(), outer, len, inner);
        let value = Tensor::new(shape, out)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, needs))
    }

    /// Batch normalization over batch and spatial axes. Train mode uses batch
    /// statistics and queues a running-statistics update; eval mode uses the
    /// running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        params: &ParamSet<T>,
        running_mean: ParamId,
        running_var: ParamId,
        spec: BatchNormSpec,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", format!("affine parameters must have shape [{c}]")));
        }
        let hw = h * w;
        let eps = T::from_f64_lossy(spec.eps);
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            if b * hw < 2 {
                return Err(Error::shape("batch_norm", "train mode needs at least two values per channel"));
            }
            let (mean, var) = kernels::channel_mean_var(self.value(x).data(), b, c, hw);
            let m = T::from_f64_lossy(spec.momentum);
            let n = T::from_usize(b * hw).unwrap();
            let unbias = n / (n - T::one());
            let rm = params.get(running_mean).data();
            let rv = params.get(running_var).data();
            let new_mean = (0..c).map(|i| (T::one() - m) * rm[i] + m * mean[i]).collect();
            let new_var = (0..c).map(|i| (T::one() - m) * rv[i] + m * var[i] * unbias).collect();
            self.buffer_updates.push((running_mean, Tensor::new(vec![c], new_mean)?));
            self.buffer_updates.push((running_var, Tensor::new(vec![c], new_var)?));
            (mean, var)
        } else {
            (params.get(running_mean).data().to_vec(), params.get(running_var).data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, needs))
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, cin) = match *self.shape(x) {
            [bb, ci] => (bb, ci),
            ref s => return Err(Error::shape("fully_connected", format!("input must be B×C, got {s:?}"))),
        };
        let (cout, wcin) = match *self.shape(w) {
            [co, ci] => (co, ci),
            ref s => return Err(Error::shape("fully_connected", format!("weight must be Cout×Cin, got {s:?}"))),
        };
        if wcin != cin || self.shape(b) != [cout] {
            return Err(Error::shape(
                "fully_connected",
                format!("input {:?}, weight {:?}, bias {:?} disagree", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(
            batch,
            cin,
            cout,
            T::one(),
            self.value(x).data(),
            (cin as isize, 1),
            self.value(w).data(),
            (1, cin as isize),
            T::one(),
            &mut out,
            (cout as isize, 1),
        );
        let value = Tensor::new(vec![batch, cout], out)?;
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Concatenation along axis 1 (channels).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_channels", "no parts"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat_channels", "parts need a channel axis"));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape("concat_channels", format!("part {s:?} does not match {s0:?}")));
            }
            channels += s[1];
        }
        let batch = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut out = Vec::with_capacity(batch * channels * inner);
        for bi in 0..batch {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[bi * c * inner..(bi + 1) * c * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, needs))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || len == 0 || start + len > s[1] {
            return Err(Error::shape("slice_channels", format!("range {start}..{} invalid for {s:?}", start + len)));
        }
        let inner: usize = s[2..].iter().product();
        let c = s[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * len * inner);
        for bi in 0..s[0] {
            out.extend_from_slice(&xv[(bi * c + start) * inner..(bi * c + start + len) * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let value = Tensor::new(shape, out)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::Slice { x, start }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `x[B,C,H,W] * s[B,C]` broadcast over space.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.shape(s) != [b, c] {
            return Err(Error::shape("scale_channels", format!("scale {:?} for input {:?}", self.shape(s), [b, c, h, w])));
        }
        let hw = h * w;
        let sv = self.value(s).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * sv[i / hw]).collect();
        let value = Tensor::new(vec![b, c, h, w], data)?;
        let needs = self.ng(x) || self.ng(s);
        Ok(self.push(value, Op::ScaleChannels { x, s }, needs))
    }

    /// `x[B,C,H,W] * m[B,1,H,W]` broadcast over channels.
    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.shape(m) != [b, 1, h, w] {
            return Err(Error::shape("scale_spatial", format!("map {:?} for input {:?}", self.shape(m), [b, c, h, w])));
        }
        let hw = h * w;
        let mv = self.value(m).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mv[(i / (c * hw)) * hw + i % hw])
            .collect();
        let value = Tensor::new(vec![b, c, h, w], data)?;
        let needs = self.ng(x) || self.ng(m);
        Ok(self.push(value, Op::ScaleSpatial { x, m }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = kernels::compensated_sum(self.value(x).data().iter().copied());
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = kernels::compensated_sum(self.value(x).data().iter().copied()) / n;
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Mean over the batch of `1 - T_b`, where `T_b` is the Tversky index of
    /// sample `b` of `p` against the binary `target` (same layout as `p`).
    pub fn tversky_loss(&mut self, p: Var, target: &Tensor<T>, alpha: f64, beta: f64, smooth: f64) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::shape("tversky_loss", format!("{:?} vs {:?}", self.shape(p), target.shape())));
        }
        let batch = self.shape(p)[0];
        let (a, bt, e) = (T::from_f64_lossy(alpha), T::from_f64_lossy(beta), T::from_f64_lossy(smooth));
        let n = self.value(p).len() / batch;
        let pv = self.value(p).data();
        let tv = target.data();
        let mut total = T::zero();
        for bi in 0..batch {
            let (tp, fp, fneg) = tversky_sums(&pv[bi * n..(bi + 1) * n], &tv[bi * n..(bi + 1) * n]);
            total += T::one() - (tp + e) / (tp + a * fp + bt * fneg + e);
        }
        let loss = total / T::from_usize(batch).unwrap();
        let needs = self.ng(p);
        let op = Op::Tversky { p, target: tv.to_vec(), alpha: a, beta: bt, smooth: e, batch };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of values used
    /// several times are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param => {
                    leaves.insert(Var(i), dy);
                    continue;
                }
                op => self.backprop(op, &node.value, &dy, &mut grads),
            }
        }
        let param_grads = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| leaves.get(&v).map(|g| (id, g.clone())))
            .collect();
        Ok(Gradients { leaves, params: param_grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn take_slot(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n]))
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.take_slot(grads, *x);
                let mut dw = self.take_slot(grads, *w);
                let mut db = b.and_then(|b| self.take_slot(grads, b));
                kernels::conv2d_backward(geom, xv, wv, dy, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    grads[b.0] = Some(d);
                }
            }
            Op::Resample { x, h, w } => {
                let (b, c, oh, ow) = out.dims4().unwrap();
                if let Some(dx) = self.slot(grads, *x) {
                    kernels::resample_backward(dy, b * c, *h, *w, oh, ow, dx);
                }
            }
            Op::MaxPool { x, arg } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (&i, &g) in arg.iter().zip(dy) {
                        dx[i] += g;
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4().unwrap();
                let n = T::from_usize(h * w).unwrap();
                if let Some(dx) = self.slot(grads, *x) {
                    for (plane, &g) in dx.chunks_mut(h * w).zip(dy) {
                        for d in plane {
                            *d += g / n;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(xv) {
                        if v > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                let yv = out.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &g), &y) in dx.iter_mut().zip(dy).zip(yv) {
                        *d += g * y * (T::one() - y);
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(dx) = self.slot(grads, *x) {
                    kernels::softmax_backward(out.data(), dy, *outer, *len, *inner, dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (b, c, h, w) = out.dims4().unwrap();
                let hw = h * w;
                let n = T::from_usize(b * hw).unwrap();
                let gv = self.value(*gamma).data();
                let mut dsum = vec![T::zero(); c];
                let mut dxhat_sum = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            dsum[ch] += dy[i];
                            dxhat_sum[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gamma) {
                    for ch in 0..c {
                        dg[ch] += dxhat_sum[ch];
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for ch in 0..c {
                        db[ch] += dsum[ch];
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for i in off..off + hw {
                                if *batch_stats {
                                    dx[i] += k * (dy[i] - dsum[ch] / n - xhat[i] * dxhat_sum[ch] / n);
                                } else {
                                    dx[i] += k * dy[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (batch, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let cout = out.shape()[1];
                if let Some(db) = self.slot(grads, *b) {
                    for row in dy.chunks(cout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
                let xv = self.value(*x).data();
                if let Some(dw) = self.slot(grads, *w) {
                    // dW[cout, cin] += dY^T[cout, batch] * X[batch, cin]
                    T::gemm(cout, batch, cin, T::one(), dy, (1, cout as isize), xv, (cin as isize, 1), T::one(), dw, (cin as isize, 1));
                }
                let wv = self.value(*w).data();
                if let Some(dx) = self.slot(grads, *x) {
                    T::gemm(batch, cout, cin, T::one(), dy, (cout as isize, 1), wv, (cin as isize, 1), T::one(), dx, (cin as isize, 1));
                }
            }
            Op::Concat { parts } => {
                let batch = out.shape()[0];
                let total = out.shape()[1];
                let inner: usize = out.shape()[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(dp) = self.slot(grads, p) {
                        for bi in 0..batch {
                            let src = &dy[(bi * total + offset) * inner..(bi * total + offset + c) * inner];
                            for (d, &g) in dp[bi * c * inner..(bi + 1) * c * inner].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let s = self.shape(*x).to_vec();
                let inner: usize = s[2..].iter().product();
                let len = out.shape()[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for bi in 0..s[0] {
                        let dst = &mut dx[(bi * s[1] + start) * inner..(bi * s[1] + start + len) * inner];
                        for (d, &g) in dst.iter_mut().zip(&dy[bi * len * inner..(bi + 1) * len * inner]) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        for (d, &g) in d.iter_mut().zip(dy) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let ov = self.value(other).data();
                    if let Some(d) = self.slot(grads, v) {
                        for ((d, &g), &o) in d.iter_mut().zip(dy).zip(ov) {
                            *d += g * o;
                        }
                    }
                }
            }
            Op::ScaleChannels { x, s } => {
                let (_, _, h, w) = out.dims4().unwrap();
                let hw = h * w;
                let sv = self.value(*s).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, (d, &g)) in dx.iter_mut().zip(dy).enumerate() {
                        *d += g * sv[i / hw];
                    }
                }
                let xv = self.value(*x).data();
                if let Some(ds) = self.slot(grads, *s) {
                    for (j, d) in ds.iter_mut().enumerate() {
                        *d += dy[j * hw..(j + 1) * hw].iter().zip(&xv[j * hw..(j + 1) * hw]).map(|(&g, &v)| g * v).sum::<T>();
                    }
                }
            }
            Op::ScaleSpatial { x, m } => {
                let (_, c, h, w) = out.dims4().unwrap();
                let hw = h * w;
                let mv = self.value(*m).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, (d, &g)) in dx.iter_mut().zip(dy).enumerate() {
                        *d += g * mv[(i / (c * hw)) * hw + i % hw];
                    }
                }
                let xv = self.value(*x).data();
                if let Some(dm) = self.slot(grads, *m) {
                    for (i, (&g, &v)) in dy.iter().zip(xv).enumerate() {
                        dm[(i / (c * hw)) * hw + i % hw] += g * v;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx {
                        *d += dy[0];
                    }
                }
            }
            Op::Mean { x } => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx {
                        *d += dy[0] / n;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &g) in dx.iter_mut().zip(dy) {
                        *d += g;
                    }
                }
            }
            Op::Tversky { p, target, alpha, beta, smooth, batch } => {
                let pv = self.value(*p).data();
                let n = pv.len() / batch;
                let scale = -dy[0] / T::from_usize(*batch).unwrap();
                if let Some(dp) = self.slot(grads, *p) {
                    for bi in 0..*batch {
                        let r = bi * n..(bi + 1) * n;
                        let (tp, fp, fneg) = tversky_sums(&pv[r.clone()], &target[r.clone()]);
                        let num = tp + *smooth;
                        let den = tp + *alpha * fp + *beta * fneg + *smooth;
                        for (d, &g) in dp[r.clone()].iter_mut().zip(&target[r]) {
                            let dden = g + *alpha * (T::one() - g) - *beta * g;
                            *d += scale * (g * den - num * dden) / (den * den);
                        }
                    }
                }
            }
        }
    }
}

/// Soft true-positive, false-positive and false-negative sums.
pub(crate) fn tversky_sums<T: Real>(p: &[T], g: &[T]) -> (T, T, T) {
    let pairs = || p.iter().zip(g);
    (
        kernels::compensated_sum(pairs().map(|(&pi, &gi)| pi * gi)),
        kernels::compensated_sum(pairs().map(|(&pi, &gi)| pi * (T::one() - gi))),
        kernels::compensated_sum(pairs().map(|(&pi, &gi)| (T::one() - pi) * gi)),
    )
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    leaves: HashMap<Var, Vec<T>>,
    params: HashMap<ParamId, Vec<T>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.leaves.get(&v).map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).unwrap())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(|g| g.as_slice())
    }

    /// Writes parameter gradients into the tensors' gradient slots.
    pub fn write_to(&self, params: &mut ParamSet<T>) {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        for id in ids {
            params.get_mut(id).set_grad(self.params[&id].clone()).expect("gradient shape");
        }
    }
}

/// Applies queued running-statistics updates.
pub fn apply_buffer_updates<T: Real>(params: &mut ParamSet<T>, updates: Vec<(ParamId, Tensor<T>)>) {
    for (id, t) in updates {
        *params.get_mut(id) = t;
    }
}
