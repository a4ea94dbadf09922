//! The finite-difference suite behind the `gradcheck` command: every
//! primitive (`ops`), the composite blocks and the loss (`blocks`), and the
//! whole coupled network at side 32, width 4 (`full`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, check_param_gradients, GradCheckOptions, GradCheckReport};
use crate::error::Result;
use crate::graph::{BatchNormSpec, Graph, Mode, Var};
use crate::nn::{AttentionGate, CoupledNet, CoupledNetConfig, DecoderBlock, SplatBlock, SplatConfig};
use crate::params::{ParamKind, ParamSet};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteScale {
    Ops,
    Blocks,
    Full,
}

impl std::str::FromStr for SuiteScale {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ops" => Ok(SuiteScale::Ops),
            "blocks" => Ok(SuiteScale::Blocks),
            "full" => Ok(SuiteScale::Full),
            _ => Err(format!("unknown scale `{s}` (expected ops, blocks or full)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.input(rand_tensor(g.shape(y), seed));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

struct Runner {
    entries: Vec<SuiteEntry>,
}

impl Runner {
    fn inputs<F>(&mut self, name: &str, inputs: &[Tensor<f64>], opts: &GradCheckOptions, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let report = check_gradients(f, inputs, opts)?;
        self.push(name, report);
        Ok(())
    }

    fn push(&mut self, name: &str, report: GradCheckReport) {
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => e.report.merge(report),
            None => self.entries.push(SuiteEntry { name: name.to_string(), report }),
        }
    }

    fn block<F>(&mut self, name: &str, params: &ParamSet<f64>, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &ParamSet<f64>, &[Var]) -> Result<Var>,
    {
        let opts = GradCheckOptions::default();
        let r = check_gradients(|g, v| f(g, params, v), inputs, &opts)?;
        self.push(name, r);
        let r = check_param_gradients(
            params,
            &params.trainable_ids(),
            |g, p| {
                let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
                f(g, p, &vars)
            },
            &opts,
        )?;
        self.push(name, r);
        Ok(())
    }
}

fn ops(r: &mut Runner) -> Result<()> {
    let d = GradCheckOptions::default();
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
        let inputs = [rand_tensor(&[2, 3, 5, 6], 1), rand_tensor(&[4, 3, k, k], 2), rand_tensor(&[4], 3)];
        r.inputs("conv2d", &inputs, &d, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(g, y, 9)
        })?;
    }
    for (oh, ow) in [(8, 10), (2, 3), (7, 3)] {
        r.inputs("resample_bilinear", &[rand_tensor(&[2, 2, 4, 5], 4)], &d, |g, v| {
            let y = g.resample_bilinear(v[0], oh, ow)?;
            project(g, y, 5)
        })?;
    }
    r.inputs("max_pool2d", &[rand_tensor(&[1, 2, 6, 6], 6)], &d, |g, v| {
        let y = g.max_pool2d(v[0], 2, 2)?;
        project(g, y, 7)
    })?;
    let x = rand_tensor(&[2, 3, 4, 4], 8);
    r.inputs("global_avg_pool", std::slice::from_ref(&x), &d, |g, v| {
        let y = g.global_avg_pool(v[0])?;
        project(g, y, 1)
    })?;
    r.inputs("relu", std::slice::from_ref(&x), &d, |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 2)
    })?;
    r.inputs("sigmoid", std::slice::from_ref(&x), &d, |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 3)
    })?;
    for axis in 0..4 {
        r.inputs("softmax", std::slice::from_ref(&x), &d, |g, v| {
            let y = g.softmax_axis(v[0], axis)?;
            project(g, y, 4)
        })?;
    }
    r.inputs("sum_mean", std::slice::from_ref(&x), &d, |g, v| {
        let y = g.mul(v[0], v[0])?;
        let m = g.mean(y);
        let s = g.sum(v[0]);
        g.add(m, s)
    })?;
    r.inputs("reshape", &[x], &d, |g, v| {
        let y = g.reshape(v[0], &[6, 16])?;
        let y = g.sigmoid(y);
        project(g, y, 5)
    })?;
    let a = rand_tensor(&[2, 3, 3, 4], 10);
    let b = rand_tensor(&[2, 3, 3, 4], 11);
    r.inputs("add", &[a.clone(), b.clone()], &d, |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 1)
    })?;
    r.inputs("mul", &[a.clone(), b.clone()], &d, |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 2)
    })?;
    r.inputs("scale_channels", &[a.clone(), rand_tensor(&[2, 3], 12)], &d, |g, v| {
        let y = g.scale_channels(v[0], v[1])?;
        project(g, y, 3)
    })?;
    r.inputs("scale_spatial", &[a.clone(), rand_tensor(&[2, 1, 3, 4], 13)], &d, |g, v| {
        let y = g.scale_spatial(v[0], v[1])?;
        project(g, y, 4)
    })?;
    r.inputs("concat_slice", &[a, b, rand_tensor(&[2, 1, 3, 4], 14)], &d, |g, v| {
        let y = g.concat_channels(&[v[0], v[1], v[2]])?;
        let s = g.slice_channels(y, 2, 3)?;
        project(g, s, 5)
    })?;
    let fc = [rand_tensor(&[3, 5], 20), rand_tensor(&[4, 5], 21), rand_tensor(&[4], 22)];
    r.inputs("fully_connected", &fc, &d, |g, v| {
        let y = g.fully_connected(v[0], v[1], v[2])?;
        project(g, y, 23)
    })?;
    let mut params = ParamSet::<f64>::new();
    let rm = params.add("rm", Tensor::from_f64(vec![3], &[0.1, -0.2, 0.3])?, ParamKind::Buffer)?;
    let rv = params.add("rv", Tensor::from_f64(vec![3], &[0.5, 1.5, 2.0])?, ParamKind::Buffer)?;
    let bn = [rand_tensor(&[2, 3, 3, 3], 30), rand_tensor(&[3], 31), rand_tensor(&[3], 32)];
    for mode in [Mode::Train, Mode::Eval] {
        let opts = GradCheckOptions { mode, ..Default::default() };
        r.inputs("batch_norm", &bn, &opts, |g, v| {
            let y = g.batch_norm(v[0], v[1], v[2], &params, rm, rv, BatchNormSpec::default())?;
            project(g, y, 33)
        })?;
    }
    Ok(())
}

fn blocks(r: &mut Runner) -> Result<()> {
    for (radix, stride, cin) in [(2, 1, 8), (2, 2, 4), (1, 1, 8), (3, 1, 8)] {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let block = SplatBlock::new(&mut params, &mut rng, "blk", SplatConfig::new(2, radix, cin, 8, stride))?;
        params.jitter(51, 0.2);
        r.block("split_attention_block", &params, &[rand_tensor(&[2, cin, 4, 4], 52)], |g, p, v| {
            let y = block.forward(g, p, v[0])?.y;
            project(g, y, 53)
        })?;
    }

    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let gate = AttentionGate::new(&mut params, &mut rng, "gate", 4, 6, 4)?;
    params.jitter(61, 0.2);
    r.block("attention_gate", &params, &[rand_tensor(&[2, 4, 8, 8], 62), rand_tensor(&[2, 6, 4, 4], 63)], |g, p, v| {
        let out = gate.forward(g, p, v[0], v[1])?;
        project(g, out.x_hat, 64)
    })?;

    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let block = DecoderBlock::new(&mut params, &mut rng, "dec", 7, 4)?;
    params.jitter(71, 0.2);
    let inputs = [rand_tensor(&[2, 3, 2, 2], 72), rand_tensor(&[2, 2, 4, 4], 73), rand_tensor(&[2, 2, 4, 4], 74)];
    r.block("decoder_block", &params, &inputs, |g, p, v| {
        let y = block.forward(g, p, v[0], &[v[1], v[2]])?;
        project(g, y, 75)
    })?;

    let target: Vec<f64> = (0..32).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
    let target = Tensor::new(vec![2, 1, 4, 4], target)?;
    for (alpha, beta, smooth) in [(0.3, 0.7, 1e-6), (0.5, 0.5, 0.0), (0.9, 0.1, 1.0)] {
        r.inputs("tversky_loss", &[rand_tensor(&[2, 1, 4, 4], 40)], &GradCheckOptions::default(), |g, v| {
            let p = g.sigmoid(v[0]);
            g.tversky_loss(p, &target, alpha, beta, smooth)
        })?;
    }
    Ok(())
}

/// Whole network at side 32, base width 4, batch 4, in both BN modes. Three
/// sampled coordinates per parameter tensor; the objective is mean(p2).
pub fn full_network(mode: Mode) -> Result<GradCheckReport> {
    let mut params = ParamSet::<f64>::new();
    let net = CoupledNet::new(CoupledNetConfig::scaled(32, 4), &mut params, 80)?;
    params.jitter(81, 0.2);
    let image = rand_tensor(&[4, 3, 32, 32], 82).map(|v| 0.5 + 0.5 * v);
    let opts = GradCheckOptions { max_coords_per_tensor: Some(3), seed: 83, mode, ..Default::default() };
    check_param_gradients(
        &params,
        &params.trainable_ids(),
        |g, p| {
            let x = g.input(image.clone());
            let out = net.forward(g, p, x)?;
            // left unreduced so the checker differences it per pixel
            let n = g.value(out.p2).len();
            let scale = g.input(Tensor::full(g.shape(out.p2).to_vec(), 1.0 / n as f64));
            g.mul(out.p2, scale)
        },
        &opts,
    )
}

pub fn run_suite(scale: SuiteScale) -> Result<Vec<SuiteEntry>> {
    let mut r = Runner { entries: Vec::new() };
    match scale {
        SuiteScale::Ops => ops(&mut r)?,
        SuiteScale::Blocks => blocks(&mut r)?,
        SuiteScale::Full => {
            for (name, mode) in [("full_network_train", Mode::Train), ("full_network_eval", Mode::Eval)] {
                let rep = full_network(mode)?;
                r.push(name, rep);
            }
        }
    }
    Ok(r.entries)
}
