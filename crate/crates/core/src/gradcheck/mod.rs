//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::kernels::compensated_sum;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Probe at most this many coordinates per tensor (all when `None`).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Skip coordinates whose ±eps probes change a ReLU sign or pooling
    /// winner; central differences are not exact across such kinks.
    pub skip_kinks: bool,
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, max_coords_per_tensor: None, seed: 0, skip_kinks: true, mode: Mode::Train }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub checked: usize,
    pub kinks_skipped: usize,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), index));
            self.worst_values = (analytic, numeric);
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.worst.is_some() && (self.worst.is_none() || other.max_rel_error > self.max_rel_error) {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_values = other.worst_values;
        }
        self.checked += other.checked;
        self.kinks_skipped += other.kinks_skipped;
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn coords(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords_per_tensor {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut idx = sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Central difference of `Σ y`, accumulated element-wise so the rounding of
/// the final sum does not enter the difference.
fn central(plus: &[f64], minus: &[f64], eps: f64) -> f64 {
    compensated_sum(plus.iter().zip(minus).map(|(p, m)| p - m)) / (2.0 * eps)
}

/// Scalar objective for the analytic pass: the output itself, or the sum of
/// its elements when it is not a scalar.
fn objective(g: &mut Graph<f64>, out: Var) -> Var {
    if g.value(out).len() == 1 {
        out
    } else {
        g.sum(out)
    }
}

/// Compares the analytic gradient of `f` with respect to every input against
/// `(f(x + eps) - f(x - eps)) / (2 eps)`, returning the maximum relative error.
/// A non-scalar output is checked as the sum of its elements.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<(Vec<f64>, u64)> {
        let mut g = Graph::new(opts.mode).with_kink_tracking();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).data().to_vec(), g.kink_digest()))
    };

    let mut g = Graph::new(opts.mode).with_kink_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base_digest = g.kink_digest();
    let loss = objective(&mut g, out);
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]).map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; t.len()]);
        for i in coords(t.len(), opts, ti as u64) {
            let x0 = t.data()[i];
            work[ti].data_mut()[i] = x0 + opts.eps;
            let (fp, dp) = eval(&work)?;
            work[ti].data_mut()[i] = x0 - opts.eps;
            let (fm, dm) = eval(&work)?;
            work[ti].data_mut()[i] = x0;
            if opts.skip_kinks && (dp != base_digest || dm != base_digest) {
                report.kinks_skipped += 1;
                continue;
            }
            report.record(&format!("input{ti}"), i, analytic[i], central(&fp, &fm, opts.eps));
        }
    }
    Ok(report)
}

/// Like [`check_gradients`] but probes parameters of a [`ParamSet`]; `f`
/// pulls whatever parameters it needs through [`Graph::param`].
pub fn check_param_gradients<F>(
    params: &ParamSet<f64>,
    ids: &[ParamId],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let eval = |p: &ParamSet<f64>| -> Result<(Vec<f64>, u64)> {
        let mut g = Graph::new(opts.mode).with_kink_tracking();
        let out = f(&mut g, p)?;
        Ok((g.value(out).data().to_vec(), g.kink_digest()))
    };

    let mut g = Graph::new(opts.mode).with_kink_tracking();
    let out = f(&mut g, params)?;
    let base_digest = g.kink_digest();
    let loss = objective(&mut g, out);
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for &id in ids {
        let len = params.get(id).len();
        let analytic = grads.param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len]);
        for i in coords(len, opts, id.index() as u64) {
            let x0 = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = x0 + opts.eps;
            let (fp, dp) = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x0 - opts.eps;
            let (fm, dm) = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x0;
            if opts.skip_kinks && (dp != base_digest || dm != base_digest) {
                report.kinks_skipped += 1;
                continue;
            }
            report.record(params.name(id), i, analytic[i], central(&fp, &fm, opts.eps));
        }
    }
    Ok(report)
}

pub mod suite;
pub use suite::{run_suite, SuiteEntry, SuiteScale, TOLERANCE};
