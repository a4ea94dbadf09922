use polyseg::gradcheck::{check_gradients, check_param_gradients, GradCheckOptions, GradCheckReport};
use polyseg::graph::BatchNormSpec;
use polyseg::nn::{AttentionGate, CoupledNet, CoupledNetConfig, DecoderBlock, SplatBlock, SplatConfig};
use polyseg::{Graph, Mode, ParamKind, ParamSet, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Projects `y` onto fixed random weights so every output coordinate
/// contributes a distinct amount to the scalar.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.input(rand_tensor(g.shape(y), seed));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

fn assert_ok(name: &str, r: &GradCheckReport) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_error < TOL, "{name}: max relative error {} at {:?} {:?}", r.max_rel_error, r.worst, r.worst_values);
}

fn check_inputs<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = check_gradients(f, inputs, &GradCheckOptions::default()).unwrap();
    assert_ok(name, &r);
}

#[test]
fn conv2d_all_inputs() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
        let x = rand_tensor(&[2, 3, 5, 6], 1);
        let w = rand_tensor(&[4, 3, k, k], 2);
        let b = rand_tensor(&[4], 3);
        check_inputs("conv2d", &[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(g, y, 9)
        });
    }
}

#[test]
fn resample_up_and_down() {
    for (oh, ow) in [(8, 10), (2, 3), (4, 5), (7, 3)] {
        check_inputs("resample", &[rand_tensor(&[2, 2, 4, 5], 4)], |g, v| {
            let y = g.resample_bilinear(v[0], oh, ow)?;
            project(g, y, 5)
        });
    }
}

#[test]
fn max_pool() {
    check_inputs("max_pool", &[rand_tensor(&[1, 2, 6, 6], 6)], |g, v| {
        let y = g.max_pool2d(v[0], 2, 2)?;
        project(g, y, 7)
    });
}

#[test]
fn pooling_and_pointwise() {
    let x = rand_tensor(&[2, 3, 4, 4], 8);
    check_inputs("global_avg_pool", std::slice::from_ref(&x), |g, v| {
        let y = g.global_avg_pool(v[0])?;
        project(g, y, 1)
    });
    check_inputs("relu", std::slice::from_ref(&x), |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 2)
    });
    check_inputs("sigmoid", std::slice::from_ref(&x), |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 3)
    });
    for axis in 0..4 {
        check_inputs("softmax", std::slice::from_ref(&x), |g, v| {
            let y = g.softmax_axis(v[0], axis)?;
            project(g, y, 4)
        });
    }
    check_inputs("mean", std::slice::from_ref(&x), |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.mean(y))
    });
    check_inputs("reshape", &[x], |g, v| {
        let y = g.reshape(v[0], &[6, 16])?;
        let y = g.sigmoid(y);
        project(g, y, 5)
    });
}

#[test]
fn binary_and_broadcast_ops() {
    let a = rand_tensor(&[2, 3, 3, 4], 10);
    let b = rand_tensor(&[2, 3, 3, 4], 11);
    check_inputs("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 1)
    });
    check_inputs("mul", &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 2)
    });
    check_inputs("scale_channels", &[a.clone(), rand_tensor(&[2, 3], 12)], |g, v| {
        let y = g.scale_channels(v[0], v[1])?;
        project(g, y, 3)
    });
    check_inputs("scale_spatial", &[a.clone(), rand_tensor(&[2, 1, 3, 4], 13)], |g, v| {
        let y = g.scale_spatial(v[0], v[1])?;
        project(g, y, 4)
    });
    check_inputs("concat_slice", &[a, b, rand_tensor(&[2, 1, 3, 4], 14)], |g, v| {
        let y = g.concat_channels(&[v[0], v[1], v[2]])?;
        let s = g.slice_channels(y, 2, 3)?;
        let t = g.sigmoid(s);
        project(g, t, 5)
    });
}

#[test]
fn fully_connected() {
    let x = rand_tensor(&[3, 5], 20);
    let w = rand_tensor(&[4, 5], 21);
    let b = rand_tensor(&[4], 22);
    check_inputs("fully_connected", &[x, w, b], |g, v| {
        let y = g.fully_connected(v[0], v[1], v[2])?;
        project(g, y, 23)
    });
}

#[test]
fn batch_norm_both_modes() {
    let mut params = ParamSet::<f64>::new();
    let rm = params.add("rm", Tensor::from_f64(vec![3], &[0.1, -0.2, 0.3]).unwrap(), ParamKind::Buffer).unwrap();
    let rv = params.add("rv", Tensor::from_f64(vec![3], &[0.5, 1.5, 2.0]).unwrap(), ParamKind::Buffer).unwrap();
    let inputs = [rand_tensor(&[2, 3, 3, 3], 30), rand_tensor(&[3], 31), rand_tensor(&[3], 32)];
    for mode in [Mode::Train, Mode::Eval] {
        let opts = GradCheckOptions { mode, ..Default::default() };
        let r = check_gradients(
            |g, v| {
                let y = g.batch_norm(v[0], v[1], v[2], &params, rm, rv, BatchNormSpec::default())?;
                project(g, y, 33)
            },
            &inputs,
            &opts,
        )
        .unwrap();
        assert_ok("batch_norm", &r);
    }
}

#[test]
fn tversky_loss_op() {
    let target: Vec<f64> = (0..2 * 16).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
    let target = Tensor::new(vec![2, 1, 4, 4], target).unwrap();
    for (alpha, beta, smooth) in [(0.3, 0.7, 1e-6), (0.5, 0.5, 0.0), (0.9, 0.1, 1.0)] {
        check_inputs("tversky", &[rand_tensor(&[2, 1, 4, 4], 40)], |g, v| {
            let p = g.sigmoid(v[0]);
            g.tversky_loss(p, &target, alpha, beta, smooth)
        });
    }
}

fn check_block<F>(name: &str, params: &ParamSet<f64>, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>, &[Var]) -> Result<Var>,
{
    let r = check_gradients(|g, v| f(g, params, v), inputs, &GradCheckOptions::default()).unwrap();
    assert_ok(&format!("{name} inputs"), &r);
    let ids = params.trainable_ids();
    let x: Vec<Tensor<f64>> = inputs.to_vec();
    let r = check_param_gradients(
        params,
        &ids,
        |g, p| {
            let vars: Vec<Var> = x.iter().map(|t| g.input(t.clone())).collect();
            f(g, p, &vars)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_ok(&format!("{name} params"), &r);
}

#[test]
fn split_attention_block() {
    for (radix, stride, cin) in [(2, 1, 8), (2, 2, 4), (1, 1, 8), (3, 1, 8)] {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let block = SplatBlock::new(&mut params, &mut rng, "blk", SplatConfig::new(2, radix, cin, 8, stride)).unwrap();
        params.jitter(51, 0.2);
        check_block("splat", &params, &[rand_tensor(&[2, cin, 4, 4], 52)], |g, p, v| {
            let y = block.forward(g, p, v[0])?.y;
            project(g, y, 53)
        });
    }
}

#[test]
fn attention_gate() {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let gate = AttentionGate::new(&mut params, &mut rng, "gate", 4, 6, 4).unwrap();
    params.jitter(61, 0.2);
    let inputs = [rand_tensor(&[2, 4, 8, 8], 62), rand_tensor(&[2, 6, 4, 4], 63)];
    check_block("gate", &params, &inputs, |g, p, v| {
        let out = gate.forward(g, p, v[0], v[1])?;
        project(g, out.x_hat, 64)
    });
}

#[test]
fn decoder_block() {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let block = DecoderBlock::new(&mut params, &mut rng, "dec", 3 + 2 + 2, 4).unwrap();
    params.jitter(71, 0.2);
    let inputs = [rand_tensor(&[2, 3, 2, 2], 72), rand_tensor(&[2, 2, 4, 4], 73), rand_tensor(&[2, 2, 4, 4], 74)];
    check_block("decoder", &params, &inputs, |g, p, v| {
        let y = block.forward(g, p, v[0], &[v[1], v[2]])?;
        project(g, y, 75)
    });
}

fn full_network_check(mode: Mode) -> GradCheckReport {
    let cfg = CoupledNetConfig::scaled(32, 4);
    let mut params = ParamSet::<f64>::new();
    let net = CoupledNet::new(cfg, &mut params, 80).unwrap();
    params.jitter(81, 0.2);
    let image = rand_tensor(&[4, 3, 32, 32], 82).map(|v| 0.5 + 0.5 * v);
    let ids = params.trainable_ids();
    let opts = GradCheckOptions { max_coords_per_tensor: Some(3), seed: 83, mode, ..Default::default() };
    check_param_gradients(
        &params,
        &ids,
        |g, p| {
            let x = g.input(image.clone());
            let out = net.forward(g, p, x)?;
            // mean(p2), left unreduced so the checker differences it per pixel
            let n = g.value(out.p2).len();
            let scale = g.input(Tensor::full(g.shape(out.p2).to_vec(), 1.0 / n as f64));
            g.mul(out.p2, scale)
        },
        &opts,
    )
    .unwrap()
}

#[test]
fn full_network_side32_width4() {
    for mode in [Mode::Train, Mode::Eval] {
        let r = full_network_check(mode);
        eprintln!("{mode:?}: {} coordinates, {} skipped at kinks, max rel {:.3e}", r.checked, r.kinks_skipped, r.max_rel_error);
        assert_ok("full network", &r);
    }
}
