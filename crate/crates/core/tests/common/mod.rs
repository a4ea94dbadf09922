//! Independent reference implementations used by the property and
//! acceptance tests. Plain nested loops over flat NCHW arrays, f64 only.
#![allow(dead_code)]

use polyseg::nn::SplatConfig;
use polyseg::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(n, seed, -1.0, 1.0)).unwrap()
}

fn param<'a>(p: &'a ParamSet<f64>, name: &str) -> &'a [f64] {
    p.get(p.id(name).unwrap_or_else(|| panic!("no parameter `{name}`"))).data()
}

/// Zero-padded cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn conv(x: &[f64], b: usize, cin: usize, h: usize, w: usize, wt: &[f64], cout: usize, k: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for c in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let yy = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                s += x[((n * cin + c) * h + yy as usize) * w + xx as usize] * wt[((o * cin + c) * k + u) * k + v];
                            }
                        }
                    }
                    y[((n * cout + o) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    (y, oh, ow)
}

/// Batch statistics (biased variance) when `train`, running statistics otherwise.
pub fn batch_norm(x: &mut [f64], b: usize, c: usize, hw: usize, p: &ParamSet<f64>, name: &str, train: bool) {
    let gamma = param(p, &format!("{name}.gamma"));
    let beta = param(p, &format!("{name}.beta"));
    for ch in 0..c {
        let (mean, var) = if train {
            let vals: Vec<f64> = (0..b).flat_map(|n| (0..hw).map(move |i| (n, i))).map(|(n, i)| x[(n * c + ch) * hw + i]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (m, vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64)
        } else {
            (param(p, &format!("{name}.running_mean"))[ch], param(p, &format!("{name}.running_var"))[ch])
        };
        let inv = 1.0 / (var + 1e-5).sqrt();
        for n in 0..b {
            for i in 0..hw {
                let v = &mut x[(n * c + ch) * hw + i];
                *v = gamma[ch] * (*v - mean) * inv + beta[ch];
            }
        }
    }
}

pub struct SplatReference {
    pub y: Vec<f64>,
    /// `[k][n][r][c]` split weights.
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
    pub out_hw: (usize, usize),
}

/// Loop-by-loop split-attention block:
/// `U_i` = ReLU(BN(conv3x3(x))) for the `K·R` groups, per cardinal group the
/// split sum is pooled, sent through FC → ReLU → FC, turned into split
/// weights (softmax over r, or sigmoid for one split), the weighted split sum
/// is concatenated over groups, projected by BN(conv1x1) and added to the
/// shortcut.
pub fn splat(p: &ParamSet<f64>, name: &str, cfg: &SplatConfig, x: &[f64], b: usize, h: usize, w: usize, train: bool) -> SplatReference {
    let (kk, rr, c) = (cfg.cardinality, cfg.radix, cfg.out_channels);
    let ck = c / kk;
    let (mut u, oh, ow) = conv(x, b, cfg.in_channels, h, w, param(p, &format!("{name}.splits.conv.weight")), rr * c, 3, cfg.stride);
    let hw = oh * ow;
    batch_norm(&mut u, b, rr * c, hw, p, &format!("{name}.splits.bn"), train);
    u.iter_mut().for_each(|v| *v = v.max(0.0));
    let at = |n: usize, group: usize, ch: usize, i: usize| u[((n * rr * c) + group * ck + ch) * hw + i];

    let mut v = vec![0.0; b * c * hw];
    let mut weights = vec![vec![vec![vec![0.0; ck]; rr]; b]; kk];
    for k in 0..kk {
        let w1 = param(p, &format!("{name}.attn{k}.fc1.weight"));
        let b1 = param(p, &format!("{name}.attn{k}.fc1.bias"));
        let w2 = param(p, &format!("{name}.attn{k}.fc2.weight"));
        let b2 = param(p, &format!("{name}.attn{k}.fc2.bias"));
        let hidden = b1.len();
        for n in 0..b {
            let mut s = vec![0.0; ck];
            for (ch, sc) in s.iter_mut().enumerate() {
                for r in 0..rr {
                    for i in 0..hw {
                        *sc += at(n, k * rr + r, ch, i);
                    }
                }
                *sc /= hw as f64;
            }
            let z: Vec<f64> = (0..hidden).map(|j| (b1[j] + (0..ck).map(|q| w1[j * ck + q] * s[q]).sum::<f64>()).max(0.0)).collect();
            let logits: Vec<f64> = (0..rr * ck).map(|j| b2[j] + (0..hidden).map(|q| w2[j * hidden + q] * z[q]).sum::<f64>()).collect();
            for ch in 0..ck {
                if rr == 1 {
                    weights[k][n][0][ch] = 1.0 / (1.0 + (-logits[ch]).exp());
                } else {
                    let m = (0..rr).map(|r| logits[r * ck + ch]).fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = (0..rr).map(|r| (logits[r * ck + ch] - m).exp()).collect();
                    let tot: f64 = e.iter().sum();
                    for r in 0..rr {
                        weights[k][n][r][ch] = e[r] / tot;
                    }
                }
                for i in 0..hw {
                    v[(n * c + k * ck + ch) * hw + i] = (0..rr).map(|r| weights[k][n][r][ch] * at(n, k * rr + r, ch, i)).sum();
                }
            }
        }
    }
    let (mut y, _, _) = conv(&v, b, c, oh, ow, param(p, &format!("{name}.proj.conv.weight")), c, 1, 1);
    batch_norm(&mut y, b, c, hw, p, &format!("{name}.proj.bn"), train);
    let skip = if cfg.needs_shortcut() {
        let (mut s, _, _) = conv(x, b, cfg.in_channels, h, w, param(p, &format!("{name}.shortcut.conv.weight")), c, 1, cfg.stride);
        batch_norm(&mut s, b, c, hw, p, &format!("{name}.shortcut.bn"), train);
        s
    } else {
        x.to_vec()
    };
    y.iter_mut().zip(&skip).for_each(|(a, s)| *a += s);
    SplatReference { y, weights, out_hw: (oh, ow) }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by enumerating every pair.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// `2Σpg / (Σp + Σg)`.
pub fn soft_dice(p: &[f64], g: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    2.0 * inter / (p.iter().sum::<f64>() + g.iter().sum::<f64>())
}

/// Destination of each source pixel under the pinned quarter turn:
/// `out[r][c] = in[h-1-c][r]`, i.e. source `(y, x)` lands at `(x, h-1-y)`.
pub fn rotate_quarter(m: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[x * h + (h - 1 - y)] = m[y * w + x];
        }
    }
    out
}
