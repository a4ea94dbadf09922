//! Seeded synthetic polyp-like blobs on a textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::SamplePair;
use super::image::{Image, Mask};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    pub side: usize,
    /// Inclusive range of ellipses per sample.
    pub blobs: (usize, usize),
    /// Inclusive range of minor/major axis ratio.
    pub eccentricity: (f64, f64),
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { count: 200, side: 64, blobs: (1, 3), eccentricity: (0.5, 1.0), noise: 0.08, seed: 0 }
    }
}

pub const MIN_COVERAGE: f64 = 0.01;
pub const MAX_COVERAGE: f64 = 0.60;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || !self.side.is_multiple_of(32) {
            return Err(Error::Config(format!("synthetic side {} must be a positive multiple of 32", self.side)));
        }
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be at least 1".into()));
        }
        let (lo, hi) = self.blobs;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("blob range {lo}..={hi} is empty or starts at 0")));
        }
        let (a, b) = self.eccentricity;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return Err(Error::Config(format!("eccentricity range {a}..={b} must lie in (0, 1]")));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise amplitude {} outside [0, 0.5]", self.noise)));
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    major: f64,
    minor: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.major).powi(2) + (v / self.minor).powi(2) <= 1.0
    }
}

/// Rejection-samples until coverage lies in `[MIN_COVERAGE, MAX_COVERAGE]`.
fn sample_mask(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Mask {
    let s = cfg.side as f64;
    loop {
        let n = rng.random_range(cfg.blobs.0..=cfg.blobs.1);
        let blobs: Vec<Ellipse> = (0..n)
            .map(|_| {
                let major = rng.random_range(0.08..0.3) * s;
                let minor = major * rng.random_range(cfg.eccentricity.0..=cfg.eccentricity.1);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Ellipse {
                    cy: rng.random_range(0.15..0.85) * s,
                    cx: rng.random_range(0.15..0.85) * s,
                    major,
                    minor,
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            })
            .collect();
        let mut mask = Mask::zeros(cfg.side, cfg.side);
        for y in 0..cfg.side {
            for x in 0..cfg.side {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                if blobs.iter().any(|e| e.contains(py, px)) {
                    mask.data[y * cfg.side + x] = 1;
                }
            }
        }
        let cov = mask.coverage();
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&cov) {
            return mask;
        }
    }
}

fn render(cfg: &SyntheticConfig, mask: &Mask, rng: &mut ChaCha8Rng) -> Image {
    let side = cfg.side;
    // low-frequency shading from a few random sinusoids plus per-pixel noise
    let base: [f32; 3] = [rng.random_range(0.45..0.7), rng.random_range(0.2..0.4), rng.random_range(0.15..0.35)];
    let shift: [f32; 3] = [rng.random_range(0.15..0.3), rng.random_range(0.1..0.25), rng.random_range(-0.05..0.1)];
    let waves: Vec<(f64, f64, f64)> =
        (0..3).map(|_| (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0), rng.random_range(0.0..6.3))).collect();
    let mut img = Image::filled(side, side, 0.0);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (y as f64 / side as f64, x as f64 / side as f64);
            let shade: f64 = waves.iter().map(|(fy, fx, ph)| (std::f64::consts::TAU * (fy * u + fx * v) + ph).sin()).sum::<f64>() / 3.0;
            let inside = mask.at(y, x) == 1;
            for c in 0..3 {
                let noise = rng.random_range(-cfg.noise..=cfg.noise) as f32;
                let mut p = base[c] + 0.08 * shade as f32 + noise;
                if inside {
                    p += shift[c];
                }
                img.set(y, x, c, p.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Sample `i` draws from its own ChaCha stream, so any subset is reproducible
/// independently of the others.
pub fn synth_generate(cfg: &SyntheticConfig) -> Result<Vec<SamplePair>> {
    cfg.validate()?;
    (0..cfg.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let mask = sample_mask(cfg, &mut rng);
            let image = render(cfg, &mask, &mut rng);
            SamplePair::new(format!("synth_{i:05}"), image, mask)
        })
        .collect()
}
