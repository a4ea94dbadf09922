//! The fixed twelve-variant offline augmentation recipe.
//!
//! Rotation convention: `Rot90` maps output pixel `(r, c)` to input pixel
//! `(H - 1 - c, r)`, so the top-left pixel of `[[1,0],[0,0]]` moves to the
//! top-right: `[[0,1],[0,0]]`. With the row axis pointing down this is a
//! quarter turn clockwise on screen (counter-clockwise in a y-up frame).
//! `Rot180` and `Rot270` are two and three applications of it.

use serde::{Deserialize, Serialize};

use super::dataset::{resize_image, resize_mask, SamplePair};
use super::image::{Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
    /// Rescale by the factor, then center-crop (> 1) or zero-pad (< 1) back
    /// to the original size.
    Scale(f32),
    /// 5×5 Gaussian, sigma 1, replicated borders. Image only.
    Blur,
    /// Multiply by 1.5 and clamp to `[0, 1]`. Image only.
    Brighten,
    /// Contract towards the mean intensity with factor 0.5. Image only.
    Darken,
}

pub const RECIPE: [Augmentation; 12] = [
    Augmentation::Rot90,
    Augmentation::Rot180,
    Augmentation::Rot270,
    Augmentation::FlipHorizontal,
    Augmentation::FlipVertical,
    Augmentation::Scale(0.9),
    Augmentation::Scale(1.1),
    Augmentation::Scale(1.15),
    Augmentation::Scale(1.2),
    Augmentation::Blur,
    Augmentation::Brighten,
    Augmentation::Darken,
];

pub const BRIGHTEN_GAIN: f32 = 1.5;
pub const DARKEN_CONTRAST: f32 = 0.5;
pub const BLUR_SIGMA: f64 = 1.0;

impl Augmentation {
    pub fn tag(&self) -> String {
        match self {
            Augmentation::Rot90 => "rot90".into(),
            Augmentation::Rot180 => "rot180".into(),
            Augmentation::Rot270 => "rot270".into(),
            Augmentation::FlipHorizontal => "fliph".into(),
            Augmentation::FlipVertical => "flipv".into(),
            Augmentation::Scale(s) => format!("scale{}", (s * 100.0).round() as i32),
            Augmentation::Blur => "blur".into(),
            Augmentation::Brighten => "bright".into(),
            Augmentation::Darken => "dark".into(),
        }
    }

    pub fn is_geometric(&self) -> bool {
        !matches!(self, Augmentation::Blur | Augmentation::Brighten | Augmentation::Darken)
    }

    pub fn apply(&self, s: &SamplePair) -> SamplePair {
        let (image, mask) = match *self {
            Augmentation::Rot90 => (rot90_image(&s.image), rot90_mask(&s.mask)),
            Augmentation::Rot180 => {
                let (i, m) = (rot90_image(&s.image), rot90_mask(&s.mask));
                (rot90_image(&i), rot90_mask(&m))
            }
            Augmentation::Rot270 => {
                let (mut i, mut m) = (s.image.clone(), s.mask.clone());
                for _ in 0..3 {
                    i = rot90_image(&i);
                    m = rot90_mask(&m);
                }
                (i, m)
            }
            Augmentation::FlipHorizontal => (
                remap_image(&s.image, s.height(), s.width(), |y, x| (y, s.width() - 1 - x)),
                remap_mask(&s.mask, s.height(), s.width(), |y, x| (y, s.width() - 1 - x)),
            ),
            Augmentation::FlipVertical => (
                remap_image(&s.image, s.height(), s.width(), |y, x| (s.height() - 1 - y, x)),
                remap_mask(&s.mask, s.height(), s.width(), |y, x| (s.height() - 1 - y, x)),
            ),
            Augmentation::Scale(f) => scale_pair(&s.image, &s.mask, f),
            Augmentation::Blur => (gaussian_blur(&s.image), s.mask.clone()),
            Augmentation::Brighten => {
                let mut img = s.image.clone();
                img.data.iter_mut().for_each(|v| *v = (*v * BRIGHTEN_GAIN).min(1.0));
                (img, s.mask.clone())
            }
            Augmentation::Darken => {
                let mut img = s.image.clone();
                let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64;
                let mean = mean as f32;
                img.data.iter_mut().for_each(|v| *v = (mean + DARKEN_CONTRAST * (*v - mean)).clamp(0.0, 1.0));
                (img, s.mask.clone())
            }
        };
        SamplePair { image, mask, id: format!("{}#{}", s.id, self.tag()) }
    }
}

/// All twelve variants, in [`RECIPE`] order (the original is not included).
pub fn augment(sample: &SamplePair) -> Vec<SamplePair> {
    RECIPE.iter().map(|a| a.apply(sample)).collect()
}

fn remap_image(img: &Image, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Image {
    let mut out = Image::filled(oh, ow, 0.0);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = src(y, x);
            for c in 0..3 {
                out.set(y, x, c, img.at(sy, sx, c));
            }
        }
    }
    out
}

fn remap_mask(m: &Mask, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Mask {
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = src(y, x);
            data.push(m.at(sy, sx));
        }
    }
    Mask { height: oh, width: ow, data }
}

fn rot90_image(img: &Image) -> Image {
    let h = img.height;
    remap_image(img, img.width, h, |r, c| (h - 1 - c, r))
}

fn rot90_mask(m: &Mask) -> Mask {
    let h = m.height;
    remap_mask(m, m.width, h, |r, c| (h - 1 - c, r))
}

fn scale_pair(img: &Image, mask: &Mask, factor: f32) -> (Image, Mask) {
    let (h, w) = (img.height, img.width);
    let nh = ((h as f32 * factor).round() as usize).max(1);
    let nw = ((w as f32 * factor).round() as usize).max(1);
    let si = resize_image(img, nh, nw);
    let sm = resize_mask(mask, nh, nw);
    let mut oi = Image::filled(h, w, 0.0);
    let mut om = Mask::zeros(h, w);
    // offsets of the scaled frame relative to the output frame
    let oy = (h as isize - nh as isize) / 2;
    let ox = (w as isize - nw as isize) / 2;
    for y in 0..h {
        let sy = y as isize - oy;
        if sy < 0 || sy >= nh as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize - ox;
            if sx < 0 || sx >= nw as isize {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            for c in 0..3 {
                oi.set(y, x, c, si.at(sy, sx, c));
            }
            om.data[y * w + x] = sm.at(sy, sx);
        }
    }
    (oi, om)
}

fn gaussian_taps() -> [f32; 5] {
    let raw: Vec<f64> = (-2i32..=2).map(|d| (-(d * d) as f64 / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    std::array::from_fn(|i| (raw[i] / s) as f32)
}

/// Separable 5×5 Gaussian with clamped (replicated) borders.
pub fn gaussian_blur(img: &Image) -> Image {
    let k = gaussian_taps();
    let (h, w) = (img.height, img.width);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (0..5).map(|t| k[t] * img.at(y, clamp(x as isize + t as isize - 2, w), c)).sum();
                tmp.set(y, x, c, v);
            }
        }
    }
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v: f32 = (0..5).map(|t| k[t] * tmp.at(clamp(y as isize + t as isize - 2, h), x, c)).sum();
                out.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> SamplePair {
        let image = Image::new(h, w, (0..h * w * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap();
        let mask = Mask::new(h, w, (0..h * w).map(|i| ((i * 7) % 5 < 2) as u8).collect()).unwrap();
        SamplePair::new("s", image, mask).unwrap()
    }

    #[test]
    fn pinned_rotation_example() {
        let m = Mask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert_eq!(rot90_mask(&m).data, vec![0, 1, 0, 0]);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let s = sample(3, 5);
        let mut m = s.mask.clone();
        for _ in 0..4 {
            m = rot90_mask(&m);
        }
        assert_eq!(m, s.mask);
        let r = Augmentation::Rot90.apply(&s);
        assert_eq!((r.height(), r.width()), (5, 3));
    }

    #[test]
    fn twelve_variants_with_binary_masks() {
        let s = sample(8, 8);
        let out = augment(&s);
        assert_eq!(out.len(), 12);
        for v in &out {
            assert!(v.mask.is_binary());
            assert!(v.image.data.iter().all(|p| (0.0..=1.0).contains(p)));
            if !RECIPE.iter().any(|a| a.is_geometric() && v.id.ends_with(&a.tag())) {
                assert_eq!(v.mask, s.mask);
            }
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Image::filled(6, 6, 0.4);
        assert!(gaussian_blur(&img).data.iter().all(|&v| (v - 0.4).abs() < 1e-6));
        assert!((gaussian_taps().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn downscale_pads_with_zeros() {
        let s = SamplePair::new("o", Image::filled(20, 20, 1.0), Mask::new(20, 20, vec![1; 400]).unwrap()).unwrap();
        let v = Augmentation::Scale(0.9).apply(&s);
        assert_eq!(v.mask.at(0, 0), 0);
        assert_eq!(v.mask.at(10, 10), 1);
        assert_eq!(v.image.at(0, 0, 0), 0.0);
        let up = Augmentation::Scale(1.2).apply(&s);
        assert!(up.mask.data.iter().all(|&m| m == 1));
    }
}
