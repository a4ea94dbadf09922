use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::{read_image, read_mask, write_image, write_mask, Image, Mask};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub image: Image,
    pub mask: Mask,
    pub id: String,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image: Image, mask: Mask) -> Result<Self> {
        if (image.height, image.width) != (mask.height, mask.width) {
            return Err(Error::InvalidArgument(format!(
                "image {}×{} and mask {}×{} differ in size",
                image.height, image.width, mask.height, mask.width
            )));
        }
        if !mask.is_binary() {
            return Err(Error::InvalidArgument("mask is not binary".into()));
        }
        Ok(SamplePair { image, mask, id: id.into() })
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Paired files of one source, sorted by id, with a SHA-256 digest of the
/// listing (ids and file names relative to the dataset root).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub entries: Vec<ManifestEntry>,
    pub checksum: String,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    /// One id per line.
    pub fn write_list(&self, path: &Path) -> Result<()> {
        write_lines(path, self.entries.iter().map(|e| e.id.as_str()))
    }
}

/// Files that found no partner, excluded from the manifest.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingReport {
    pub orphan_images: Vec<String>,
    pub orphan_masks: Vec<String>,
}

impl PairingReport {
    pub fn is_empty(&self) -> bool {
        self.orphan_images.is_empty() && self.orphan_masks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.orphan_images.len() + self.orphan_masks.len()
    }
}

pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub report: PairingReport,
    pub samples: Vec<SamplePair>,
}

pub(crate) fn write_lines<'a>(path: &Path, lines: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    Ok(fs::write(path, out)?)
}

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Read { path: dir.to_path_buf(), msg: e.to_string() })?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::InvalidArgument(format!(
                "`{stem}` is ambiguous: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Pairs `dir/images/*` with `dir/masks/*` by file stem.
pub fn build_manifest(dir: &Path) -> Result<(DatasetManifest, PairingReport)> {
    let images = list_by_stem(&dir.join("images"))?;
    let masks = list_by_stem(&dir.join("masks"))?;
    let mut report = PairingReport::default();
    let mut entries = Vec::new();
    for (id, img) in &images {
        match masks.get(id) {
            Some(m) => entries.push(ManifestEntry { id: id.clone(), image: img.clone(), mask: m.clone() }),
            None => report.orphan_images.push(id.clone()),
        }
    }
    report.orphan_masks = masks.keys().filter(|k| !images.contains_key(*k)).cloned().collect();

    let mut h = Sha256::new();
    for e in &entries {
        for part in [e.id.as_str(), &file_name(&e.image), &file_name(&e.mask)] {
            h.update(part.as_bytes());
            h.update(b"\t");
        }
        h.update(b"\n");
    }
    let source = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "dataset".into());
    Ok((DatasetManifest { source, entries, checksum: hex::encode(h.finalize()) }, report))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reads every pair of the manifest; orphans are reported, unreadable files
/// are an error naming the file.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let (manifest, report) = build_manifest(dir)?;
    let samples = manifest
        .entries
        .iter()
        .map(|e| SamplePair::new(e.id.clone(), read_image(&e.image)?, read_mask(&e.mask)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset { manifest, report, samples })
}

/// Writes `images/<id>.ppm` and `masks/<id>.pgm` (0/255).
pub fn write_dataset(dir: &Path, samples: &[SamplePair]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        write_image(&dir.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        write_mask(&dir.join("masks").join(format!("{}.pgm", s.id)), &s.mask)?;
    }
    Ok(())
}

pub fn resize_image(img: &Image, oh: usize, ow: usize) -> Image {
    let (h, w) = (img.height, img.width);
    let mut planar = vec![0f32; 3 * h * w];
    for (i, px) in img.data.chunks(3).enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px[c];
        }
    }
    let out = kernels::resample_forward(&planar, 3, h, w, oh, ow);
    let mut data = vec![0f32; 3 * oh * ow];
    for i in 0..oh * ow {
        for c in 0..3 {
            data[i * 3 + c] = out[c * oh * ow + i];
        }
    }
    Image { height: oh, width: ow, data }
}

/// Nearest neighbour with pixel-centre alignment, so the result stays binary.
pub fn resize_mask(mask: &Mask, oh: usize, ow: usize) -> Mask {
    let pick = |o: usize, input: usize, output: usize| (((o as f64 + 0.5) * input as f64 / output as f64) as usize).min(input - 1);
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = pick(y, mask.height, oh);
        for x in 0..ow {
            data.push(mask.at(sy, pick(x, mask.width, ow)));
        }
    }
    Mask { height: oh, width: ow, data }
}

/// Resizes to `side × side`: bilinear image, nearest-neighbour mask.
pub fn resize_pair(sample: &SamplePair, side: usize) -> Result<SamplePair> {
    if side == 0 || !side.is_multiple_of(32) {
        return Err(Error::InvalidArgument(format!("side {side} must be a positive multiple of 32")));
    }
    if (sample.height(), sample.width()) == (side, side) {
        return Ok(sample.clone());
    }
    Ok(SamplePair {
        image: resize_image(&sample.image, side, side),
        mask: resize_mask(&sample.mask, side, side),
        id: sample.id.clone(),
    })
}

/// Stacks equally sized samples into `[B, 3, H, W]` images and `[B, 1, H, W]`
/// masks.
pub fn batch_tensors(samples: &[&SamplePair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let hw = h * w;
    let mut images = Vec::with_capacity(samples.len() * 3 * hw);
    let mut masks = Vec::with_capacity(samples.len() * hw);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape("batch_tensors", format!("sample `{}` is {}×{}, batch is {h}×{w}", s.id, s.height(), s.width())));
        }
        for c in 0..3 {
            images.extend(s.image.data.iter().skip(c).step_by(3));
        }
        masks.extend(s.mask.data.iter().map(|&v| v as f32));
    }
    let b = samples.len();
    Ok((Tensor::new(vec![b, 3, h, w], images)?, Tensor::new(vec![b, 1, h, w], masks)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: usize, w: usize) -> SamplePair {
        let image = Image::new(h, w, (0..h * w * 3).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let mask = Mask::new(h, w, (0..h * w).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        SamplePair::new("s", image, mask).unwrap()
    }

    #[test]
    fn resize_shapes_and_binary_mask() {
        let s = pair(288, 384);
        let r = resize_pair(&s, 512).unwrap();
        assert_eq!((r.height(), r.width()), (512, 512));
        assert!(r.mask.is_binary());
        assert_eq!(resize_pair(&r, 512).unwrap(), r);
        assert!(resize_pair(&s, 100).is_err());
    }

    #[test]
    fn mask_downsample_by_two_picks_odd_pixels() {
        let m = Mask::new(2, 4, vec![1, 1, 0, 0, 0, 1, 0, 1]).unwrap();
        assert_eq!(resize_mask(&m, 1, 2).data, vec![1, 1]);
    }

    #[test]
    fn batch_layout_is_planar() {
        let s = pair(2, 2);
        let (x, y) = batch_tensors(&[&s, &s]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 2, 2]);
        assert_eq!(x.data()[4], s.image.at(0, 0, 1));
        assert_eq!(y.data()[..4], [1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mismatched_pair_rejected() {
        let s = pair(2, 2);
        assert!(SamplePair::new("x", s.image.clone(), Mask::zeros(3, 2)).is_err());
    }
}
