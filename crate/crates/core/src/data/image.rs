//! In-memory image/mask types and file codecs.
//!
//! Netpbm (P2/P3/P5/P6, 8- and 16-bit) is decoded natively: samples are
//! divided by `maxval`, 16-bit binary samples are big-endian. PNG goes
//! through the `png` feature.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// `H×W×3` interleaved RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// `H×W` binary mask with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "image buffer of {} values does not match {height}×{width}×3",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image { height, width, data: vec![value; height * width * 3] }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Quantizes to 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask buffer of {} values does not match {height}×{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn coverage(&self) -> f64 {
        self.data.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.data.len() as f64
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }
}

/// Decoded raster before conversion: samples normalized to `[0, 1]`.
struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

pub fn read_image(path: &Path) -> Result<Image> {
    let r = read_raster(path)?;
    let data = match r.channels {
        3 => r.data,
        1 => r.data.iter().flat_map(|&v| [v, v, v]).collect(),
        c => return Err(decode_err(path, format!("unsupported channel count {c}"))),
    };
    Image::new(r.height, r.width, data)
}

/// Reads a mask and binarizes it: a pixel is foreground when its (channel
/// mean) intensity is at least 128/255.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let r = read_raster(path)?;
    let threshold = 128.0 / 255.0 - 1e-6;
    let data = r
        .data
        .chunks(r.channels)
        .map(|px| (px.iter().sum::<f32>() / r.channels as f32 >= threshold) as u8)
        .collect();
    Mask::new(r.height, r.width, data)
}

fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::Read { path: path.to_path_buf(), msg: e.to_string() })?;
    if bytes.starts_with(b"\x89PNG") {
        return decode_png(path, &bytes);
    }
    if bytes.len() >= 2 && bytes[0] == b'P' && matches!(bytes[1], b'2' | b'3' | b'5' | b'6') {
        return decode_netpbm(path, &bytes);
    }
    Err(decode_err(path, "unrecognized format (expected PNG or PGM/PPM)"))
}

fn decode_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Decode { path: path.to_path_buf(), msg: msg.into() }
}

fn decode_netpbm(path: &Path, bytes: &[u8]) -> Result<Raster> {
    let kind = bytes[1];
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in &mut header {
        *slot = next_token(bytes, &mut pos).ok_or_else(|| decode_err(path, "truncated header"))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(decode_err(path, format!("invalid header {width}×{height} maxval {maxval}")));
    }
    let channels = if matches!(kind, b'3' | b'6') { 3 } else { 1 };
    let n = width * height * channels;
    let scale = maxval as f32;
    let mut data = Vec::with_capacity(n);
    if matches!(kind, b'5' | b'6') {
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        let raster = bytes.get(pos..pos + need).ok_or_else(|| decode_err(path, "truncated raster"))?;
        if wide {
            data.extend(raster.chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / scale));
        } else {
            data.extend(raster.iter().map(|&b| b as f32 / scale));
        }
    } else {
        for _ in 0..n {
            let v = next_token(bytes, &mut pos).ok_or_else(|| decode_err(path, "truncated raster"))?;
            data.push(v as f32 / scale);
        }
    }
    if data.iter().any(|&v| v > 1.0) {
        return Err(decode_err(path, "sample exceeds maxval"));
    }
    Ok(Raster { height, width, channels, data })
}

/// Next decimal token, skipping whitespace and `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        match bytes.get(*pos)? {
            b'#' => {
                while *bytes.get(*pos)? != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|c| c.is_ascii_digit()) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

#[cfg(feature = "png")]
fn decode_png(path: &Path, bytes: &[u8]) -> Result<Raster> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| decode_err(path, e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, data) = if img.color().has_color() {
        (3, img.to_rgb32f().into_raw())
    } else {
        (1, img.to_luma32f().into_raw())
    };
    Ok(Raster { height, width, channels, data })
}

#[cfg(not(feature = "png"))]
fn decode_png(path: &Path, _bytes: &[u8]) -> Result<Raster> {
    Err(decode_err(path, "PNG support not compiled in (enable the `png` feature)"))
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Writes 8-bit RGB as binary PPM, or PNG when the extension is `.png`.
pub fn write_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    if is_png(path) {
        return write_png(path, width, height, rgb, false);
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(fs::write(path, out)?)
}

/// Writes 8-bit grayscale as binary PGM, or PNG when the extension is `.png`.
pub fn write_gray8(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), width * height);
    if is_png(path) {
        return write_png(path, width, height, gray, true);
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    Ok(fs::write(path, out)?)
}

#[cfg(feature = "png")]
fn write_png(path: &Path, width: usize, height: usize, data: &[u8], gray: bool) -> Result<()> {
    let color = if gray { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer_with_format(path, data, width as u32, height as u32, color, image::ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))
}

#[cfg(not(feature = "png"))]
fn write_png(path: &Path, _w: usize, _h: usize, _data: &[u8], _gray: bool) -> Result<()> {
    Err(Error::InvalidArgument(format!("cannot write {}: PNG support not compiled in", path.display())))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_rgb8(path, img.width, img.height, &img.to_rgb8())
}

/// Masks are stored as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_gray8(path, mask.width, mask.height, &mask.to_gray8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_and_binary_netpbm_agree() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ppm");
        let b = dir.path().join("b.ppm");
        fs::write(&a, "P3\n# comment\n2 1\n255\n255 0 0  0 128 255\n").unwrap();
        let mut raw = b"P6\n2 1\n255\n".to_vec();
        raw.extend_from_slice(&[255, 0, 0, 0, 128, 255]);
        fs::write(&b, raw).unwrap();
        let ia = read_image(&a).unwrap();
        assert_eq!(ia, read_image(&b).unwrap());
        assert_eq!(ia.at(0, 1, 1), 128.0 / 255.0);
    }

    #[test]
    fn sixteen_bit_gray_is_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mut raw = b"P5 2 1 65535\n".to_vec();
        raw.extend_from_slice(&[0xff, 0x00, 0x00, 0x10]);
        fs::write(&p, raw).unwrap();
        let m = read_mask(&p).unwrap();
        assert_eq!(m.data, vec![1, 0]);
    }

    #[test]
    fn mask_threshold_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        fs::write(&p, "P2 4 1 255 0 127 128 200").unwrap();
        assert_eq!(read_mask(&p).unwrap().data, vec![0, 0, 1, 1]);
    }

    #[test]
    fn round_trip_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let img = Image::new(2, 2, (0..12).map(|i| i as f32 * 20.0 / 255.0).collect()).unwrap();
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        assert!(img.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn bad_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.pgm");
        fs::write(&p, "hello").unwrap();
        let err = read_image(&p).unwrap_err().to_string();
        assert!(err.contains("junk.pgm"), "{err}");
        let missing = dir.path().join("missing.ppm");
        assert!(read_image(&missing).unwrap_err().to_string().contains("missing.ppm"));
        fs::write(&p, "P5 4 4 255\n\x01").unwrap();
        assert!(read_image(&p).is_err());
    }

    #[cfg(feature = "png")]
    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Mask::new(2, 3, vec![0, 1, 1, 0, 0, 1]).unwrap();
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }
}
