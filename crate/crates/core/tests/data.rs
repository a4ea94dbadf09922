use std::fs;

use polyseg::data::image::{write_gray8, write_rgb8};
use polyseg::data::{build_manifest, load_dataset, resize_pair, synth_generate, write_dataset, Image, Mask, SamplePair, SyntheticConfig};

fn write_pair(dir: &std::path::Path, id: &str, mask_value: u8) {
    write_rgb8(&dir.join("images").join(format!("{id}.ppm")), 3, 2, &[100; 18]).unwrap();
    write_gray8(&dir.join("masks").join(format!("{id}.pgm")), 3, 2, &[0, mask_value, 0, 255, 0, 0]).unwrap();
}

fn layout() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::create_dir_all(dir.path().join("masks")).unwrap();
    dir
}

#[test]
fn orphans_reported_and_excluded() {
    let dir = layout();
    for id in ["b", "a", "c"] {
        write_pair(dir.path(), id, 255);
    }
    write_rgb8(&dir.path().join("images/lonely.ppm"), 1, 1, &[0, 0, 0]).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.manifest.ids(), ["a", "b", "c"]);
    assert_eq!(loaded.report.orphan_images, ["lonely"]);
    assert_eq!(loaded.report.len(), 1);
    assert_eq!(loaded.samples.len(), 3);
}

#[test]
fn checksum_is_stable() {
    let dir = layout();
    write_pair(dir.path(), "x", 255);
    let (a, _) = build_manifest(dir.path()).unwrap();
    let (b, _) = build_manifest(dir.path()).unwrap();
    assert_eq!(a.checksum, b.checksum);
    write_pair(dir.path(), "y", 255);
    assert_ne!(build_manifest(dir.path()).unwrap().0.checksum, a.checksum);
}

#[test]
fn gray_200_binarizes_to_one() {
    let dir = layout();
    write_pair(dir.path(), "g", 200);
    let s = &load_dataset(dir.path()).unwrap().samples[0];
    assert_eq!(s.mask.data, [0, 1, 0, 1, 0, 0]);
    assert!((s.image.data[0] - 100.0 / 255.0).abs() < 1e-6);
}

#[test]
fn unreadable_file_named() {
    let dir = layout();
    write_pair(dir.path(), "ok", 255);
    fs::write(dir.path().join("images/bad.ppm"), b"P6 garbage").unwrap();
    fs::write(dir.path().join("masks/bad.pgm"), b"P5 2 2 255\n\0\0\0\0").unwrap();
    let err = load_dataset(dir.path()).err().expect("decode error").to_string();
    assert!(err.contains("bad.ppm"), "{err}");
}

#[test]
fn clinic_frame_resizes_to_512() {
    let image = Image::filled(288, 384, 0.5);
    let mask = Mask::new(288, 384, (0..288 * 384).map(|i| (i % 5 == 0) as u8).collect()).unwrap();
    let r = resize_pair(&SamplePair::new("c", image, mask).unwrap(), 512).unwrap();
    assert_eq!((r.height(), r.width()), (512, 512));
    assert!(r.mask.is_binary());
    assert!(r.image.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
}

#[test]
fn synthetic_set_writes_real_layout() {
    let cfg = SyntheticConfig { count: 200, side: 64, seed: 5, ..Default::default() };
    let a = synth_generate(&cfg).unwrap();
    assert_eq!(a.len(), 200);
    assert!(a.iter().all(|s| s.height() == 64 && s.width() == 64));
    assert!(a.iter().all(|s| (0.01..=0.6).contains(&s.mask.coverage())));
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &a[..5]).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert!(loaded.report.is_empty());
    for (orig, back) in a.iter().zip(&loaded.samples) {
        assert_eq!(orig.mask, back.mask);
        // 8-bit storage
        assert!(orig.image.data.iter().zip(&back.image.data).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
    }
}
