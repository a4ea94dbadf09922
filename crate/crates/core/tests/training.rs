use std::fs;

use polyseg::data::{read_image, read_mask, synth_generate, write_dataset, SyntheticConfig};
use polyseg::train::{
    evaluate, evaluate_oracle, infer_file, prepare_data, train_two_phase, Checkpoint, LogEntry, Model, RunLog, TrainConfig,
};

fn dataset(count: usize, seed: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_generate(&SyntheticConfig { count, side: 64, seed, ..Default::default() }).unwrap();
    write_dataset(dir.path(), &samples).unwrap();
    dir
}

fn config(dir: &std::path::Path) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.data = dir.to_path_buf();
    c.augment = false;
    c.side = 32;
    c.base_width = 4;
    c.seed = 2;
    c
}

#[test]
fn zero_patience_runs_one_epoch_per_phase() {
    let dir = dataset(20, 1);
    let mut cfg = config(dir.path());
    cfg.patience = 0;
    let data = prepare_data(&cfg).unwrap();
    let out = train_two_phase(&cfg, &data, RunLog::new(), &mut |_| {}).unwrap();
    let phases: Vec<u8> = out.log.epochs().map(|r| r.phase).collect();
    assert_eq!(phases, [1, 2]);
}

#[test]
fn frozen_first_unet_keeps_phase_one_weights() {
    let dir = dataset(20, 2);
    let mut cfg = config(dir.path());
    cfg.epochs_phase1 = 2;
    cfg.epochs_phase2 = 2;
    cfg.freeze_unet1 = true;
    let data = prepare_data(&cfg).unwrap();
    let out = train_two_phase(&cfg, &data, RunLog::new(), &mut |_| {}).unwrap();
    let phase1 = Model::from_checkpoint(&out.phase1).unwrap();
    let probe = &data.validation;
    assert_eq!(phase1.probabilities(probe, false).unwrap(), out.model.probabilities(probe, false).unwrap());
    assert_ne!(phase1.probabilities(probe, true).unwrap(), out.model.probabilities(probe, true).unwrap());
}

#[test]
fn log_file_matches_memory() {
    let dir = dataset(12, 3);
    let mut cfg = config(dir.path());
    cfg.epochs_phase1 = 1;
    cfg.epochs_phase2 = 1;
    let data = prepare_data(&cfg).unwrap();
    let path = dir.path().join("run/log.jsonl");
    let out = train_two_phase(&cfg, &data, RunLog::with_file(&path).unwrap(), &mut |_| {}).unwrap();
    assert_eq!(RunLog::read_jsonl(&path).unwrap(), out.log.entries);
    assert!(matches!(&out.log.entries[0], LogEntry::Config { text } if text.contains("lr = 0.005")));
}

/// A short run at side 64 that exercises the evaluation and inference
/// contracts.
#[test]
fn converged_run_contracts() {
    let dir = dataset(80, 4);
    let mut cfg = config(dir.path());
    cfg.side = 64;
    cfg.base_width = 8;
    cfg.epochs_phase1 = 8;
    cfg.epochs_phase2 = 6;
    let data = prepare_data(&cfg).unwrap();
    let out = train_two_phase(&cfg, &data, RunLog::new(), &mut |_| {}).unwrap();

    // smoothed monotonicity of the phase-1 loss
    let losses = out.log.losses(1);
    for w in losses.windows(5) {
        assert!(w[4] <= w[0], "phase-1 loss rose over a 5-epoch window: {losses:?}");
    }

    let model = &out.model;
    let on_train = evaluate(model, &data.train, 0.5).unwrap();
    assert_eq!(evaluate(model, &data.train, 0.5).unwrap(), on_train);
    assert!(on_train.curves.as_ref().unwrap().auc > 0.5);

    let oracle = evaluate_oracle(&data.validation, 0.5).unwrap();
    assert_eq!((oracle.report.mean.dice, oracle.report.mean.iou, oracle.report.mean.recall, oracle.report.mean.precision), (1.0, 1.0, 1.0, 1.0));

    let input = dir.path().join("images").join(format!("{}.ppm", data.validation[0].id));
    let (m1, a1) = (dir.path().join("m1.pgm"), dir.path().join("a1.pgm"));
    let (m2, a2) = (dir.path().join("m2.pgm"), dir.path().join("a2.pgm"));
    infer_file(model, &input, &m1, 0.5, Some(&a1)).unwrap();
    infer_file(model, &input, &m2, 0.5, Some(&a2)).unwrap();
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    assert_eq!(fs::read(&a1).unwrap(), fs::read(&a2).unwrap());
    let raw = fs::read(&m1).unwrap();
    let pixels = &raw[raw.len() - 64 * 64..];
    assert!(pixels.iter().all(|&v| v == 0 || v == 255));
    assert!(read_mask(&m1).unwrap().is_binary());
    assert_eq!(read_image(&a1).unwrap().height, 64);

    let missing = dir.path().join("nope.ppm");
    let err = infer_file(model, &missing, &m1, 0.5, None).unwrap_err().to_string();
    assert!(err.contains("nope.ppm"), "{err}");
}

#[test]
fn checkpoint_shape_mismatch_lists_names() {
    let dir = dataset(4, 5);
    let cfg = config(dir.path());
    let model = Model::new(cfg.clone()).unwrap();
    let ckpt = model.checkpoint(1, 0, 0.0, None);
    let mut wider = cfg;
    wider.base_width = 8;
    let mut other = Model::new(wider).unwrap();
    let err = ckpt.restore_params(&mut other.params).unwrap_err().to_string();
    assert!(err.contains("unet1.") && err.contains("shape"), "{err}");
    let path = dir.path().join("c.bin");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
}
