use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn polyseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyseg")).args(args).output().expect("spawn polyseg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, seed: u64) {
    let out = polyseg(&["synth", "--out", p(dir), "--count", &count.to_string(), "--seed", &seed.to_string()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&polyseg(&["--help"])), 0);
    assert_eq!(code(&polyseg(&["train", "--no_such_key", "1"])), 1);
    assert_eq!(code(&polyseg(&["train", "--lr", "fast"])), 1);
    assert_eq!(code(&polyseg(&["gradcheck", "--scale", "huge"])), 1);
    assert_eq!(code(&polyseg(&["frobnicate"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "lr = 0.01\nwarmup = 3\n").unwrap();
    let out = polyseg(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("warmup"), "{}", stderr(&out));
}

#[test]
fn missing_data_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = polyseg(&["train", "--data", p(&dir.path().join("absent")), "--out_dir", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent"), "{}", stderr(&out));
}

#[test]
fn folds_and_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    synth(&data, 12, 1);
    let out = polyseg(&["folds", "--data", p(&data), "--out", p(&dir.path().join("f")), "--k", "5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("[3, 3, 2, 2, 2]"), "{}", stdout(&out));
    let lines: usize = (0..5).map(|i| fs::read_to_string(dir.path().join(format!("f/fold_{i}"))).unwrap().lines().count()).sum();
    assert_eq!(lines, 12);

    let root = dir.path().join("sources");
    synth(&root.join("Kvasir-SEG"), 30, 2);
    synth(&root.join("CVC-ClinicDB"), 20, 3);
    let split = dir.path().join("s4");
    let out = polyseg(&["folds", "--data", p(&root), "--out", p(&split), "--scenario", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let count = |f: &str| fs::read_to_string(split.join(f)).unwrap().lines().count();
    assert_eq!((count("train.txt"), count("validation.txt"), count("test.txt")), (40, 5, 5));
    assert_eq!(code(&polyseg(&["folds", "--data", p(&root), "--out", p(&split), "--scenario", "9"])), 1);
}

#[test]
fn train_eval_infer_curves() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    synth(&data, 24, 4);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nside = 32\nbase_width = 4\naugment = false\nepochs_phase1 = 5\nepochs_phase2 = 1\n").unwrap();

    let out = polyseg(&["train", "--config", p(&cfg), "--epochs_phase1", "1", "--data", p(&data), "--out_dir", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["config.txt", "split.json", "runlog.jsonl", "phase1.ckpt", "best.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("epochs_phase1 = 1") && config.contains("side = 32") && config.contains("lr = 0.005"));
    let log = fs::read_to_string(run.join("runlog.jsonl")).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds, ["config", "epoch", "phase_end", "epoch", "phase_end", "report"]);
    let report = fs::read_dir(&run).unwrap().filter_map(|e| e.ok()).find(|e| e.file_name().to_string_lossy().ends_with(".csv"));
    assert!(report.is_some());

    let best = run.join("best.ckpt");
    let eval_dir = dir.path().join("eval");
    let out = polyseg(&["eval", "--checkpoint", p(&best), "--data", p(&data), "--out", p(&eval_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("n=24"));
    let csv = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("id,dice,iou,recall,precision\n") && csv.lines().count() == 27);
    assert!(eval_dir.join("report.json").exists());

    let out = polyseg(&["eval", "--oracle", "--data", p(&data)]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("mDice 1.0000±0.0000 mIoU 1.0000±0.0000"), "{}", stdout(&out));

    let image = data.join("images/synth_00000.ppm");
    let (m1, m2, a1) = (dir.path().join("m1.pgm"), dir.path().join("m2.pgm"), dir.path().join("a1.pgm"));
    for m in [&m1, &m2] {
        let out = polyseg(&["infer", "--checkpoint", p(&best), "--input", p(&image), "--output", p(m), "--attention", p(&a1)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let bytes = fs::read(&m1).unwrap();
    assert_eq!(bytes, fs::read(&m2).unwrap());
    assert!(bytes[bytes.len() - 64 * 64..].iter().all(|&v| v == 0 || v == 255));
    assert!(a1.exists());
    let out = polyseg(&["infer", "--checkpoint", p(&best), "--input", p(&dir.path().join("gone.ppm")), "--output", p(&m1)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("gone.ppm"));

    let curves = dir.path().join("curves");
    let out = polyseg(&["curves", "--checkpoint", p(&best), "--data", p(&data), "--out", p(&curves)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(fs::read_to_string(curves.join("roc.csv")).unwrap().starts_with("fpr,tpr\n"));
    assert!(fs::read_to_string(curves.join("pr.csv")).unwrap().starts_with("recall,precision\n"));
    assert!(stdout(&out).contains("AUC"));
}

#[test]
fn divergence_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    synth(&data, 12, 5);
    let args = ["train", "--data", p(&data), "--out_dir", p(&run), "--side", "32", "--base-width", "4", "--augment", "off", "--lr", "1e30"];
    let out = polyseg(&args);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
    assert!(fs::read_to_string(run.join("runlog.jsonl")).unwrap().contains("\"kind\":\"diverged\""));
}

#[test]
fn gradcheck_ops_passes() {
    let out = polyseg(&["gradcheck", "--scale", "ops"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("all ") && stdout(&out).contains("conv2d"));
}
