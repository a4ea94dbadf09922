//! `polyseg` command-line front end.
//!
//! Exit status: 0 success, 1 usage error (bad flags, bad config), 2 runtime
//! failure, 3 gradient check above tolerance.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use polyseg::data::{build_manifest, load_dataset, make_folds, scenario_split, synth_generate, write_dataset, write_folds};
use polyseg::data::{ScenarioSpec, SplitRule, SyntheticConfig};
use polyseg::gradcheck::{run_suite, SuiteScale, TOLERANCE};
use polyseg::metrics::MetricReport;
use polyseg::train::config::KEYS;
use polyseg::train::{evaluate, evaluate_oracle, infer_file, prepare_data, train_two_phase};
use polyseg::train::{Checkpoint, Evaluation, LogEntry, Model, RunLog, TrainConfig};

#[derive(Parser)]
#[command(name = "polyseg", version, about = "Polyp segmentation with coupled attention-gated UNets")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Two-phase training. Writes config.txt, split.json, runlog.jsonl,
    /// phase1.ckpt, best.ckpt and report_<source>.{csv,json} into out_dir.
    Train(ConfigArgs),
    /// Metric report of a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Binary mask (and optionally the final attention map) for one image.
    Infer(InferArgs),
    /// Finite-difference gradient suite.
    Gradcheck {
        /// ops, blocks or full
        #[arg(long, default_value = "ops")]
        scale: SuiteScale,
    },
    /// Generate the synthetic blob dataset in the images/ + masks/ layout.
    Synth(SynthArgs),
    /// Emit k-fold id lists, or the split lists of a predefined scenario.
    Folds(FoldsArgs),
    /// Pooled-pixel ROC and PR curves as roc.csv / pr.csv.
    Curves(CurvesArgs),
}

/// `--config FILE` plus one `--<key> VALUE` flag per configuration key.
struct ConfigArgs {
    file: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let file = m.get_one::<PathBuf>("config").cloned();
        let overrides = KEYS.iter().filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone()))).collect();
        Ok(ConfigArgs { file, overrides })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let defaults = TrainConfig::default();
        let cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Plain-text `key = value` file; flags take precedence"),
        );
        KEYS.iter().fold(cmd, |cmd, &k| {
            let mut arg = Arg::new(k).long(k).value_name("VALUE").help(format!("default: {}", defaults.get(k).unwrap_or_default()));
            if k.contains('_') {
                arg = arg.alias(k.replace('_', "-"));
            }
            cmd.arg(arg)
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file (not needed with --oracle)
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Dataset directory with images/ and masks/
    #[arg(long)]
    data: PathBuf,
    /// Binarization threshold; defaults to the checkpoint's
    #[arg(long)]
    threshold: Option<f64>,
    /// Score the ground-truth masks as predictions
    #[arg(long)]
    oracle: bool,
    /// Directory for report.csv and report.json
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Mask output (.pgm, or .png with the png feature)
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write the final gate's attention map here
    #[arg(long)]
    attention: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-pixel noise amplitude
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    min_blobs: usize,
    #[arg(long, default_value_t = 3)]
    max_blobs: usize,
}

#[derive(Args)]
struct FoldsArgs {
    /// Dataset directory, or with --scenario the root holding one directory per source
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Predefined scenario 1-6; writes train.txt, validation.txt, test.txt and split.json
    #[arg(long)]
    scenario: Option<u8>,
    /// Test fold for the cross-validation scenarios
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(polyseg::Error),
    Verification(String),
}

impl From<polyseg::Error> for Failure {
    fn from(e: polyseg::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Gradcheck { scale } => gradcheck(scale),
        Cmd::Synth(a) => synth(a),
        Cmd::Folds(a) => folds(a),
        Cmd::Curves(a) => curves(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            TrainConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    for (k, v) in &args.overrides {
        cfg.set(k, v).map_err(|e| Failure::Usage(format!("--{k}: {e}")))?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    Ok(Model::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn write_report(dir: &Path, stem: &str, report: &MetricReport) -> Outcome {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;
    fs::write(dir.join(format!("{stem}.json")), report.to_json()?)?;
    Ok(())
}

fn print_evaluation(label: &str, ev: &Evaluation) {
    let (m, s) = (&ev.report.mean, &ev.report.std);
    println!(
        "{label}: n={} mDice {:.4}±{:.4} mIoU {:.4}±{:.4} recall {:.4}±{:.4} precision {:.4}±{:.4}",
        ev.report.images.len(),
        m.dice,
        s.dice,
        m.iou,
        s.iou,
        m.recall,
        s.recall,
        m.precision,
        s.precision
    );
    if let Some(c) = &ev.curves {
        println!("{label}: AUC {:.4} MAP {:.4}", c.auc, c.map);
    }
}

fn train(args: ConfigArgs) -> Outcome {
    let cfg = load_config(&args)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let log_path = out.join("runlog.jsonl");
    if log_path.exists() {
        fs::remove_file(&log_path)?;
    }

    let data = prepare_data(&cfg)?;
    let n_test: usize = data.test.iter().map(|(_, s)| s.len()).sum();
    eprintln!("train {} / validation {} / test {}", data.train.len(), data.validation.len(), n_test);
    fs::write(out.join("split.json"), serde_json::to_string_pretty(&data.split).map_err(polyseg::Error::from)?)?;

    let outcome = train_two_phase(&cfg, &data, RunLog::with_file(&log_path)?, &mut |r| {
        eprintln!(
            "phase {} epoch {:>3}  loss {:.4}  val mDice {:.4}  mIoU {:.4}  {:.1}s",
            r.phase, r.epoch, r.train_loss, r.val_mdice, r.val_miou, r.seconds
        )
    })?;
    outcome.phase1.save(&out.join("phase1.ckpt"))?;
    outcome.best.save(&out.join("best.ckpt"))?;

    let mut log = outcome.log;
    for (source, samples) in &data.test {
        let ev = evaluate(&outcome.model, samples, cfg.threshold)?;
        print_evaluation(source, &ev);
        write_report(&out, &format!("report_{source}"), &ev.report)?;
        log.push(LogEntry::Report { source: source.clone(), report: Box::new(ev.report) })?;
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Outcome {
    let samples = load_dataset(&args.data)?.samples;
    let ev = if args.oracle {
        evaluate_oracle(&samples, args.threshold.unwrap_or(0.5))?
    } else {
        let model = load_model(args.checkpoint.as_deref().expect("required unless --oracle"))?;
        let threshold = args.threshold.unwrap_or(model.config.threshold);
        evaluate(&model, &samples, threshold)?
    };
    print_evaluation(&args.data.display().to_string(), &ev);
    if let Some(dir) = &args.out {
        write_report(dir, "report", &ev.report)?;
    }
    Ok(())
}

fn infer(args: InferArgs) -> Outcome {
    let model = load_model(&args.checkpoint)?;
    let threshold = args.threshold.unwrap_or(model.config.threshold);
    infer_file(&model, &args.input, &args.output, threshold, args.attention.as_deref())?;
    Ok(())
}

fn gradcheck(scale: SuiteScale) -> Outcome {
    let entries = run_suite(scale)?;
    let mut failed = 0;
    for e in &entries {
        let worst = e.report.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_default();
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!("{:<36} {:>10.3e} {:>6} {:<4} {worst}", e.name, e.report.max_rel_error, e.report.checked, status);
        failed += usize::from(!e.passed());
    }
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} of {} checks at or above {TOLERANCE:e}", entries.len())));
    }
    println!("all {} checks below {TOLERANCE:e}", entries.len());
    Ok(())
}

fn synth(args: SynthArgs) -> Outcome {
    let cfg = SyntheticConfig {
        count: args.count,
        side: args.side,
        blobs: (args.min_blobs, args.max_blobs),
        noise: args.noise,
        seed: args.seed,
        ..Default::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    write_dataset(&args.out, &synth_generate(&cfg)?)?;
    let (manifest, _) = build_manifest(&args.out)?;
    println!("{} pairs in {} (checksum {})", manifest.len(), args.out.display(), manifest.checksum);
    Ok(())
}

fn folds(args: FoldsArgs) -> Outcome {
    let Some(id) = args.scenario else {
        let (manifest, report) = build_manifest(&args.data)?;
        for o in report.orphan_images.iter().chain(&report.orphan_masks) {
            eprintln!("warning: unpaired file `{o}` skipped");
        }
        let folds = make_folds(manifest.len(), args.k, args.seed)?;
        write_folds(&args.out, &manifest.ids(), &folds)?;
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        println!("{} folds of sizes {sizes:?} in {}", folds.len(), args.out.display());
        return Ok(());
    };
    let mut spec = ScenarioSpec::predefined(id, args.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    if let SplitRule::Folds { k, .. } = &mut spec.rule {
        *k = args.k;
        spec = spec.with_test_fold(args.fold).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let mut names = spec.train_sources.clone();
    names.extend(spec.test_sources.iter().cloned());
    names.sort();
    names.dedup();
    let manifests = names.iter().map(|n| build_manifest(&args.data.join(n)).map(|(m, _)| m)).collect::<Result<Vec<_>, _>>()?;
    let split = scenario_split(&spec, &manifests)?;
    fs::create_dir_all(&args.out)?;
    for (file, refs) in [("train.txt", &split.train), ("validation.txt", &split.validation), ("test.txt", &split.test)] {
        let text: String = refs.iter().map(|r| format!("{}/{}\n", r.source, r.id)).collect();
        fs::write(args.out.join(file), text)?;
    }
    fs::write(args.out.join("split.json"), serde_json::to_string_pretty(&split).map_err(polyseg::Error::from)?)?;
    println!("scenario {id}: {}/{}/{} in {}", split.train.len(), split.validation.len(), split.test.len(), args.out.display());
    Ok(())
}

fn curves(args: CurvesArgs) -> Outcome {
    let model = load_model(&args.checkpoint)?;
    let samples = load_dataset(&args.data)?.samples;
    let ev = evaluate(&model, &samples, model.config.threshold)?;
    let Some(c) = ev.curves else {
        return Err(polyseg::Error::InvalidArgument("ground truth holds a single class; curves are undefined".into()).into());
    };
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("roc.csv"), c.roc_csv())?;
    fs::write(args.out.join("pr.csv"), c.pr_csv())?;
    println!("AUC {:.4} MAP {:.4} ({} ROC points, {} PR points)", c.auc, c.map, c.roc.len(), c.pr.len());
    Ok(())
}
