use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{ScenarioChoice, TrainConfig};
use super::runlog::{EpochRecord, LogEntry, RunLog};
use crate::data::{augment, batch_tensors, load_dataset, resize_pair, scenario_split, SamplePair, ScenarioSpec, Split};
use crate::error::{Error, Result};
use crate::graph::{apply_buffer_updates, Graph, Mode};
use crate::metrics::{coupled_loss, single_loss};
use crate::nn::CoupledNet;
use crate::optim::Sgd;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// A network together with its parameters and the configuration that built it.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub net: CoupledNet,
    pub params: ParamSet<f32>,
}

/// Eval-mode outputs for a batch.
pub struct Prediction {
    pub p1: Tensor<f32>,
    pub p2: Tensor<f32>,
    /// Coefficient map of the finest gate of the last UNet.
    pub attention: Option<Tensor<f32>>,
}

impl Model {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let net = CoupledNet::new(config.net_config(), &mut params, config.seed)?;
        Ok(Model { config, net, params })
    }

    /// Rebuilds the network from the embedded config and loads the values.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Model::new(TrainConfig::parse(&ckpt.config)?)?;
        ckpt.restore_params(&mut m.params)?;
        Ok(m)
    }

    pub fn checkpoint(&self, phase: u8, epoch: u64, best_mdice: f64, opt: Option<&Sgd<f32>>) -> Checkpoint {
        Checkpoint::capture(&self.config.to_text(), phase, epoch, best_mdice, &self.params, opt)
    }

    pub fn predict(&self, images: Tensor<f32>) -> Result<Prediction> {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(images);
        let out = self.net.forward(&mut g, &self.params, x)?;
        Ok(Prediction {
            p1: g.value(out.p1).clone(),
            p2: g.value(out.p2).clone(),
            attention: out.final_attention().map(|a| g.value(a).clone()),
        })
    }

    /// Per-sample probability maps (`p1` or `p2`) in eval mode, `batch` at a time.
    pub fn probabilities(&self, samples: &[SamplePair], second: bool) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.batch_size.max(1)) {
            let refs: Vec<&SamplePair> = chunk.iter().collect();
            let (x, _) = batch_tensors(&refs)?;
            let pred = self.predict(x)?;
            let p = if second { pred.p2 } else { pred.p1 };
            let hw = p.len() / chunk.len();
            out.extend(p.data().chunks(hw).map(<[f32]>::to_vec));
        }
        Ok(out)
    }
}

/// Resized (and, for training, optionally augmented) splits.
pub struct TrainData {
    pub train: Vec<SamplePair>,
    pub validation: Vec<SamplePair>,
    /// `(source, samples)` per test source.
    pub test: Vec<(String, Vec<SamplePair>)>,
    pub split: Split,
}

/// Loads the configured scenario, resizes everything to `side` and expands
/// the training split with the augmentation recipe when enabled. Resizing
/// happens before augmentation.
pub fn prepare_data(cfg: &TrainConfig) -> Result<TrainData> {
    let (spec, dirs) = match cfg.scenario {
        ScenarioChoice::Single => {
            let loaded = load_dataset(&cfg.data)?;
            let spec = ScenarioSpec::single_source(&loaded.manifest.source, cfg.seed);
            (spec, vec![loaded])
        }
        ScenarioChoice::Predefined(id) => {
            let mut spec = ScenarioSpec::predefined(id, cfg.seed)?;
            if id >= 5 {
                spec = spec.with_test_fold(cfg.fold)?;
            }
            let mut names = spec.train_sources.clone();
            names.extend(spec.test_sources.iter().cloned());
            names.sort();
            names.dedup();
            let dirs = names.iter().map(|n| load_dataset(&cfg.data.join(n))).collect::<Result<Vec<_>>>()?;
            (spec, dirs)
        }
    };
    let manifests: Vec<_> = dirs.iter().map(|d| d.manifest.clone()).collect();
    let split = scenario_split(&spec, &manifests)?;
    let fetch = |refs: &[crate::data::SampleRef]| -> Result<Vec<SamplePair>> {
        refs.iter()
            .map(|r| {
                let d = dirs.iter().find(|d| d.manifest.source == r.source).expect("split uses loaded sources");
                resize_pair(&d.samples[r.index], cfg.side)
            })
            .collect()
    };
    let mut train = fetch(&split.train)?;
    if cfg.augment {
        let variants: Vec<SamplePair> = train.iter().flat_map(augment).collect();
        train.extend(variants);
    }
    let validation = fetch(&split.validation)?;
    let mut test = Vec::new();
    for src in split.test_sources() {
        let refs: Vec<_> = split.test.iter().filter(|r| r.source == src).cloned().collect();
        test.push((src, fetch(&refs)?));
    }
    Ok(TrainData { train, validation, test, split })
}

pub struct TrainOutcome {
    /// Best-validation weights of phase 2.
    pub model: Model,
    /// Best-validation weights of phase 1 (the starting point of phase 2).
    pub phase1: Checkpoint,
    pub best: Checkpoint,
    pub log: RunLog,
}

/// Mean Dice and IoU over samples, thresholding `p1` or `p2`.
pub fn validation_scores(model: &Model, samples: &[SamplePair], second: bool) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let probs = model.probabilities(samples, second)?;
    let (mut dice, mut iou) = (0.0, 0.0);
    for (p, s) in probs.iter().zip(samples) {
        let m = crate::metrics::image_metrics(&crate::metrics::confusion(p, &s.mask.data, model.config.threshold)?);
        dice += m.dice;
        iou += m.iou;
    }
    Ok((dice / samples.len() as f64, iou / samples.len() as f64))
}

/// Consecutive index batches in a shuffled order. A trailing batch of one
/// sample is dropped when the batch size is larger: train-mode batch norm at
/// the bottleneck needs more than one value per channel.
fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch)
        .filter(|c| c.len() > 1 || batch == 1 || n == 1)
        .map(<[usize]>::to_vec)
        .collect()
}

struct Phase<'a> {
    number: u8,
    opt: Sgd<f32>,
    frozen: Option<Vec<bool>>,
    /// Prefix of parameters whose running statistics stay fixed.
    frozen_prefix: Option<&'a str>,
}

fn train_epoch(model: &mut Model, phase: &mut Phase, data: &[SamplePair], rng: &mut ChaCha8Rng, epoch: usize) -> Result<f64> {
    let cfg = model.config.clone();
    let mut total = 0.0;
    let mut count = 0usize;
    for idx in batches(data.len(), cfg.batch_size, rng) {
        let refs: Vec<&SamplePair> = idx.iter().map(|&i| &data[i]).collect();
        let (x, y) = batch_tensors(&refs)?;
        let mut g = Graph::new(Mode::Train);
        if let Some(f) = &phase.frozen {
            g = g.with_frozen(f.clone());
        }
        let xv = g.input(x);
        let loss = if phase.number == 1 {
            let out = model.net.unet1_forward(&mut g, &model.params, xv)?;
            single_loss(&mut g, out.prob, &y, &cfg.tversky)?
        } else {
            let out = model.net.forward(&mut g, &model.params, xv)?;
            coupled_loss(&mut g, out.p1, out.p2, &y, &cfg.tversky)?
        };
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { phase: phase.number, epoch });
        }
        let grads = g.backward(loss)?;
        let mut updates = g.take_buffer_updates();
        if let Some(prefix) = phase.frozen_prefix {
            updates.retain(|(id, _)| !model.params.name(*id).starts_with(prefix));
        }
        grads.write_to(&mut model.params);
        phase.opt.step(&mut model.params)?;
        model.params.zero_grads();
        apply_buffer_updates(&mut model.params, updates);
        total += value * idx.len() as f64;
        count += idx.len();
    }
    Ok(total / count.max(1) as f64)
}

fn run_phase(
    model: &mut Model,
    mut phase: Phase,
    data: &TrainData,
    max_epochs: usize,
    log: &mut RunLog,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(Checkpoint, f64)> {
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(phase.number as u64);
    let mut best: Option<(usize, f64, ParamSet<f32>, Sgd<f32>)> = None;
    for epoch in 0..max_epochs.max(1) {
        let t0 = Instant::now();
        let loss = match train_epoch(model, &mut phase, &data.train, &mut rng, epoch) {
            Err(e @ Error::Diverged { .. }) => {
                log.push(LogEntry::Diverged { phase: phase.number, epoch })?;
                return Err(e);
            }
            other => other?,
        };
        let (mdice, miou) = validation_scores(model, &data.validation, phase.number == 2)?;
        let rec = EpochRecord {
            phase: phase.number,
            epoch,
            train_loss: loss,
            val_mdice: mdice,
            val_miou: miou,
            seconds: t0.elapsed().as_secs_f64(),
        };
        progress(&rec);
        log.push(LogEntry::Epoch(rec))?;
        if best.as_ref().is_none_or(|b| mdice > b.1) {
            best = Some((epoch, mdice, model.params.clone(), phase.opt.clone()));
        }
        let best_epoch = best.as_ref().expect("set above").0;
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let last_epoch = log.epochs().filter(|r| r.phase == phase.number).count();
    let (best_epoch, best_mdice, params, opt) = best.expect("at least one epoch");
    model.params = params;
    log.push(LogEntry::PhaseEnd { phase: phase.number, epochs: last_epoch, best_epoch, best_mdice })?;
    Ok((model.checkpoint(phase.number, best_epoch as u64, best_mdice, Some(&opt)), best_mdice))
}

/// Phase 1 trains UNet-1 alone on `1 - T(p1)`; phase 2 starts from the best
/// phase-1 weights and trains on the coupled loss. Each phase stops after
/// `patience` epochs without a validation mDice gain (or at its epoch cap)
/// and keeps its best-validation weights.
pub fn train_two_phase(cfg: &TrainConfig, data: &TrainData, mut log: RunLog, progress: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let mut model = Model::new(cfg.clone())?;
    log.push(LogEntry::Config { text: cfg.to_text() })?;

    let unet1 = model.params.trainable_with_prefix(CoupledNet::UNET1_PREFIX);
    let opt = Sgd::new(&model.params, unet1, cfg.lr, cfg.momentum)?;
    let p1 = Phase { number: 1, opt, frozen: None, frozen_prefix: None };
    let (phase1, _) = run_phase(&mut model, p1, data, cfg.epochs_phase1, &mut log, progress)?;

    let (ids, frozen, frozen_prefix) = if cfg.freeze_unet1 {
        let ids: Vec<_> = model.params.trainable_ids().into_iter().filter(|&id| !model.params.name(id).starts_with(CoupledNet::UNET1_PREFIX)).collect();
        let mask = model.params.ids().map(|id| model.params.name(id).starts_with(CoupledNet::UNET1_PREFIX)).collect();
        (ids, Some(mask), Some(CoupledNet::UNET1_PREFIX))
    } else {
        (model.params.trainable_ids(), None, None)
    };
    if ids.is_empty() {
        return Err(Error::Config("phase 2 has no trainable parameters (second UNet disabled and UNet-1 frozen)".into()));
    }
    let opt = Sgd::new(&model.params, ids, cfg.lr, cfg.momentum)?;
    let p2 = Phase { number: 2, opt, frozen, frozen_prefix };
    let (best, _) = run_phase(&mut model, p2, data, cfg.epochs_phase2, &mut log, progress)?;
    Ok(TrainOutcome { model, phase1, best, log })
}
