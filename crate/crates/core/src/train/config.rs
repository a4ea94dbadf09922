//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::metrics::TverskyParams;
use crate::nn::{BridgeMode, BridgeSource, CoupledNetConfig, EncoderConfig};

/// Which split of the data directory to train on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioChoice {
    /// `data` is one source, split 80/10/10.
    Single,
    /// `data` holds one sub-directory per named source.
    Predefined(u8),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    /// Epochs without a validation mDice improvement before a phase stops.
    pub patience: usize,
    pub seed: u64,
    pub tversky: TverskyParams,
    pub side: usize,
    pub base_width: usize,
    pub cardinality: usize,
    pub radix: usize,
    pub attention_gates: bool,
    pub cross_connections: bool,
    pub second_unet: bool,
    pub bridge_mode: BridgeMode,
    pub bridge_source: BridgeSource,
    /// Phase 2 leaves UNet-1's parameters untouched.
    pub freeze_unet1: bool,
    /// Expand the training split with the twelve offline variants.
    pub augment: bool,
    pub threshold: f64,
    pub scenario: ScenarioChoice,
    pub fold: usize,
    pub data: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-3,
            momentum: 0.9,
            batch_size: 4,
            epochs_phase1: 50,
            epochs_phase2: 50,
            patience: 10,
            seed: 0,
            tversky: TverskyParams::default(),
            side: 64,
            base_width: 8,
            cardinality: 2,
            radix: 2,
            attention_gates: true,
            cross_connections: true,
            second_unet: true,
            bridge_mode: BridgeMode::Multiply,
            bridge_source: BridgeSource::Probability,
            freeze_unet1: false,
            augment: true,
            threshold: 0.5,
            scenario: ScenarioChoice::Single,
            fold: 0,
            data: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const KEYS: [&str; 26] = [
    "lr",
    "momentum",
    "batch_size",
    "epochs_phase1",
    "epochs_phase2",
    "patience",
    "seed",
    "tversky_alpha",
    "tversky_beta",
    "tversky_smooth",
    "side",
    "base_width",
    "cardinality",
    "radix",
    "attention_gates",
    "cross_connections",
    "second_unet",
    "bridge_mode",
    "bridge_source",
    "freeze_unet1",
    "augment",
    "threshold",
    "scenario",
    "fold",
    "data",
    "out_dir",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

impl TrainConfig {
    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lr" => self.lr = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs_phase1" => self.epochs_phase1 = num(key, v)?,
            "epochs_phase2" => self.epochs_phase2 = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "tversky_alpha" => self.tversky.alpha = num(key, v)?,
            "tversky_beta" => self.tversky.beta = num(key, v)?,
            "tversky_smooth" => self.tversky.smooth = num(key, v)?,
            "side" => self.side = num(key, v)?,
            "base_width" => self.base_width = num(key, v)?,
            "cardinality" => self.cardinality = num(key, v)?,
            "radix" => self.radix = num(key, v)?,
            "attention_gates" => self.attention_gates = flag(key, v)?,
            "cross_connections" => self.cross_connections = flag(key, v)?,
            "second_unet" => self.second_unet = flag(key, v)?,
            "bridge_mode" => {
                self.bridge_mode = match v {
                    "multiply" => BridgeMode::Multiply,
                    "concat_project" => BridgeMode::ConcatProject,
                    _ => return Err(Error::Config(format!("`bridge_mode`: expected multiply or concat_project, got `{v}`"))),
                }
            }
            "bridge_source" => {
                self.bridge_source = match v {
                    "probability" => BridgeSource::Probability,
                    "logits" => BridgeSource::Logits,
                    _ => return Err(Error::Config(format!("`bridge_source`: expected probability or logits, got `{v}`"))),
                }
            }
            "freeze_unet1" => self.freeze_unet1 = flag(key, v)?,
            "augment" => self.augment = flag(key, v)?,
            "threshold" => self.threshold = num(key, v)?,
            "scenario" => {
                self.scenario = match v {
                    "single" => ScenarioChoice::Single,
                    _ => ScenarioChoice::Predefined(num(key, v)?),
                }
            }
            "fold" => self.fold = num(key, v)?,
            "data" => self.data = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Starts from the defaults and applies every `key = value` line. Blank
    /// lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = |v: bool| v.to_string();
        Some(match key {
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs_phase1" => self.epochs_phase1.to_string(),
            "epochs_phase2" => self.epochs_phase2.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "tversky_alpha" => self.tversky.alpha.to_string(),
            "tversky_beta" => self.tversky.beta.to_string(),
            "tversky_smooth" => self.tversky.smooth.to_string(),
            "side" => self.side.to_string(),
            "base_width" => self.base_width.to_string(),
            "cardinality" => self.cardinality.to_string(),
            "radix" => self.radix.to_string(),
            "attention_gates" => b(self.attention_gates),
            "cross_connections" => b(self.cross_connections),
            "second_unet" => b(self.second_unet),
            "bridge_mode" => match self.bridge_mode {
                BridgeMode::Multiply => "multiply".into(),
                BridgeMode::ConcatProject => "concat_project".into(),
            },
            "bridge_source" => match self.bridge_source {
                BridgeSource::Probability => "probability".into(),
                BridgeSource::Logits => "logits".into(),
            },
            "freeze_unet1" => b(self.freeze_unet1),
            "augment" => b(self.augment),
            "threshold" => self.threshold.to_string(),
            "scenario" => match self.scenario {
                ScenarioChoice::Single => "single".into(),
                ScenarioChoice::Predefined(i) => i.to_string(),
            },
            "fold" => self.fold.to_string(),
            "data" => self.data.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Every key with its value, one per line; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if let ScenarioChoice::Predefined(i) = self.scenario {
            if !(1..=6).contains(&i) {
                return Err(Error::Config(format!("scenario {i} outside 1–6")));
            }
        }
        if self.fold >= 5 {
            return Err(Error::Config(format!("fold {} outside 0–4", self.fold)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("lr {} / momentum {} out of range", self.lr, self.momentum)));
        }
        self.tversky.validate()?;
        self.net_config().validate()
    }

    pub fn net_config(&self) -> CoupledNetConfig {
        let mut c = CoupledNetConfig::scaled(self.side, self.base_width);
        c.encoder = EncoderConfig::from_base_width(self.base_width, self.cardinality, self.radix);
        c.enable_attention_gates = self.attention_gates;
        c.enable_cross_connections = self.cross_connections;
        c.enable_second_unet = self.second_unet;
        c.bridge_mode = self.bridge_mode;
        c.bridge_source = self.bridge_source;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 5e-3);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_and_comments() {
        let c = TrainConfig::parse("# run\nlr = 0.01  # faster\n\nsecond_unet = false\nbridge_mode = concat_project\n").unwrap();
        assert_eq!(c.lr, 0.01);
        assert!(!c.second_unet);
        assert_eq!(c.bridge_mode, BridgeMode::ConcatProject);
    }

    #[test]
    fn unknown_key_is_error() {
        let e = TrainConfig::parse("learning_rate = 0.1").unwrap_err();
        assert!(e.to_string().contains("learning_rate"));
        assert!(TrainConfig::parse("side = 48").is_err());
        assert!(TrainConfig::parse("lr 0.1").is_err());
    }
}
