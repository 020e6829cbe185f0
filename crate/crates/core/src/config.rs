//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Lists are comma separated. Unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autoencoder::{BatchReduction, FinetuneConfig};
use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::gradient::LearningRateState;
use crate::pretrain::{Convergence, PretrainConfig, DEFAULT_HIDDEN_SIZES};

/// Every recognized key with its meaning, in file order.
pub const KEYS: &[(&str, &str)] = &[
    (
        "hidden_sizes",
        "hidden layer sizes of the block stack, comma separated",
    ),
    ("bins", "number of RSS classes of the softmax head"),
    ("pretrain_epochs", "epochs per pre-trained block"),
    ("train_epochs", "maximum epochs of each fine-tuning phase"),
    ("learning_rate", "step size of pre-training and fine-tuning"),
    (
        "epsilon",
        "relative step of the adaptive learning-rate candidates",
    ),
    (
        "adaptive_lr",
        "adapt the pre-training step size per minibatch (true/false)",
    ),
    (
        "enhanced_gradient",
        "use the enhanced gradient in pre-training (true/false)",
    ),
    (
        "cd_steps",
        "Gibbs sweeps per contrastive-divergence estimate",
    ),
    ("minibatch", "minibatch size of every phase"),
    ("tolerance_dbm", "accuracy tolerance in dBm"),
    (
        "n_train",
        "training rows taken from the data; the rest are held out",
    ),
    ("seed", "master seed"),
    (
        "sweep_sizes",
        "hidden sizes available to the sweep, comma separated",
    ),
    ("sweep_min_blocks", "smallest block count of the sweep"),
    ("sweep_max_blocks", "largest block count of the sweep"),
    ("synth_n_train", "synthetic rows intended for training"),
    ("synth_n_test", "synthetic rows intended for testing"),
    ("path_loss_exponent", "synthetic path-loss exponent"),
    ("reference_loss_db", "synthetic path loss at 1 m, dB"),
    ("tx_power_dbm", "synthetic transmit power, dBm"),
    ("shadowing_db", "synthetic shadowing standard deviation, dB"),
    (
        "shadowing_decorrelation_m",
        "synthetic shadowing correlation length, m",
    ),
    (
        "los_gain_db",
        "synthetic line-of-sight gain at high altitude, dB",
    ),
    (
        "los_altitude_m",
        "synthetic altitude scale of the line-of-sight gain, m",
    ),
    ("n_cells", "synthetic number of cells"),
    ("n_sites", "synthetic number of measurement areas"),
    ("noise_seed", "seed of the synthetic shadowing field"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hidden_sizes: Vec<usize>,
    pub bins: usize,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub adaptive_lr: bool,
    pub enhanced_gradient: bool,
    pub cd_steps: usize,
    pub minibatch: usize,
    pub tolerance_dbm: f64,
    pub n_train: usize,
    pub seed: u64,
    pub sweep_sizes: Vec<usize>,
    pub sweep_min_blocks: usize,
    pub sweep_max_blocks: usize,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            hidden_sizes: DEFAULT_HIDDEN_SIZES.to_vec(),
            bins: 32,
            pretrain_epochs: 250,
            train_epochs: 500,
            learning_rate: 0.001,
            epsilon: LearningRateState::DEFAULT_EPSILON,
            adaptive_lr: false,
            enhanced_gradient: true,
            cd_steps: 1,
            minibatch: 32,
            tolerance_dbm: 5.0,
            n_train: synth.n_train,
            seed: synth.seed,
            sweep_sizes: vec![64, 56, 48, 32, 16, 12, 8],
            sweep_min_blocks: 2,
            sweep_max_blocks: 7,
            synth,
        }
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

impl RunConfig {
    /// Canonical text listing every key.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let values: Vec<(&str, String)> = vec![
            ("hidden_sizes", join(&self.hidden_sizes)),
            ("bins", self.bins.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("train_epochs", self.train_epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("adaptive_lr", self.adaptive_lr.to_string()),
            ("enhanced_gradient", self.enhanced_gradient.to_string()),
            ("cd_steps", self.cd_steps.to_string()),
            ("minibatch", self.minibatch.to_string()),
            ("tolerance_dbm", self.tolerance_dbm.to_string()),
            ("n_train", self.n_train.to_string()),
            ("seed", self.seed.to_string()),
            ("sweep_sizes", join(&self.sweep_sizes)),
            ("sweep_min_blocks", self.sweep_min_blocks.to_string()),
            ("sweep_max_blocks", self.sweep_max_blocks.to_string()),
            ("synth_n_train", s.n_train.to_string()),
            ("synth_n_test", s.n_test.to_string()),
            ("path_loss_exponent", s.path_loss_exponent.to_string()),
            ("reference_loss_db", s.reference_loss_db.to_string()),
            ("tx_power_dbm", s.tx_power_dbm.to_string()),
            ("shadowing_db", s.shadowing_db.to_string()),
            (
                "shadowing_decorrelation_m",
                s.shadowing_decorrelation_m.to_string(),
            ),
            ("los_gain_db", s.los_gain_db.to_string()),
            ("los_altitude_m", s.los_altitude_m.to_string()),
            ("n_cells", s.n_cells.to_string()),
            ("n_sites", s.n_sites.to_string()),
            ("noise_seed", s.noise_seed.to_string()),
        ];
        let mut out = String::new();
        for (key, value) in values {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Parses `text`; keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synth;
        match key {
            "hidden_sizes" => self.hidden_sizes = parse_list(key, value)?,
            "bins" => self.bins = parse_value(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, value)?,
            "train_epochs" => self.train_epochs = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "adaptive_lr" => self.adaptive_lr = parse_value(key, value)?,
            "enhanced_gradient" => self.enhanced_gradient = parse_value(key, value)?,
            "cd_steps" => self.cd_steps = parse_value(key, value)?,
            "minibatch" => self.minibatch = parse_value(key, value)?,
            "tolerance_dbm" => self.tolerance_dbm = parse_value(key, value)?,
            "n_train" => self.n_train = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "sweep_sizes" => self.sweep_sizes = parse_list(key, value)?,
            "sweep_min_blocks" => self.sweep_min_blocks = parse_value(key, value)?,
            "sweep_max_blocks" => self.sweep_max_blocks = parse_value(key, value)?,
            "synth_n_train" => s.n_train = parse_value(key, value)?,
            "synth_n_test" => s.n_test = parse_value(key, value)?,
            "path_loss_exponent" => s.path_loss_exponent = parse_value(key, value)?,
            "reference_loss_db" => s.reference_loss_db = parse_value(key, value)?,
            "tx_power_dbm" => s.tx_power_dbm = parse_value(key, value)?,
            "shadowing_db" => s.shadowing_db = parse_value(key, value)?,
            "shadowing_decorrelation_m" => s.shadowing_decorrelation_m = parse_value(key, value)?,
            "los_gain_db" => s.los_gain_db = parse_value(key, value)?,
            "los_altitude_m" => s.los_altitude_m = parse_value(key, value)?,
            "n_cells" => s.n_cells = parse_value(key, value)?,
            "n_sites" => s.n_sites = parse_value(key, value)?,
            "noise_seed" => s.noise_seed = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must be a nonempty list of positive sizes".into());
        }
        if self.bins < 2 {
            return bad(format!("bins must be at least 2, got {}", self.bins));
        }
        for (name, v) in [
            ("pretrain_epochs", self.pretrain_epochs),
            ("train_epochs", self.train_epochs),
            ("cd_steps", self.cd_steps),
            ("minibatch", self.minibatch),
            ("n_train", self.n_train),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.adaptive_lr && self.learning_rate == 0.0 {
            return bad("adaptive_lr needs a positive learning_rate".into());
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        if !(self.tolerance_dbm.is_finite() && self.tolerance_dbm >= 0.0) {
            return bad("tolerance_dbm must be finite and non-negative".into());
        }
        if self.sweep_min_blocks == 0
            || self.sweep_min_blocks > self.sweep_max_blocks
            || self.sweep_max_blocks > self.sweep_sizes.len()
        {
            return bad(format!(
                "sweep needs 1 <= sweep_min_blocks <= sweep_max_blocks <= {} (sweep_sizes length)",
                self.sweep_sizes.len()
            ));
        }
        if self.sweep_sizes.contains(&0) {
            return bad("sweep_sizes must be positive".into());
        }
        self.synth
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            cd_steps: self.cd_steps,
            minibatch_size: self.minibatch,
            lr: LearningRateState {
                current: self.learning_rate,
                epsilon: self.epsilon,
            },
            adaptive_lr: self.adaptive_lr,
            use_enhanced_gradient: self.enhanced_gradient,
            seed,
            ..PretrainConfig::default()
        }
    }

    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.train_epochs,
            learning_rate: self.learning_rate,
            minibatch_size: self.minibatch,
            reduction: BatchReduction::Sum,
            convergence: Some(Convergence::default()),
            seed,
        }
    }

    /// Hidden sizes of every sweep configuration, smallest block count first.
    pub fn sweep_configs(&self) -> Vec<Vec<usize>> {
        (self.sweep_min_blocks..=self.sweep_max_blocks)
            .map(|l| self.sweep_sizes[..l].to_vec())
            .collect()
    }

    /// `--help` text describing every key.
    pub fn key_help() -> String {
        let defaults = Self::default().to_text();
        let mut out = String::from("Config file keys (`key = value`, `#` comments):\n");
        for ((key, meaning), line) in KEYS.iter().zip(defaults.lines()) {
            let default = line.split_once('=').map_or("", |(_, v)| v.trim());
            let _ = writeln!(out, "  {key:<27} {meaning} [default: {default}]");
        }
        out
    }
}
