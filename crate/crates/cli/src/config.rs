//! Experiment configuration files (TOML) and their flag/environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use hft_core::continual::{Masking, RunConfig, Sequence};
use hft_core::tasks::{TaskConfig, TaskKind};
use hft_core::trainer::OptimizerConfig;
use hft_core::{ModelConfig, Strategy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ENV_OUT_DIR: &str = "HFT_OUT_DIR";
pub const ENV_THREADS: &str = "HFT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Fft,
    HftCategory,
    HftLayer,
    HftModel,
    Ratio,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Fft => "fft",
            MaskKind::HftCategory => "hft-category",
            MaskKind::HftLayer => "hft-layer",
            MaskKind::HftModel => "hft-model",
            MaskKind::Ratio => "ratio",
        }
    }

    /// FFT is the ratio strategy at 1.0.
    pub fn masking(self, ratio: f64, freeze_io: bool) -> Masking {
        let hft = |strategy| Masking::Hft { strategy, freeze_io, ratio };
        match self {
            MaskKind::Fft => Masking::Fft,
            MaskKind::HftCategory => hft(Strategy::Category),
            MaskKind::HftLayer => hft(Strategy::Layer),
            MaskKind::HftModel => hft(Strategy::Model),
            MaskKind::Ratio => hft(Strategy::Ratio),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Seeds example generation.
    pub seed: u64,
    /// Task order of a continual run; empty means all eight kinds.
    pub kinds: Vec<TaskKind>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 0, kinds: TaskKind::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub sequence: Sequence,
    pub mask: MaskKind,
    pub ratio: f64,
    pub freeze_io: bool,
    /// One continual run per seed; each seeds model init, plans and replay.
    pub seeds: Vec<u64>,
    pub epochs: Vec<usize>,
    pub replay_fraction: f64,
    pub reset_optimizer: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            sequence: run.sequence,
            mask: MaskKind::HftCategory,
            ratio: 0.5,
            freeze_io: false,
            seeds: vec![0],
            epochs: run.epochs,
            replay_fraction: run.replay_fraction,
            reset_optimizer: run.reset_optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub suite: SuiteConfig,
    pub tasks: TaskConfig,
    pub run: RunSection,
    pub optimizer: OptimizerConfig,
    /// Not part of the config hash.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            suite: SuiteConfig::default(),
            tasks: TaskConfig::default(),
            run: RunSection::default(),
            optimizer: OptimizerConfig::default(),
            out_dir: PathBuf::from("hft-out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mask: Option<MaskKind>,
    pub ratio: Option<f64>,
    pub freeze_io: bool,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Loads `path` (or the defaults), then applies the environment and flags.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
            if !dir.is_empty() {
                cfg.out_dir = PathBuf::from(dir);
            }
        }
        if let Some(out) = &overrides.out {
            cfg.out_dir = out.clone();
        }
        if let Some(mask) = overrides.mask {
            cfg.run.mask = mask;
        }
        if let Some(ratio) = overrides.ratio {
            cfg.run.ratio = ratio;
        }
        if overrides.freeze_io {
            cfg.run.freeze_io = true;
        }
        if let Some(seed) = overrides.seed {
            cfg.run.seeds = vec![seed];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("[model]")?;
        self.optimizer.validate().context("[optimizer]")?;
        if self.tasks.vocab_size != self.model.vocab_size || self.tasks.max_seq_len != self.model.max_seq_len {
            bail!(
                "[tasks] vocab_size/max_seq_len ({}, {}) must match [model] ({}, {})",
                self.tasks.vocab_size,
                self.tasks.max_seq_len,
                self.model.vocab_size,
                self.model.max_seq_len
            );
        }
        if !(0.0..=1.0).contains(&self.run.ratio) {
            bail!("[run] ratio must lie in [0, 1], got {}", self.run.ratio);
        }
        if self.run.seeds.is_empty() {
            bail!("[run] seeds must list at least one seed");
        }
        self.run_config(0).validate().context("[run]")?;
        Ok(())
    }

    pub fn kinds(&self) -> Vec<TaskKind> {
        if self.suite.kinds.is_empty() {
            TaskKind::ALL.to_vec()
        } else {
            self.suite.kinds.clone()
        }
    }

    pub fn masking(&self) -> Masking {
        self.run.mask.masking(self.run.ratio, self.run.freeze_io)
    }

    pub fn run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            sequence: self.run.sequence,
            masking: self.masking(),
            replay_fraction: self.run.replay_fraction,
            seed,
            epochs: self.run.epochs.clone(),
            opt: self.optimizer.clone(),
            reset_optimizer: self.run.reset_optimizer,
        }
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
