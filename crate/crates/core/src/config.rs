//! TOML run configuration shared by the command-line subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::bridging::SelectionMode;
use crate::error::{Error, Result};
use crate::generator::DecodeSettings;
use crate::model::{Ablation, LossOptions, TrainSelection};
use crate::trainer::OptimizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub mode: SelectionMode,
    /// Keyword window: the next `m` turns supervise the heads, and hard mode
    /// keeps the top `m` per head.
    pub m: usize,
    pub delta: f64,
    /// Scale of the scenario bias added to the decoder logits.
    pub lambda: f64,
    pub max_decode_len: usize,
    pub vocab_min_count: usize,
    pub ablation: Ablation,
    /// `vocab_size` is replaced by the size of the vocabulary built from data.
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            mode: SelectionMode::Soft,
            m: 4,
            delta: 0.2,
            lambda: 1.0,
            max_decode_len: 100,
            vocab_min_count: 1,
            ablation: Ablation::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(field_err("m", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(field_err(
                "delta",
                format!("{} is outside [0, 1]", self.delta),
            ));
        }
        if !self.lambda.is_finite() {
            return Err(field_err("lambda", "must be finite"));
        }
        if self.max_decode_len == 0 {
            return Err(field_err("max_decode_len", "must be positive"));
        }
        if self.max_decode_len > self.model.max_tgt_len {
            return Err(field_err(
                "max_decode_len",
                format!(
                    "{} exceeds model.max_tgt_len {}",
                    self.max_decode_len, self.model.max_tgt_len
                ),
            ));
        }
        if self.vocab_min_count == 0 {
            return Err(field_err("vocab_min_count", "must be at least 1"));
        }
        if !self.ablation.use_csm && (self.ablation.drop_k || self.ablation.drop_u) {
            return Err(field_err(
                "ablation.drop_k/drop_u",
                "only apply while ablation.use_csm is on",
            ));
        }
        let mut model = self.model.clone();
        model.vocab_size = model.vocab_size.max(1);
        model.validate().map_err(|e| field_err("model", e))?;
        self.optimizer.validate()?;
        Ok(())
    }

    pub fn decode_settings(&self) -> DecodeSettings {
        DecodeSettings {
            mode: self.mode,
            m: self.m,
            delta: self.delta,
            lambda: self.lambda,
            ablation: self.ablation,
            max_len: self.max_decode_len,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            ablation: self.ablation,
            lambda: self.lambda,
            m: self.m,
            selection: TrainSelection::Teacher,
        }
    }

    /// Model and optimizer configs with the run seed applied.
    pub fn seeded(&self) -> (ModelConfig, OptimizerConfig) {
        let mut model = self.model.clone();
        model.seed = self.seed;
        let mut opt = self.optimizer.clone();
        opt.seed = self.seed;
        (model, opt)
    }
}
