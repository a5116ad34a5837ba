//! Run configuration: one TOML file drives every subcommand.

use crate::charset::Charset;
use crate::ckpt::fnv1a64;
use crate::data::CorpusSpec;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CharsetChoice {
    Train94,
    Eval36,
}

impl CharsetChoice {
    pub fn charset(self) -> Charset {
        match self {
            CharsetChoice::Train94 => Charset::train94(),
            CharsetChoice::Eval36 => Charset::eval36(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding (or receiving) train.bin / val.bin / test.bin.
    pub dir: PathBuf,
    pub corpus: CorpusSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub charset: CharsetChoice,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub training: TrainConfig,
    pub data: DataSection,
}

impl RunConfig {
    /// Desk-scale preset: small stack, 2.5k clean samples (2k train).
    pub fn toy() -> Self {
        RunConfig {
            seed: 42,
            charset: CharsetChoice::Train94,
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::new(25, 128, 4, 0.1),
            training: TrainConfig::toy(),
            data: DataSection {
                dir: PathBuf::from("runs/toy/data"),
                corpus: CorpusSpec::clean(2500, 1),
            },
        }
    }

    /// Full-scale preset mirroring the published training recipe; not
    /// runnable at desk scale.
    pub fn paper() -> Self {
        RunConfig {
            seed: 42,
            charset: CharsetChoice::Train94,
            encoder: EncoderConfig::paper(),
            decoder: DecoderConfig::new(25, 384, 6, 0.1),
            training: TrainConfig::paper(),
            data: DataSection {
                dir: PathBuf::from("runs/full/data"),
                corpus: CorpusSpec::degraded(2_000_000, 1),
            },
        }
    }

    /// Tiny stack for sweeps that train many runs in one process.
    pub fn mini() -> Self {
        let mut cfg = RunConfig::toy();
        cfg.encoder.layers = 1;
        cfg.encoder.width = 64;
        cfg.encoder.heads = 2;
        cfg.decoder = DecoderConfig::new(25, 64, 2, 0.1);
        cfg.training.epochs = 8;
        cfg.data.corpus = CorpusSpec::clean(400, 1);
        cfg.data.dir = PathBuf::from("runs/mini/data");
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable identity for checkpoints: hash of the canonical TOML form.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| ConfigError::Invalid(m);
        self.encoder.validate().map_err(|e| inv(e.to_string()))?;
        if self.encoder.layers == 0 {
            return Err(inv("encoder.layers must be at least 1 for runs".into()));
        }
        self.decoder.validate().map_err(|e| inv(e.to_string()))?;
        if self.encoder.width != self.decoder.d_model {
            return Err(inv(format!(
                "encoder.width {} != decoder.d_model {}",
                self.encoder.width, self.decoder.d_model
            )));
        }
        self.training.validate().map_err(|e| inv(e.to_string()))?;
        self.data.corpus.validate().map_err(|e| inv(e.to_string()))?;
        Ok(())
    }
}
