//! `key=value` run configuration files.

use std::path::Path;

use crate::data::SyntheticTaskConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Everything a CLI run needs besides file paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticTaskConfig,
    /// Utterances of the synthetic set held out for testing.
    pub test_utterances: usize,
    /// Minimum posterior for a probe cell to be shown.
    pub posterior_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticTaskConfig::default();
        let model = ModelConfig {
            vocab_size: synth.vocab_size(),
            feature_dim: synth.feature_dim,
            ..ModelConfig::default()
        };
        Self {
            model,
            train: TrainConfig::default(),
            synth,
            test_utterances: 50,
            posterior_threshold: 0.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    /// Applies one setting. `seed` and `feature_dim` are shared between
    /// sections.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "enc_layers" => self.model.enc_layers = parse(key, v)?,
            "dec_layers" => self.model.dec_layers = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "d_model" => self.model.d_model = parse(key, v)?,
            "d_ff" => self.model.d_ff = parse(key, v)?,
            "max_frames" => self.model.max_frames = parse(key, v)?,
            "max_tokens" => self.model.max_tokens = parse(key, v)?,
            "downsample" => self.model.downsample = parse(key, v)?,
            "feature_dim" => {
                self.model.feature_dim = parse(key, v)?;
                self.synth.feature_dim = self.model.feature_dim;
            }
            "tokens" => {
                self.synth.tokens = parse(key, v)?;
                self.model.vocab_size = self.synth.vocab_size();
            }
            "alpha" => self.train.alpha = parse(key, v)?,
            "lambda" => self.train.lambda = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "peak_lr" => self.train.peak_lr = parse(key, v)?,
            "warmup_steps" => self.train.warmup_steps = parse(key, v)?,
            "clip_norm" => self.train.clip_norm = parse(key, v)?,
            "dropout" => self.train.dropout = parse(key, v)?,
            "token_dropout" => self.train.token_dropout = parse(key, v)?,
            "seed" => {
                self.train.seed = parse(key, v)?;
                self.synth.seed = self.train.seed;
            }
            "utterances" => self.synth.utterances = parse(key, v)?,
            "test_utterances" => self.test_utterances = parse(key, v)?,
            "min_len" => self.synth.min_len = parse(key, v)?,
            "max_len" => self.synth.max_len = parse(key, v)?,
            "min_frames_per_token" => self.synth.min_frames_per_token = parse(key, v)?,
            "max_frames_per_token" => self.synth.max_frames_per_token = parse(key, v)?,
            "noise_std" => self.synth.noise_std = parse(key, v)?,
            "posterior_threshold" => self.posterior_threshold = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Reads `key=value` lines; `#` starts a comment.
    pub fn parse_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.parse_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.test_utterances > self.synth.utterances {
            return Err(Error::Config(format!(
                "{} test utterances out of {}",
                self.test_utterances, self.synth.utterances
            )));
        }
        Ok(())
    }
}
