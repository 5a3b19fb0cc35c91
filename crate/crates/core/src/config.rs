//! Flat `key = value` run configuration.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::TrainSchedule;

pub const SEED_ENV: &str = "NEURON_ALLOC_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub dropout: f32,
    pub tie_output: bool,
    pub max_vocab: Option<usize>,
    pub steps: u64,
    pub warmup: u64,
    pub lr: f32,
    pub batch_tokens: usize,
    pub eval_every: u64,
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ffn: 128,
            max_seq_len: 64,
            dropout: 0.0,
            tie_output: false,
            max_vocab: None,
            steps: 2000,
            warmup: 200,
            lr: 2e-3,
            batch_tokens: 400,
            eval_every: 250,
            patience: None,
            seed: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(field: &'static str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(field, format!("cannot parse `{value}`")))
}

fn optional<T: std::str::FromStr>(field: &'static str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(field, value).map(Some)
    }
}

impl RunConfig {
    /// Sets one key; names match the long CLI flags with `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.replace('-', "_").as_str() {
            "num_layers" => self.num_layers = parse("num_layers", value)?,
            "d_model" => self.d_model = parse("d_model", value)?,
            "num_heads" => self.num_heads = parse("num_heads", value)?,
            "d_ffn" => self.d_ffn = parse("d_ffn", value)?,
            "max_seq_len" => self.max_seq_len = parse("max_seq_len", value)?,
            "dropout" => self.dropout = parse("dropout", value)?,
            "tie_output" => self.tie_output = parse("tie_output", value)?,
            "max_vocab" => self.max_vocab = optional("max_vocab", value)?,
            "steps" => self.steps = parse("steps", value)?,
            "warmup" => self.warmup = parse("warmup", value)?,
            "lr" => self.lr = parse("lr", value)?,
            "batch_tokens" => self.batch_tokens = parse("batch_tokens", value)?,
            "eval_every" => self.eval_every = parse("eval_every", value)?,
            "patience" => self.patience = optional("patience", value)?,
            "seed" => self.seed = parse("seed", value)?,
            _ => return Err(Error::usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("config line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&crate::persist::read_text(path)?)
    }

    /// Applies the seed environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse("seed", v.trim())?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            total_steps: self.steps,
            warmup_steps: self.warmup,
            peak_lr: self.lr,
            batch_tokens: self.batch_tokens,
            seed: self.seed,
            eval_every: self.eval_every,
            patience: self.patience,
            check_isolation: cfg!(debug_assertions),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = RunConfig::parse_str("d_model = 32 # small\n\nsteps=10\npatience = 3\nmax-vocab = none\n").unwrap();
        assert_eq!((cfg.d_model, cfg.steps, cfg.patience, cfg.max_vocab), (32, 10, Some(3), None));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(RunConfig::parse_str("colour = red"), Err(Error::Usage(_))));
        assert!(matches!(RunConfig::parse_str("steps = many"), Err(Error::Config { field: "steps", .. })));
        assert!(RunConfig::parse_str("steps").is_err());
    }
}
