//! Run configuration: built-in defaults, then a config file, then
//! command-line flags, with every applied key recorded for the log.

use std::path::Path;

use anyhow::{Context, Result};
use hmer_core::inference::SearchParams;
use hmer_core::model::ModelConfig;
use hmer_core::training::{parse_config_text, TrainConfig};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: SearchParams,
    /// `key = value (source)` for every applied setting, in order.
    pub log: Vec<String>,
}

impl RunConfig {
    /// Defaults for `vocab_size`, reduced when `toy`.
    pub fn defaults(toy: bool, vocab_size: usize) -> Self {
        let (model, train) = if toy {
            (ModelConfig::toy(vocab_size), TrainConfig::toy())
        } else {
            (ModelConfig::full(vocab_size), TrainConfig::default())
        };
        RunConfig {
            model,
            train,
            search: SearchParams::default(),
            log: vec![format!("preset = {} (default)", if toy { "toy" } else { "full" })],
        }
    }

    /// Applies one prefixed key; unknown prefixes and keys are errors.
    pub fn set(&mut self, key: &str, value: &str, source: &str) -> hmer_core::Result<()> {
        let (prefix, rest) = key.split_once('.').unwrap_or((key, ""));
        match prefix {
            "encoder" | "decoder" | "optim" => self.model.set(key, value)?,
            "train" => self.train.set(rest, value)?,
            "search" => self.search.set(rest, value)?,
            _ => return Err(hmer_core::Error::Config(format!("unknown key {key}"))),
        }
        self.log.push(format!("{key} = {value} ({source})"));
        Ok(())
    }

    /// Layers the config file and then `cli` pairs over the defaults and
    /// validates the result.
    pub fn resolve(mut self, file: Option<&Path>, cli: &[(String, String)]) -> Result<Self> {
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let source = path.display().to_string();
            for e in parse_config_text(&text)? {
                self.set(&e.key, &e.value, &format!("{source}:{}", e.line))?;
            }
        }
        for (k, v) in cli {
            self.set(k, v, "flag")?;
        }
        self.model.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        Ok(self)
    }
}

/// Splits a `key=value` flag argument.
pub fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
