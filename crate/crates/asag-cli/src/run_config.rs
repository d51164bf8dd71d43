//! Flat `key=value` run configuration with command-line overrides.
//!
//! Every key is validated against the schema below; unknown keys are
//! rejected by name, so a typo never silently falls back to a default.
//! `vocab_size` is not a key: it is derived from the training data.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use asag_core::model::ModelConfig;
use asag_core::train::TrainConfig;
use asag_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Tokens below this corpus count fall back to UNK.
    pub min_count: usize,
    /// Optional pre-trained embedding text file.
    pub embeddings: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            min_count: 1,
            embeddings: None,
        }
    }
}

const KEYS: [&str; 21] = [
    "d_emb",
    "d_model",
    "head_count",
    "d_ffn",
    "max_len",
    "encoder_layers",
    "aggregation_layers",
    "pooling_dim",
    "dropout_rate",
    "share_encoders",
    "seed",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "batch_size",
    "epochs",
    "patience",
    "grad_clip",
    "min_count",
    "embeddings",
];

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "d_emb" => self.model.d_emb = parse(key, value)?,
            "d_model" => self.model.d_model = parse(key, value)?,
            "head_count" => self.model.head_count = parse(key, value)?,
            "d_ffn" => self.model.d_ffn = parse(key, value)?,
            "max_len" => self.model.max_len = parse(key, value)?,
            "encoder_layers" => self.model.encoder_layers = parse(key, value)?,
            "aggregation_layers" => self.model.aggregation_layers = parse(key, value)?,
            "pooling_dim" => self.model.pooling_dim = parse(key, value)?,
            "dropout_rate" => self.model.dropout_rate = parse(key, value)?,
            "share_encoders" => self.model.share_encoders = parse(key, value)?,
            "seed" => self.model.seed = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "epsilon" => self.train.epsilon = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "patience" => {
                self.train.patience = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "grad_clip" => {
                self.train.grad_clip = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "min_count" => self.min_count = parse(key, value)?,
            "embeddings" => {
                self.embeddings = match value {
                    "" | "none" => None,
                    v => Some(PathBuf::from(v)),
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Defaults, then the config file, then `--set` pairs (later wins).
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io {
                    context: format!("reading config {}", path.display()),
                    source: e,
                })?;
            let mut seen = HashSet::new();
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: not a key=value line: {raw:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                let key = key.trim();
                if !seen.insert(key.to_string()) {
                    return Err(Error::Config(format!(
                        "{}:{}: duplicate key {key:?}",
                        path.display(),
                        lineno + 1
                    )));
                }
                config.apply(key, value.trim())?;
            }
        }
        for (key, value) in overrides {
            config.apply(key, value)?;
        }
        Ok(config)
    }
}

pub fn parse_set_flag(raw: &str) -> Result<(String, String)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {raw:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_then_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nd_model=32\nepochs=3\n").unwrap();
        let config = RunConfig::load(
            Some(&path),
            &[("epochs".into(), "7".into()), ("patience".into(), "none".into())],
        )
        .unwrap();
        assert_eq!(config.model.d_model, 32);
        assert_eq!(config.train.epochs, 7);
        assert_eq!(config.train.patience, None);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::load(None, &[("d_modle".into(), "8".into())]).unwrap_err();
        assert!(err.to_string().contains("d_modle"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::load(None, &[("epochs".into(), "three".into())]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "d_model=8\nd_model=16\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
    }
}
