//! Flat `key = value` run configuration with command-line overrides.

use std::path::{Path, PathBuf};

use chebmixer::config::{set_train, train_pairs};
use chebmixer::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed_given: bool,
    /// Set explicitly by the user; checked against the dataset.
    pub d_raw: Option<usize>,
    pub classes: Option<usize>,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), CliError> {
        let err = |msg: String| CliError::Usage(format!("{origin}: {msg}"));
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => {
                let known = set_train(&mut self.train, key, value).map_err(|e| err(e.to_string()))?;
                if !known {
                    return Err(err(format!("unknown config key `{key}`")));
                }
                match key {
                    "seed" => self.seed_given = true,
                    "d_raw" => self.d_raw = Some(self.train.model.input_dim),
                    "classes" => self.classes = Some(self.train.model.classes),
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let origin = format!("{}:{}", path.display(), i + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}: expected `key = value`")))?;
            self.set(k.trim(), v.trim(), &origin)?;
        }
        Ok(())
    }

    /// File first, then `--set` pairs, then dedicated flags.
    pub fn build(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        Self::build_on(TrainConfig::default(), file, sets, seed)
    }

    /// [`Self::build`] starting from `base` instead of the defaults.
    pub fn build_on(base: TrainConfig, file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut rc = RunConfig {
            train: base,
            ..RunConfig::default()
        };
        if let Some(f) = file {
            rc.load_file(f)?;
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            rc.set(k.trim(), v.trim(), "--set")?;
        }
        if let Some(s) = seed {
            rc.train.seed = s;
            rc.seed_given = true;
        }
        Ok(rc)
    }

    /// Every effective key, for echoing into result files.
    pub fn echo(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        for (k, v) in train_pairs(&self.train) {
            m.insert(k.to_string(), serde_json::Value::String(v));
        }
        if let Some(d) = &self.data {
            m.insert("data".into(), d.display().to_string().into());
        }
        if let Some(o) = &self.out {
            m.insert("out".into(), o.display().to_string().into());
        }
        m
    }
}
