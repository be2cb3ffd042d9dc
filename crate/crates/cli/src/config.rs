//! Declarative run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ultragcn::dataset::InputFormat;
use ultragcn::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub format: InputFormat,
    /// Share of train pairs held out when no validation file is given.
    pub valid_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            test: None,
            valid: None,
            format: InputFormat::AdjacencyList,
            valid_fraction: 0.05,
            split_seed: 2021,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub neighbors: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambda: vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4],
            gamma: vec![1.0, 2.5],
            neighbors: vec![10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub threads: Option<usize>,
    pub cutoffs: Vec<usize>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            threads: None,
            cutoffs: vec![20],
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.data.train, &mut cfg.data.test, &mut cfg.data.valid, &mut cfg.checkpoint]
            .into_iter()
            .flatten()
        {
            rebase(p);
        }
        rebase(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err("cutoffs must be a non-empty list of positive integers".into());
        }
        if self.threads == Some(0) {
            return Err("threads must be positive".into());
        }
        if !(0.0..1.0).contains(&self.data.valid_fraction) {
            return Err("valid_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}
