//! Run configuration: a TOML file of `key = value` lines plus command-line
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PctError, Result};
use crate::model::ModelConfig;
use crate::pc_io::{split_dataset, PointCloud};
use crate::synth::{synthetic_sweeps, SynthConfig};
use crate::trainer::{load_clouds, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory.
    pub out: PathBuf,
    /// Sweep files (`.bin` or `.xyz`), split into train and test sets.
    pub sweeps: Vec<PathBuf>,
    pub train_fraction: f64,
    /// Checkpoint used by `encode`, `decode` and `eval`; defaults to
    /// `<out>/model.pct1`.
    pub checkpoint: Option<PathBuf>,
    /// Code lengths swept by `rd-curve`.
    pub code_lengths: Vec<usize>,
    /// Target ratio of `baseline`.
    pub ratio: f64,
    /// Generated sweeps used when `sweeps` is empty.
    pub synthetic: Option<SynthConfig>,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            sweeps: Vec::new(),
            train_fraction: 0.8,
            checkpoint: None,
            code_lengths: vec![9, 18, 36, 72],
            ratio: 0.0278,
            synthetic: None,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

/// Values given on the command line; each replaces its config key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub code_len: Option<usize>,
    pub ratio: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PctError::Config(e.to_string()))
    }

    /// Reads `path`; relative sweep and checkpoint paths are taken relative
    /// to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PctError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| PctError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for s in &mut cfg.sweeps {
            *s = base.join(&*s);
        }
        if let Some(c) = &mut cfg.checkpoint {
            *c = base.join(&*c);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(l) = o.code_len {
            self.model.code_len = l;
        }
        if let Some(r) = o.ratio {
            self.ratio = r;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(PctError::Config(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if self.code_lengths.contains(&0) {
            return Err(PctError::Config("code lengths must be positive".into()));
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if self.sweeps.is_empty() && self.synthetic.is_none() {
            return Err(PctError::Config("config names no sweeps and no [synthetic] corpus".into()));
        }
        Ok(())
    }

    /// Training parameters with the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.pct1"))
    }

    /// The resolved configuration as TOML, used as provenance in outputs.
    pub fn provenance(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Train and test sweeps, each with a display name.
    pub fn load_data(&self) -> Result<Data> {
        if self.sweeps.is_empty() {
            let synth = self.synthetic.as_ref().ok_or_else(|| PctError::Config("no sweeps configured".into()))?;
            let clouds = synthetic_sweeps(synth, self.model.voxel_size)?;
            let n_train = ((self.train_fraction * clouds.len() as f64).floor() as usize).max(1);
            let named: Vec<(String, PointCloud)> =
                clouds.into_iter().enumerate().map(|(i, c)| (format!("synthetic{i:03}"), c)).collect();
            let (train, test) = named.split_at(n_train.min(named.len()));
            return Ok(Data { train: train.to_vec(), test: test.to_vec() });
        }
        let split = split_dataset(&self.sweeps, self.train_fraction, self.seed)?;
        let load = |paths: &[PathBuf]| -> Result<Vec<(String, PointCloud)>> {
            Ok(paths.iter().map(|p| stem(p)).zip(load_clouds(paths)?).collect())
        };
        Ok(Data { train: load(&split.train_paths)?, test: load(&split.test_paths)? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Data {
    pub train: Vec<(String, PointCloud)>,
    pub test: Vec<(String, PointCloud)>,
}

impl Data {
    pub fn train_clouds(&self) -> Vec<PointCloud> {
        self.train.iter().map(|(_, c)| c.clone()).collect()
    }

    pub fn test_clouds(&self) -> Vec<PointCloud> {
        self.test.iter().map(|(_, c)| c.clone()).collect()
    }
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "sweep".into(), |s| s.to_string_lossy().into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_sections() {
        let cfg = RunConfig::parse(
            "seed = 3\nsweeps = [\"a.bin\"]\n[train]\nepochs = 5\n[model]\ncode_len = 9\nks = [1, 4]\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.model.code_len, 9);
        assert_eq!(cfg.model.voxel_size, [1.0, 1.0, 10.0]);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("colour = 1"), Err(PctError::Config(_))));
        assert!(RunConfig::parse("[train]\nepoch = 1").is_err());
        assert!(RunConfig::parse("[model]\ncodelen = 1").is_err());
    }

    #[test]
    fn provenance_round_trips() {
        let mut cfg = RunConfig { synthetic: Some(SynthConfig::default()), ..Default::default() };
        cfg.apply(&Overrides { seed: Some(9), code_len: Some(36), ..Default::default() });
        let back = RunConfig::parse(&cfg.provenance()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train_config().seed, 9);
    }

    #[test]
    fn missing_file_is_a_config_error_naming_the_path() {
        let e = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(matches!(&e, PctError::Config(m) if m.contains("/nonexistent/run.toml")));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn book_example_config_is_valid() {
        let md = include_str!("../../../book/src/cli.md");
        let text = md.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
        let cfg = RunConfig::parse(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.sweeps.len(), 3);
    }
}
