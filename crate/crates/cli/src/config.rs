//! Experiment configuration: a TOML file plus command-line overrides.

use std::path::Path;

use kspace_core::experiment::PrepConfig;
use kspace_core::model::TrainConfig;
use kspace_core::phantom::{PhantomSpec, MIN_DATASET_SIZE};
use kspace_core::pipeline::{ChannelSet, PipelineKind};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_R_GRID: [usize; 9] = [1, 2, 4, 8, 16, 24, 32, 48, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_samples: usize,
    /// Train, validation and test fractions.
    pub fractions: (f64, f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            fractions: (0.7, 0.15, 0.15),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub r_grid: Vec<usize>,
    pub bootstrap_iters: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            r_grid: DEFAULT_R_GRID.to_vec(),
            bootstrap_iters: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub slices: usize,
    pub factor: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { slices: 50, factor: 2 }
    }
}

/// Everything a command needs. `seed` drives phantom generation, training
/// and the bootstrap, so the per-module seed fields are not accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub pipeline: PipelineKind,
    pub channels: ChannelSet,
    /// Factors drawn by the undersampling augmentation during training.
    pub train_factors: Vec<usize>,
    pub flip_p: f64,
    pub phantom: PhantomSpec,
    pub dataset: DatasetConfig,
    pub prep: PrepConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            pipeline: PipelineKind::Pca,
            channels: ChannelSet::MagK,
            train_factors: vec![1, 2, 4, 8],
            flip_p: 0.5,
            phantom: PhantomSpec::default(),
            dataset: DatasetConfig::default(),
            prep: PrepConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Values given on the command line; each replaces the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub r_grid: Option<Vec<usize>>,
    pub channels: Option<ChannelSet>,
    pub pipeline: Option<PipelineKind>,
    pub threads: Option<usize>,
}

fn reference_keys() -> toml::Table {
    let mut t = toml::Table::try_from(Config::default()).expect("default config serializes");
    for section in ["phantom", "train"] {
        if let Some(toml::Value::Table(s)) = t.get_mut(section) {
            s.remove("seed");
        }
    }
    t
}

fn collect_unknown(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in given {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (value, known.get(key)) {
            (_, None) => out.push(path),
            (toml::Value::Table(g), Some(toml::Value::Table(k))) => collect_unknown(g, k, &path, out),
            _ => {}
        }
    }
}

/// Every key path in `text` that the configuration does not define.
pub fn unknown_keys(text: &str) -> Result<Vec<String>, CliError> {
    let table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
    let mut out = Vec::new();
    collect_unknown(&table, &reference_keys(), "", &mut out);
    Ok(out)
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let unknown = unknown_keys(text)?;
        if !unknown.is_empty() {
            return Err(CliError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })?
            }
            None => Self::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(g) = &overrides.r_grid {
            cfg.eval.r_grid = g.clone();
        }
        if let Some(c) = overrides.channels {
            cfg.channels = c;
        }
        if let Some(p) = overrides.pipeline {
            cfg.pipeline = p;
        }
        if let Some(t) = overrides.threads {
            cfg.threads = t;
        }
        cfg.phantom.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reports every problem at once.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        if let Err(e) = self.phantom.validate() {
            bad.push(format!("phantom: {e}"));
        }
        if let Err(e) = self.train.validate() {
            bad.push(format!("train: {e}"));
        }
        let m = self.phantom.matrix;
        let grid_ok = |g: &[usize]| !g.is_empty() && g.iter().all(|&r| (1..=m).contains(&r));
        if !grid_ok(&self.eval.r_grid) {
            bad.push(format!("eval.r_grid {:?} must be non-empty with factors in 1..={m}", self.eval.r_grid));
        }
        if !grid_ok(&self.train_factors) {
            bad.push(format!("train_factors {:?} must be non-empty with factors in 1..={m}", self.train_factors));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            bad.push(format!("flip_p {} must lie in [0, 1]", self.flip_p));
        }
        if self.dataset.n_samples < MIN_DATASET_SIZE {
            bad.push(format!("dataset.n_samples must be at least {MIN_DATASET_SIZE}"));
        }
        if self.eval.bootstrap_iters == 0 {
            bad.push("eval.bootstrap_iters must be positive".into());
        }
        if self.bench.slices == 0 || !(1..=m).contains(&self.bench.factor) {
            bad.push("bench needs slices >= 1 and a factor within the matrix".into());
        }
        if self.prep.acs_lines > m || self.prep.native_factor == 0 {
            bad.push(format!("prep.acs_lines must not exceed {m} and native_factor must be positive"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_every_unknown_key() {
        let text = "sede = 1\n[phantom]\nmatrix = 32\ncoils = 4\nseed = 3\n[train.adam]\nbeta3 = 0.1\n";
        let keys = unknown_keys(text).unwrap();
        assert_eq!(keys, ["phantom.coils", "phantom.seed", "sede", "train.adam.beta3"]);
        assert!(matches!(Config::from_toml(text), Err(CliError::Config(_))));
    }

    #[test]
    fn default_round_trips_through_toml() {
        let mut cfg = Config::default();
        cfg.phantom.matrix = 64;
        let mut table = toml::Table::try_from(&cfg).unwrap();
        for s in ["phantom", "train"] {
            table.get_mut(s).unwrap().as_table_mut().unwrap().remove("seed");
        }
        let back = Config::from_toml(&toml::to_string(&table).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let o = Overrides {
            seed: Some(9),
            r_grid: Some(vec![1, 200]),
            ..Overrides::default()
        };
        assert!(matches!(Config::load(None, &o), Err(CliError::Config(m)) if m.contains("r_grid")));
        let o = Overrides {
            seed: Some(9),
            channels: Some(ChannelSet::Mag),
            ..Overrides::default()
        };
        let cfg = Config::load(None, &o).unwrap();
        assert_eq!((cfg.phantom.seed, cfg.train.seed, cfg.channels), (9, 9, ChannelSet::Mag));
    }
}
