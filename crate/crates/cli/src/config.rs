//! Experiment configuration persisted alongside sweep outputs.
//!
//! A sweep directory carries an `experiment.json` describing the dataset
//! source, the model shape, and the training setup that produced it, so
//! later commands (ablations, ensembles, diagnostics) can rebuild the exact
//! dataset without re-specifying flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use tailavg_core::data::{gen_rotated_domains, load_csv, DomainDataset};
use tailavg_core::trainer::TrainConfig;

use crate::UsageError;

pub const EXPERIMENT_FILE: &str = "experiment.json";

pub const DEFAULT_DOMAINS: usize = 4;
pub const DEFAULT_PER_DOMAIN: usize = 200;
pub const DEFAULT_CLASSES: usize = 3;
pub const DEFAULT_ROTATION_STEP: f64 = 0.35;
pub const DEFAULT_NOISE_STD: f64 = 0.6;

/// Where the training data comes from. Stored in `experiment.json` so the
/// dataset can be reproduced byte-for-byte by any later command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Synthetic rotated-cluster domains drawn from a fixed seed.
    Generated {
        seed: u64,
        domains: usize,
        per_domain: usize,
        classes: usize,
        rotation_step: f64,
        noise_std: f64,
    },
    /// A dataset CSV on disk. `classes` overrides the inferred class count.
    Csv {
        path: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
}

impl DatasetSource {
    pub fn materialize(&self) -> anyhow::Result<DomainDataset> {
        match self {
            DatasetSource::Generated {
                seed,
                domains,
                per_domain,
                classes,
                rotation_step,
                noise_std,
            } => gen_rotated_domains(*seed, *domains, *per_domain, *classes, *rotation_step, *noise_std)
                .context("failed to generate dataset"),
            DatasetSource::Csv { path, classes } => load_csv(path, *classes)
                .with_context(|| format!("failed to load dataset from {}", path.display())),
        }
    }
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Generated {
            seed: 0,
            domains: DEFAULT_DOMAINS,
            per_domain: DEFAULT_PER_DOMAIN,
            classes: DEFAULT_CLASSES,
            rotation_step: DEFAULT_ROTATION_STEP,
            noise_std: DEFAULT_NOISE_STD,
        }
    }
}

/// Full description of a sweep: dataset, model shape, training setup, and
/// how many trials to run per held-out domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Hidden layer widths; empty means a linear model.
    pub hidden_dims: Vec<usize>,
    pub train: TrainConfig,
    pub trials_per_domain: usize,
    pub base_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            hidden_dims: vec![16],
            train: TrainConfig::default_adam(),
            trials_per_domain: 4,
            base_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError::new(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| UsageError::new(format!("invalid config {}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }

    /// Loads the config stored in a sweep directory.
    pub fn load_from_sweep(sweep_dir: &Path) -> anyhow::Result<Self> {
        let path = sweep_dir.join(EXPERIMENT_FILE);
        if !path.is_file() {
            return Err(UsageError::new(format!(
                "{} not found; is {} a sweep directory?",
                path.display(),
                sweep_dir.display()
            ))
            .into());
        }
        Self::load(&path)
    }
}
