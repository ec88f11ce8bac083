//! Training-time weight averaging for domain generalization, with the
//! machinery to study when it helps.
//!
//! The crate trains small MLP classifiers on synthetic domain-shifted data
//! while maintaining a simple moving average of the optimizer iterates next
//! to the online weights. On top of that sit leave-one-domain-out
//! hyperparameter sweeps, logit-averaging ensembles of the resulting models,
//! offline re-averaging of stored checkpoints under different schedules, and
//! diagnostics for how reliably validation accuracy selects models that hold
//! up out of distribution.
//!
//! Everything is deterministic: every random choice (data generation,
//! splits, initialization, batch order, dropout, hyperparameter draws,
//! subset sampling) comes from a tagged stream derived from one base seed,
//! so repeating a run or a whole sweep reproduces identical bytes on disk.
//!
//! A typical flow:
//!
//! ```no_run
//! use tailavg_core::data::{gen_rotated_domains};
//! use tailavg_core::ensemble::{Ensemble, EnsembleKind};
//! use tailavg_core::model::MlpSpec;
//! use tailavg_core::sweep::{load_sweep, run_sweep, SweepOptions};
//! use tailavg_core::trainer::TrainConfig;
//!
//! # fn main() -> tailavg_core::Result<()> {
//! let dataset = gen_rotated_domains(7, 4, 200, 3, 0.35, 0.6)?;
//! let mlp = MlpSpec::new(2, vec![16], 3, 0.0)?;
//! let opts = SweepOptions { trials_per_domain: 4, base_seed: 7, threads: None };
//! run_sweep(&dataset, &mlp, &TrainConfig::default_adam(), &opts, "out".as_ref())?;
//! let runs = load_sweep("out".as_ref())?;
//! let eoa = Ensemble::from_sweep(&runs, EnsembleKind::Eoa)?;
//! # Ok(())
//! # }
//! ```

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod model;
pub mod param;
pub mod record;
pub mod rng;
pub mod sma;
pub mod sweep;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use error::{Error, Result};
pub use param::ParamVector;
