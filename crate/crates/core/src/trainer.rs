//! Minibatch training loop that maintains an online model and its running
//! average side by side.
//!
//! Every run is a pure function of (architecture, splits, config, seed): the
//! initializer, batch order, and dropout masks each draw from their own
//! tagged stream of the run seed. The loop evaluates both parameter views on
//! a shared iteration grid, persists periodic checkpoints when given an
//! output directory, and picks the best checkpoint of each view by
//! validation accuracy.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointKind};
use crate::data::{DataSplits, Sample, Standardizer};
use crate::error::{Error, Result};
use crate::model::{ForwardMode, MlpSpec};
use crate::param::ParamVector;
use crate::record::{
    checkpoint_filename, save_manifest, select_best, write_curve_csv, CurvePoint, RunRecord,
};
use crate::rng::{stream, stream_rng};
use crate::sma::{SmaConfig, SmaState};

/// Training loss above this (or any non-finite loss) aborts the run.
pub const DIVERGENCE_LOSS: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// Adam with the usual constants.
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub total_iters: u64,
    pub eval_interval: u64,
    pub optimizer: OptimizerKind,
    pub sma: SmaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            weight_decay: 0.0,
            dropout_rate: 0.0,
            total_iters: 3000,
            eval_interval: 100,
            optimizer: OptimizerKind::Sgd,
            sma: SmaConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Default configuration for Adam, which wants a smaller step size.
    pub fn default_adam() -> Self {
        Self {
            learning_rate: 0.005,
            optimizer: OptimizerKind::adam(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.total_iters == 0 || self.eval_interval == 0 {
            return Err(Error::InvalidConfig(
                "total_iters and eval_interval must be >= 1".into(),
            ));
        }
        if self.total_iters % self.eval_interval != 0 {
            return Err(Error::InvalidConfig(format!(
                "total_iters {} is not a multiple of eval_interval {}",
                self.total_iters, self.eval_interval
            )));
        }
        if self.sma.freq == 0 {
            return Err(Error::InvalidConfig("sma freq must be >= 1".into()));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "bad adam constants beta1={beta1} beta2={beta2} eps={eps}"
                )));
            }
        }
        Ok(())
    }
}

/// Draw the searched hyperparameters for one trial: dropout from
/// {0, 0.1, 0.5}, weight decay log-uniform over [1e-6, 1e-4]. Everything
/// else is taken from `base`. Deterministic in (`seed`, `trial_index`).
pub fn sample_hypers(base: &TrainConfig, seed: u64, trial_index: u64) -> TrainConfig {
    let mut rng = stream_rng(seed, &[stream::HYPER, trial_index]);
    const DROPOUT_CHOICES: [f64; 3] = [0.0, 0.1, 0.5];
    let dropout_rate = DROPOUT_CHOICES[rng.gen_range(0..DROPOUT_CHOICES.len())];
    let weight_decay = 10f64.powf(rng.gen_range(-6.0..-4.0));
    TrainConfig {
        dropout_rate,
        weight_decay,
        ..base.clone()
    }
}

/// Identity and output plumbing for one run.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub run_id: String,
    pub test_domain: String,
    pub seed: u64,
    pub split_seed: u64,
    pub standardizer: Standardizer,
    /// When set, checkpoints, curves, and the manifest are written here.
    pub out_dir: Option<PathBuf>,
}

pub struct TrainOutput {
    pub record: RunRecord,
    pub selected_online: Checkpoint,
    pub selected_sma: Checkpoint,
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => dim,
        };
        Self {
            kind,
            lr,
            step: 0,
            m: vec![0.0; state],
            v: vec![0.0; state],
        }
    }

    fn apply(&mut self, params: &mut ParamVector, grad: &ParamVector) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.as_mut_slice().iter_mut().zip(grad.iter()) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (i, (p, g)) in params
                    .as_mut_slice()
                    .iter_mut()
                    .zip(grad.iter())
                    .enumerate()
                {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Epoch-reshuffling minibatch order. Leftover samples that do not fill a
/// whole batch are dropped until the next reshuffle.
struct Batcher {
    indices: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, batch_size: usize, rng: ChaCha8Rng) -> Self {
        Self {
            indices: (0..n).collect(),
            pos: n,
            batch: batch_size.min(n),
            rng,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = &self.indices[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        b
    }
}

/// Train one model, tracking online and averaged views.
pub fn train_run(
    mlp: &MlpSpec,
    splits: &DataSplits,
    config: &TrainConfig,
    ctx: &RunContext,
) -> Result<TrainOutput> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let spec = mlp.with_dropout(config.dropout_rate)?;
    if let Some(dir) = &ctx.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut params = spec.init_params(ctx.seed);
    let mut sma = SmaState::new(config.sma);
    sma.observe(0, &params)?;
    let save = |kind: CheckpointKind, iteration: u64, p: &ParamVector| -> Result<()> {
        if let Some(dir) = &ctx.out_dir {
            let ckpt = Checkpoint::new(ctx.run_id.clone(), iteration, kind, p.clone());
            save_checkpoint(&ckpt, &dir.join(checkpoint_filename(kind, iteration)))?;
        }
        Ok(())
    };
    save(CheckpointKind::Online, 0, &params)?;
    // Before the first absorption the averaged model is the online iterate,
    // so the sma series stays total: selection may land on any eval point.
    save(CheckpointKind::Sma, 0, sma.view(&params))?;

    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, params.len());
    let mut batcher = Batcher::new(
        splits.train.len(),
        config.batch_size,
        stream_rng(ctx.seed, &[stream::BATCH]),
    );
    let mut online_curve = Vec::new();
    let mut sma_curve = Vec::new();
    let mut evals: Vec<(u64, ParamVector, ParamVector)> = Vec::new();
    let mut window_loss = 0.0;
    let mut window_count = 0u64;
    let mut batch: Vec<Sample> = Vec::with_capacity(config.batch_size);

    for t in 1..=config.total_iters {
        batch.clear();
        batch.extend(batcher.next_batch().iter().map(|&i| splits.train[i].clone()));
        let mode = ForwardMode::Train {
            seed: ctx.seed,
            iteration: t,
        };
        let (loss, grad) = spec.loss_and_grad(&params, &batch, config.weight_decay, mode)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged { iteration: t, loss });
        }
        optimizer.apply(&mut params, &grad);
        if !params.is_finite() {
            return Err(Error::Diverged { iteration: t, loss });
        }
        sma.observe(t, &params)?;
        window_loss += loss;
        window_count += 1;

        if t % config.eval_interval == 0 {
            let train_loss = window_loss / window_count as f64;
            window_loss = 0.0;
            window_count = 0;
            let avg = sma.view(&params).clone();
            let online_point = CurvePoint {
                iteration: t,
                train_loss,
                val_acc: spec.evaluate_accuracy(&params, &splits.val)?,
                test_acc: spec.evaluate_accuracy(&params, &splits.test)?,
            };
            let sma_point = CurvePoint {
                iteration: t,
                train_loss,
                val_acc: spec.evaluate_accuracy(&avg, &splits.val)?,
                test_acc: spec.evaluate_accuracy(&avg, &splits.test)?,
            };
            save(CheckpointKind::Online, t, &params)?;
            save(CheckpointKind::Sma, t, &avg)?;
            online_curve.push(online_point);
            sma_curve.push(sma_point);
            evals.push((t, params.clone(), avg));
        }
    }

    let selected_online = select_best(&online_curve)?;
    let selected_sma = select_best(&sma_curve)?;
    let params_at = |iteration: u64, online: bool| -> ParamVector {
        let (_, p, a) = evals
            .iter()
            .find(|(t, _, _)| *t == iteration)
            .expect("selection comes from the evaluation grid");
        if online { p.clone() } else { a.clone() }
    };
    let record = RunRecord {
        run_id: ctx.run_id.clone(),
        test_domain: ctx.test_domain.clone(),
        seed: ctx.seed,
        split_seed: ctx.split_seed,
        mlp: spec,
        config: config.clone(),
        standardizer: ctx.standardizer.clone(),
        online_curve,
        sma_curve,
        selected_online,
        selected_sma,
    };
    if let Some(dir) = &ctx.out_dir {
        write_curve_csv(&record.online_curve, &dir.join("online_curve.csv"))?;
        write_curve_csv(&record.sma_curve, &dir.join("sma_curve.csv"))?;
        save_manifest(&record, &dir.join("manifest.json"))?;
    }
    Ok(TrainOutput {
        selected_online: Checkpoint::new(
            ctx.run_id.clone(),
            selected_online.iteration,
            CheckpointKind::Online,
            params_at(selected_online.iteration, true),
        ),
        selected_sma: Checkpoint::new(
            ctx.run_id.clone(),
            selected_sma.iteration,
            CheckpointKind::Sma,
            params_at(selected_sma.iteration, false),
        ),
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_checkpoint;
    use crate::data::{gen_rotated_domains, split, SplitSpec};

    fn toy_splits(noise: f64) -> DataSplits {
        let ds = gen_rotated_domains(11, 3, 40, 2, 0.0, noise).unwrap();
        let mut s = split(
            &ds,
            &SplitSpec::LeaveOneOut {
                test_domain: "d2".into(),
                val_fraction: 0.2,
                split_seed: 3,
            },
        )
        .unwrap();
        s.standardize().unwrap();
        s
    }

    fn ctx(seed: u64) -> RunContext {
        RunContext {
            run_id: "test-run".into(),
            test_domain: "d2".into(),
            seed,
            split_seed: 3,
            standardizer: Standardizer {
                mean: vec![0.0, 0.0],
                std: vec![1.0, 1.0],
            },
            out_dir: None,
        }
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 2);
        let mut p = ParamVector::new(vec![1.0, -2.0]).unwrap();
        let g = ParamVector::new(vec![10.0, 4.0]).unwrap();
        opt.apply(&mut p, &g);
        assert_eq!(p.as_slice(), &[0.0, -2.4]);
    }

    #[test]
    fn adam_matches_a_scalar_reimplementation() {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let lr = 0.01;
        let mut opt = Optimizer::new(OptimizerKind::Adam { beta1: b1, beta2: b2, eps }, lr, 1);
        let mut p = ParamVector::new(vec![0.5]).unwrap();
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        for (step, g) in [1.0f64, -0.5, 2.0].into_iter().enumerate() {
            opt.apply(&mut p, &ParamVector::new(vec![g]).unwrap());
            let t = (step + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!((p.as_slice()[0] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_is_at_most_the_learning_rate() {
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.005, 3);
        let mut p = ParamVector::zeros(3).unwrap();
        let g = ParamVector::new(vec![100.0, -0.3, 1e-4]).unwrap();
        opt.apply(&mut p, &g);
        for &step in p.as_slice() {
            assert!(step.abs() <= 0.005 + 1e-12);
        }
        assert!((p.as_slice()[0] + 0.005).abs() < 1e-6);
    }

    #[test]
    fn linear_model_fits_separable_data() {
        let splits = toy_splits(0.1);
        let spec = MlpSpec::new(2, vec![], 2, 0.0).unwrap();
        let config = TrainConfig {
            total_iters: 1000,
            eval_interval: 100,
            ..TrainConfig::default()
        };
        let out = train_run(&spec, &splits, &config, &ctx(5)).unwrap();
        assert_eq!(out.record.selected_online.val_acc, 1.0);
        // No shift between domains here, so the held-out domain is easy too.
        assert_eq!(out.record.selected_online.test_acc, 1.0);
    }

    #[test]
    fn runs_are_deterministic_in_the_seed() {
        let splits = toy_splits(0.4);
        let spec = MlpSpec::new(2, vec![4], 2, 0.0).unwrap();
        let config = TrainConfig {
            total_iters: 300,
            eval_interval: 100,
            dropout_rate: 0.1,
            ..TrainConfig::default()
        };
        let a = train_run(&spec, &splits, &config, &ctx(7)).unwrap();
        let b = train_run(&spec, &splits, &config, &ctx(7)).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.selected_sma.params, b.selected_sma.params);
        let c = train_run(&spec, &splits, &config, &ctx(8)).unwrap();
        assert_ne!(a.record.online_curve, c.record.online_curve);
    }

    #[test]
    fn stored_sma_checkpoints_are_means_of_online_ones() {
        let dir = tempfile::tempdir().unwrap();
        let splits = toy_splits(0.4);
        let spec = MlpSpec::new(2, vec![3], 2, 0.0).unwrap();
        let config = TrainConfig {
            total_iters: 6,
            eval_interval: 1,
            sma: SmaConfig::new(2, 1).unwrap(),
            ..TrainConfig::default()
        };
        let mut c = ctx(9);
        c.out_dir = Some(dir.path().to_path_buf());
        train_run(&spec, &splits, &config, &c).unwrap();
        let online: Vec<ParamVector> = (0..=6)
            .map(|t| {
                load_checkpoint(&dir.path().join(checkpoint_filename(CheckpointKind::Online, t)))
                    .unwrap()
                    .params
            })
            .collect();
        for t in 2..=6u64 {
            let avg = load_checkpoint(
                &dir.path().join(checkpoint_filename(CheckpointKind::Sma, t)),
            )
            .unwrap()
            .params;
            let mean = ParamVector::mean_of(&online[2..=t as usize]).unwrap();
            assert!(avg.max_abs_diff(&mean).unwrap() < 1e-12);
        }
        // Nothing absorbed before t0: the sma file there holds the pass-through
        // view, which is the online iterate itself.
        let early = load_checkpoint(
            &dir.path().join(checkpoint_filename(CheckpointKind::Sma, 1)),
        )
        .unwrap();
        assert_eq!(early.kind, CheckpointKind::Sma);
        assert_eq!(early.params, online[1]);
    }

    #[test]
    fn hyper_draws_are_deterministic_and_in_range() {
        let base = TrainConfig::default();
        let a = sample_hypers(&base, 1, 0);
        assert_eq!(a, sample_hypers(&base, 1, 0));
        let mut seen = std::collections::HashSet::new();
        for k in 0..20 {
            let c = sample_hypers(&base, 1, k);
            assert!([0.0, 0.1, 0.5].contains(&c.dropout_rate));
            assert!((1e-6..=1e-4).contains(&c.weight_decay));
            assert_eq!(c.learning_rate, base.learning_rate);
            seen.insert(c.weight_decay.to_bits());
        }
        assert!(seen.len() > 15, "weight decay draws should rarely collide");
    }

    #[test]
    fn exploding_loss_reports_divergence() {
        let splits = toy_splits(0.4);
        let spec = MlpSpec::new(2, vec![4], 2, 0.0).unwrap();
        let config = TrainConfig {
            learning_rate: 1e10,
            total_iters: 200,
            eval_interval: 200,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_run(&spec, &splits, &config, &ctx(1)),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn eval_interval_must_divide_total_iters() {
        let config = TrainConfig {
            total_iters: 250,
            eval_interval: 100,
            ..TrainConfig::default()
        };
        assert!(matches!(config.validate(), Err(Error::InvalidConfig(_))));
    }
}
