//! Random hyperparameter sweeps over held-out domains, plus offline
//! re-averaging of the checkpoints a sweep left behind.
//!
//! Layout on disk: `<out>/<test_domain>/trial<k>/` per run, holding the
//! manifest, both curve CSVs, and periodic checkpoints, with a `summary.csv`
//! at the top. Each trial gets its own derived seeds for the data split and
//! the run itself, so the whole sweep is reproducible from one base seed and
//! trials never share randomness even across domains.
//!
//! The ablation helpers rebuild averaged parameters from the stored online
//! checkpoints under a different start iteration or absorption period. Both
//! mirror the training-time protocol exactly: the averaged view falls back
//! to the online iterate until something has been absorbed, the rebuilt
//! curve is scored on the run's own validation split, and the selected
//! point's held-out accuracy is averaged over runs.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{atomic_write, load_checkpoint, CheckpointKind};
use crate::data::{split, split_seed_for, DataSplits, DomainDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::model::MlpSpec;
use crate::param::ParamVector;
use crate::record::{
    checkpoint_filename, load_manifest, select_best, CurvePoint, RunRecord,
};
use crate::rng::{derive_seed, stream};
use crate::trainer::{sample_hypers, train_run, RunContext, TrainConfig};

/// Share of each training domain held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

pub const SWEEP_SUMMARY_HEADER: &str =
    "test_domain,trial,kind,selected_iter,val_acc,test_acc,status";

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub trials_per_domain: usize,
    pub base_seed: u64,
    /// Worker threads for running trials; `None` uses the rayon default.
    pub threads: Option<usize>,
}

/// One trial's result. Failures (for example a diverged run) are recorded
/// here and in the summary instead of aborting the sweep.
#[derive(Debug)]
pub struct TrialOutcome {
    pub test_domain: String,
    pub trial: usize,
    pub result: Result<RunRecord>,
}

/// A run directory read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub record: RunRecord,
    pub dir: PathBuf,
}

/// Train `trials_per_domain` runs per held-out domain and write everything
/// under `out_dir`, including `summary.csv`. Outcomes come back in (domain,
/// trial) order regardless of scheduling.
pub fn run_sweep(
    dataset: &DomainDataset,
    mlp: &MlpSpec,
    base: &TrainConfig,
    opts: &SweepOptions,
    out_dir: &Path,
) -> Result<Vec<TrialOutcome>> {
    dataset.validate()?;
    base.validate()?;
    if opts.trials_per_domain == 0 {
        return Err(Error::InvalidConfig("trials_per_domain must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut tasks = Vec::new();
    for (d_idx, domain) in dataset.domains.iter().enumerate() {
        for k in 0..opts.trials_per_domain {
            tasks.push((d_idx, domain.id.clone(), k));
        }
    }
    let run_one = |(d_idx, domain_id, k): &(usize, String, usize)| -> TrialOutcome {
        let trial_global = (*d_idx * opts.trials_per_domain + *k) as u64;
        let config = sample_hypers(base, opts.base_seed, trial_global);
        let split_seed = split_seed_for(opts.base_seed, *d_idx, *k);
        let result = (|| {
            let spec = SplitSpec::LeaveOneOut {
                test_domain: domain_id.clone(),
                val_fraction: VAL_FRACTION,
                split_seed,
            };
            let mut splits = split(dataset, &spec)?;
            let standardizer = splits.standardize()?;
            let ctx = RunContext {
                run_id: format!("{domain_id}-t{k}"),
                test_domain: domain_id.clone(),
                seed: derive_seed(opts.base_seed, &[stream::RUN, *d_idx as u64, *k as u64]),
                split_seed,
                standardizer,
                out_dir: Some(out_dir.join(domain_id).join(format!("trial{k}"))),
            };
            Ok(train_run(mlp, &splits, &config, &ctx)?.record)
        })();
        TrialOutcome {
            test_domain: domain_id.clone(),
            trial: *k,
            result,
        }
    };
    let outcomes: Vec<TrialOutcome> = match opts.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
            pool.install(|| tasks.par_iter().map(run_one).collect())
        }
        None => tasks.par_iter().map(run_one).collect(),
    };
    write_sweep_summary(&outcomes, &out_dir.join("summary.csv"))?;
    Ok(outcomes)
}

fn sanitize_status(msg: &str) -> String {
    msg.chars()
        .map(|c| if c == ',' || c == '\n' || c == '\r' { ';' } else { c })
        .collect()
}

/// Two rows per completed trial (online and sma selections, status `ok`);
/// one `error` row for a failed trial with the message in the status column.
pub fn write_sweep_summary(outcomes: &[TrialOutcome], path: &Path) -> Result<()> {
    let mut out = String::from(SWEEP_SUMMARY_HEADER);
    out.push('\n');
    for o in outcomes {
        match &o.result {
            Ok(r) => {
                for (kind, sel) in [("online", &r.selected_online), ("sma", &r.selected_sma)] {
                    out.push_str(&format!(
                        "{},{},{kind},{},{},{},ok\n",
                        o.test_domain, o.trial, sel.iteration, sel.val_acc, sel.test_acc
                    ));
                }
            }
            Err(e) => {
                out.push_str(&format!(
                    "{},{},error,0,0,0,{}\n",
                    o.test_domain,
                    o.trial,
                    sanitize_status(&e.to_string())
                ));
            }
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Read back every completed run under a sweep directory. Domain directories
/// are visited in lexicographic order, trials in numeric order; trials that
/// never wrote a manifest (failed runs) are skipped.
pub fn load_sweep(dir: &Path) -> Result<Vec<LoadedRun>> {
    let mut domains: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    domains.sort();
    let mut runs = Vec::new();
    for domain_dir in domains {
        let mut trials: Vec<(usize, PathBuf)> = std::fs::read_dir(&domain_dir)
            .map_err(|e| Error::io(&domain_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .filter_map(|p| {
                let name = p.file_name()?.to_str()?.to_string();
                let k: usize = name.strip_prefix("trial")?.parse().ok()?;
                Some((k, p))
            })
            .collect();
        trials.sort();
        for (_, trial_dir) in trials {
            let manifest = trial_dir.join("manifest.json");
            if !manifest.exists() {
                continue;
            }
            runs.push(LoadedRun {
                record: load_manifest(&manifest)?,
                dir: trial_dir,
            });
        }
    }
    if runs.is_empty() {
        return Err(Error::Empty(format!("sweep directory {}", dir.display())));
    }
    Ok(runs)
}

/// Rebuild the run's data splits from its recorded seeds and apply its
/// stored feature standardizer.
pub fn resplit_run(record: &RunRecord, dataset: &DomainDataset) -> Result<DataSplits> {
    let spec = SplitSpec::LeaveOneOut {
        test_domain: record.test_domain.clone(),
        val_fraction: VAL_FRACTION,
        split_seed: record.split_seed,
    };
    let mut splits = split(dataset, &spec)?;
    record.standardizer.apply_to(&mut splits.train);
    record.standardizer.apply_to(&mut splits.val);
    record.standardizer.apply_to(&mut splits.test);
    Ok(splits)
}

/// The online checkpoints of a run in iteration order: 0, stride, ...,
/// total_iters, where the stride is the run's evaluation interval.
pub fn load_online_series(run: &LoadedRun) -> Result<Vec<(u64, ParamVector)>> {
    let stride = run.record.config.eval_interval;
    let total = run.record.config.total_iters;
    let mut series = Vec::with_capacity((total / stride + 1) as usize);
    for j in 0..=total / stride {
        let t = j * stride;
        let path = run.dir.join(checkpoint_filename(CheckpointKind::Online, t));
        let ckpt = load_checkpoint(&path)?;
        if ckpt.kind != CheckpointKind::Online || ckpt.iteration != t {
            return Err(Error::Invalid(format!(
                "{} holds {} iteration {}, expected online iteration {t}",
                path.display(),
                ckpt.kind,
                ckpt.iteration
            )));
        }
        series.push((t, ckpt.params));
    }
    Ok(series)
}

/// Mean held-out accuracy for one re-averaging setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationPoint {
    pub value: u64,
    pub mean_test_acc: f64,
}

/// Walk the stored series, averaging the iterates `absorb` accepts, and
/// score every grid point; before the first absorption the view is the
/// online iterate itself.
fn reconstruct_curve(
    spec: &MlpSpec,
    splits: &DataSplits,
    series: &[(u64, ParamVector)],
    absorb: impl Fn(u64) -> bool,
) -> Result<Vec<CurvePoint>> {
    let mut avg: Option<ParamVector> = None;
    let mut count = 0u64;
    let mut curve = Vec::with_capacity(series.len());
    for (t, p) in series {
        if absorb(*t) {
            match &mut avg {
                None => {
                    avg = Some(p.clone());
                    count = 1;
                }
                Some(a) => {
                    count += 1;
                    a.blend(1.0 / count as f64, p)?;
                }
            }
        }
        let view = avg.as_ref().unwrap_or(p);
        curve.push(CurvePoint {
            iteration: *t,
            train_loss: 0.0,
            val_acc: spec.evaluate_accuracy(view, &splits.val)?,
            test_acc: spec.evaluate_accuracy(view, &splits.test)?,
        });
    }
    if avg.is_none() {
        let last = series.last().map(|(t, _)| *t).unwrap_or(0);
        return Err(Error::EmptyAverage {
            t0: last + 1,
            freq: 1,
        });
    }
    Ok(curve)
}

fn dedup_grid(grid: &[u64]) -> Vec<u64> {
    let mut seen = std::collections::HashSet::new();
    grid.iter().copied().filter(|v| seen.insert(*v)).collect()
}

fn ablate_with<F>(
    dataset: &DomainDataset,
    runs: &[LoadedRun],
    grid: &[u64],
    absorb_for: F,
) -> Result<Vec<AblationPoint>>
where
    F: Fn(&LoadedRun, u64) -> Result<Box<dyn Fn(u64) -> bool>>,
{
    if runs.is_empty() {
        return Err(Error::Empty("ablation run set".into()));
    }
    let grid = dedup_grid(grid);
    if grid.is_empty() {
        return Err(Error::Empty("ablation grid".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    let prepared: Vec<(&LoadedRun, DataSplits, Vec<(u64, ParamVector)>)> = runs
        .iter()
        .map(|run| {
            let splits = resplit_run(&run.record, dataset)?;
            let series = load_online_series(run)?;
            Ok((run, splits, series))
        })
        .collect::<Result<_>>()?;
    for &value in &grid {
        let mut sum = 0.0;
        for (run, splits, series) in &prepared {
            let absorb = absorb_for(run, value)?;
            let curve = reconstruct_curve(&run.record.mlp, splits, series, absorb)?;
            sum += select_best(&curve)?.test_acc;
        }
        points.push(AblationPoint {
            value,
            mean_test_acc: sum / runs.len() as f64,
        });
    }
    Ok(points)
}

/// Re-average every run with each start iteration in `grid` (absorbing all
/// stored iterates from there on) and report the mean held-out accuracy of
/// the validation-selected point. Start iterations past the end of a run are
/// an error.
pub fn ablate_t0(
    dataset: &DomainDataset,
    runs: &[LoadedRun],
    grid: &[u64],
) -> Result<Vec<AblationPoint>> {
    ablate_with(dataset, runs, grid, |run, t0| {
        if t0 > run.record.config.total_iters {
            return Err(Error::EmptyAverage {
                t0,
                freq: run.record.config.sma.freq,
            });
        }
        Ok(Box::new(move |t| t >= t0))
    })
}

/// Re-average every run with each absorption period in `grid`, keeping the
/// run's own start iteration. Periods must be multiples of the checkpoint
/// stride (the evaluation interval), and the start iteration must lie on the
/// stored grid, otherwise the iterates to absorb were never saved.
pub fn ablate_freq(
    dataset: &DomainDataset,
    runs: &[LoadedRun],
    grid: &[u64],
) -> Result<Vec<AblationPoint>> {
    ablate_with(dataset, runs, grid, |run, freq| {
        let stride = run.record.config.eval_interval;
        let t0 = run.record.config.sma.t0;
        if freq == 0 || freq % stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "absorption period {freq} is not a positive multiple of the \
                 checkpoint stride {stride} of run '{}'",
                run.record.run_id
            )));
        }
        if t0 % stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "start iteration {t0} of run '{}' is off the checkpoint grid \
                 (stride {stride})",
                run.record.run_id
            )));
        }
        if t0 > run.record.config.total_iters {
            return Err(Error::EmptyAverage { t0, freq });
        }
        Ok(Box::new(move |t| t >= t0 && (t - t0) % freq == 0))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_rotated_domains;
    use crate::sma::SmaConfig;

    fn tiny_dataset() -> DomainDataset {
        gen_rotated_domains(21, 3, 30, 2, 0.3, 0.4).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            total_iters: 60,
            eval_interval: 20,
            sma: SmaConfig::new(20, 1).unwrap(),
            ..TrainConfig::default()
        }
    }

    fn tiny_mlp() -> MlpSpec {
        MlpSpec::new(2, vec![], 2, 0.0).unwrap()
    }

    fn opts() -> SweepOptions {
        SweepOptions {
            trials_per_domain: 1,
            base_seed: 5,
            threads: None,
        }
    }

    #[test]
    fn sweep_writes_layout_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let outcomes =
            run_sweep(&tiny_dataset(), &tiny_mlp(), &tiny_config(), &opts(), dir.path()).unwrap();
        assert_eq!(outcomes.len(), 3);
        for o in &outcomes {
            assert!(o.result.is_ok(), "{:?}", o.result);
        }
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines[0], SWEEP_SUMMARY_HEADER);
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert!(lines[1].starts_with("d0,0,online,"));
        assert!(lines[2].starts_with("d0,0,sma,"));
        assert!(lines.iter().skip(1).all(|l| l.ends_with(",ok")));
        let runs = load_sweep(dir.path()).unwrap();
        assert_eq!(runs.len(), 3);
        assert_eq!(runs[0].record.test_domain, "d0");
        assert_eq!(runs[2].record.run_id, "d2-t0");
        assert!(runs[0].dir.join("online_00000060.ckpt").exists());
    }

    #[test]
    fn sweep_is_deterministic_across_repeats_and_threads() {
        let ds = tiny_dataset();
        let (a, b, c) = (
            tempfile::tempdir().unwrap(),
            tempfile::tempdir().unwrap(),
            tempfile::tempdir().unwrap(),
        );
        run_sweep(&ds, &tiny_mlp(), &tiny_config(), &opts(), a.path()).unwrap();
        run_sweep(&ds, &tiny_mlp(), &tiny_config(), &opts(), b.path()).unwrap();
        let threaded = SweepOptions {
            threads: Some(2),
            ..opts()
        };
        run_sweep(&ds, &tiny_mlp(), &tiny_config(), &threaded, c.path()).unwrap();
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("summary.csv")).unwrap();
        assert_eq!(read(&a), read(&b));
        assert_eq!(read(&a), read(&c));
        let ma = std::fs::read(a.path().join("d1/trial0/manifest.json")).unwrap();
        let mc = std::fs::read(c.path().join("d1/trial0/manifest.json")).unwrap();
        assert_eq!(ma, mc);
    }

    #[test]
    fn trials_use_distinct_hyperparameters() {
        let dir = tempfile::tempdir().unwrap();
        let many = SweepOptions {
            trials_per_domain: 2,
            ..opts()
        };
        run_sweep(&tiny_dataset(), &tiny_mlp(), &tiny_config(), &many, dir.path()).unwrap();
        let runs = load_sweep(dir.path()).unwrap();
        let wds: std::collections::HashSet<u64> = runs
            .iter()
            .map(|r| r.record.config.weight_decay.to_bits())
            .collect();
        assert_eq!(wds.len(), runs.len());
    }

    #[test]
    fn dense_reabsorption_reproduces_the_training_average() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        let config = TrainConfig {
            total_iters: 30,
            eval_interval: 1,
            sma: SmaConfig::new(5, 1).unwrap(),
            ..TrainConfig::default()
        };
        run_sweep(&ds, &tiny_mlp(), &config, &opts(), dir.path()).unwrap();
        let runs = load_sweep(dir.path()).unwrap();
        let one = &runs[..1];
        let got = ablate_freq(&ds, one, &[1]).unwrap();
        assert_eq!(got[0].mean_test_acc, one[0].record.selected_sma.test_acc);
        let via_t0 = ablate_t0(&ds, one, &[5]).unwrap();
        assert_eq!(via_t0[0].mean_test_acc, got[0].mean_test_acc);
    }

    #[test]
    fn freq_off_the_checkpoint_grid_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        run_sweep(&ds, &tiny_mlp(), &tiny_config(), &opts(), dir.path()).unwrap();
        let runs = load_sweep(dir.path()).unwrap();
        assert!(matches!(
            ablate_freq(&ds, &runs, &[30]),
            Err(Error::InvalidConfig(_))
        ));
        assert!(ablate_freq(&ds, &runs, &[20, 40]).is_ok());
    }

    #[test]
    fn start_iteration_past_the_run_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        run_sweep(&ds, &tiny_mlp(), &tiny_config(), &opts(), dir.path()).unwrap();
        let runs = load_sweep(dir.path()).unwrap();
        assert!(matches!(
            ablate_t0(&ds, &runs, &[100]),
            Err(Error::EmptyAverage { .. })
        ));
        let points = ablate_t0(&ds, &runs, &[0, 20, 0]).unwrap();
        // Duplicate grid entries collapse.
        assert_eq!(points.len(), 2);
        assert!(points.iter().all(|p| (0.0..=1.0).contains(&p.mean_test_acc)));
    }
}
