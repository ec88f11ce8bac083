//! Implementations behind the `tailavg` subcommands.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use tailavg_core::checkpoint::CheckpointKind;
use tailavg_core::data::{write_csv, Domain, DomainDataset};
use tailavg_core::diagnostics::{
    bias_variance, cross_run_rankcorr, second_order_term, tail_std, within_run_rankcorr,
    CentroidKind,
};
use tailavg_core::ensemble::{ensemble_size_curve, Ensemble, EnsembleKind};
use tailavg_core::model::{argmax, softmax, ForwardMode, MlpSpec};
use tailavg_core::param::ParamVector;
use tailavg_core::record::{load_manifest, RunRecord};
use tailavg_core::sweep::{
    self, ablate_freq, ablate_t0, load_online_series, load_sweep, resplit_run, LoadedRun,
    SweepOptions,
};

use crate::config::{DatasetSource, ExperimentConfig, EXPERIMENT_FILE};
use crate::{
    AblateArgs, DiagSweepArgs, EnsembleArgs, GenDataArgs, StabilityArgs, SweepArgs, TaylorArgs,
    UsageError,
};

/// Worker-count override honored ahead of `--threads`.
pub const THREADS_ENV: &str = "TAILAVG_THREADS";

pub fn gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let source = DatasetSource::Generated {
        seed: args.seed,
        domains: args.domains,
        per_domain: args.per_domain,
        classes: args.classes,
        rotation_step: args.rotation_step,
        noise_std: args.noise_std,
    };
    let dataset = source.materialize()?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    write_csv(&dataset, &args.out)?;
    println!(
        "wrote {}: {} domains x {} samples, {} classes",
        args.out.display(),
        dataset.domains.len(),
        args.per_domain,
        dataset.num_classes
    );
    Ok(())
}

pub fn run_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let config = effective_config(args)?;
    let threads = resolve_threads(args.threads)?;
    let dataset = config.dataset.materialize()?;
    let mlp = MlpSpec::new(
        dataset.input_dim,
        config.hidden_dims.clone(),
        dataset.num_classes,
        0.0,
    )?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    config.save(&args.out.join(EXPERIMENT_FILE))?;

    let opts = SweepOptions {
        trials_per_domain: config.trials_per_domain,
        base_seed: config.base_seed,
        threads,
    };
    let outcomes = sweep::run_sweep(&dataset, &mlp, &config.train, &opts, &args.out)?;

    let mut failed = 0;
    for outcome in &outcomes {
        match &outcome.result {
            Ok(record) => println!(
                "{} trial {}: online iter {} test {:.4} | sma iter {} test {:.4}",
                outcome.test_domain,
                outcome.trial,
                record.selected_online.iteration,
                record.selected_online.test_acc,
                record.selected_sma.iteration,
                record.selected_sma.test_acc
            ),
            Err(e) => {
                failed += 1;
                eprintln!("{} trial {}: failed: {e}", outcome.test_domain, outcome.trial);
            }
        }
    }
    println!(
        "wrote {} ({} trials, {} failed)",
        args.out.join("summary.csv").display(),
        outcomes.len(),
        failed
    );
    if failed > 0 {
        bail!("{failed} of {} trials failed", outcomes.len());
    }
    Ok(())
}

/// Merge precedence: built-in defaults, then `--config`, then explicit flags.
fn effective_config(args: &SweepArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    match (&args.data, args.classes) {
        (Some(data), classes) => {
            let path = fs::canonicalize(data).map_err(|e| {
                UsageError::new(format!("dataset {} not readable: {e}", data.display()))
            })?;
            config.dataset = DatasetSource::Csv { path, classes };
        }
        (None, Some(_)) => {
            return Err(UsageError::new("--classes requires --data").into());
        }
        (None, None) => {}
    }
    if let Some(trials) = args.trials {
        config.trials_per_domain = trials;
    }
    if let Some(seed) = args.seed {
        config.base_seed = seed;
    }
    if let Some(hidden) = &args.hidden {
        config.hidden_dims = parse_hidden(hidden)?;
    }
    if let Some(optimizer) = args.optimizer {
        config.train.optimizer = optimizer.to_core();
    }
    if let Some(lr) = args.lr {
        config.train.learning_rate = lr;
    }
    if let Some(batch) = args.batch_size {
        config.train.batch_size = batch;
    }
    if let Some(total) = args.total_iters {
        config.train.total_iters = total;
    }
    if let Some(eval) = args.eval_interval {
        config.train.eval_interval = eval;
    }
    if let Some(t0) = args.t0 {
        config.train.sma.t0 = t0;
    }
    if let Some(freq) = args.freq {
        config.train.sma.freq = freq;
    }
    config
        .train
        .validate()
        .map_err(|e| UsageError::new(format!("invalid training setup: {e}")))?;
    if config.trials_per_domain == 0 {
        return Err(UsageError::new("--trials must be >= 1").into());
    }
    Ok(config)
}

/// Hidden widths from a comma list; empty or `none` means a linear model.
fn parse_hidden(text: &str) -> anyhow::Result<Vec<usize>> {
    let text = text.trim();
    if text.is_empty() || text == "none" {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| UsageError::new(format!("bad hidden width '{part}'")).into())
        })
        .collect()
}

fn resolve_threads(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let value = value.trim();
        if !value.is_empty() {
            let n: usize = value.parse().map_err(|_| {
                UsageError::new(format!("{THREADS_ENV} must be a positive integer, got '{value}'"))
            })?;
            if n == 0 {
                return Err(
                    UsageError::new(format!("{THREADS_ENV} must be a positive integer")).into(),
                );
            }
            return Ok(Some(n));
        }
    }
    if flag == Some(0) {
        return Err(UsageError::new("--threads must be >= 1").into());
    }
    Ok(flag)
}

/// Reads back a sweep directory: its experiment config, the dataset it was
/// trained on, and every completed run.
fn open_sweep(dir: &Path) -> anyhow::Result<(ExperimentConfig, DomainDataset, Vec<LoadedRun>)> {
    let config = ExperimentConfig::load_from_sweep(dir)?;
    let dataset = config.dataset.materialize()?;
    let runs = load_sweep(dir).with_context(|| format!("cannot read sweep {}", dir.display()))?;
    Ok((config, dataset, runs))
}

fn trial_index(run: &LoadedRun) -> anyhow::Result<usize> {
    let name = run
        .dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    name.strip_prefix("trial")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| anyhow!("run directory {} is not named trial<k>", run.dir.display()))
}

fn write_rows(path: &Path, header: &str, rows: &[String]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    let mut text = String::with_capacity(header.len() + rows.len() * 32);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run_ablate_t0(args: &AblateArgs) -> anyhow::Result<()> {
    let (_, dataset, runs) = open_sweep(&args.sweep)?;
    let points = ablate_t0(&dataset, &runs, &args.grid)?;
    let rows: Vec<String> = points
        .iter()
        .map(|p| format!("{},{}", p.value, p.mean_test_acc))
        .collect();
    for p in &points {
        println!("t0 {:>8}: mean held-out acc {:.4}", p.value, p.mean_test_acc);
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.sweep.join("ablate_t0.csv"));
    write_rows(&out, "t0,mean_test_acc", &rows)
}

pub fn run_ablate_freq(args: &AblateArgs) -> anyhow::Result<()> {
    let (_, dataset, runs) = open_sweep(&args.sweep)?;
    let points = ablate_freq(&dataset, &runs, &args.grid)?;
    let rows: Vec<String> = points
        .iter()
        .map(|p| format!("{},{}", p.value, p.mean_test_acc))
        .collect();
    for p in &points {
        println!("freq {:>6}: mean held-out acc {:.4}", p.value, p.mean_test_acc);
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.sweep.join("ablate_freq.csv"));
    write_rows(&out, "freq,mean_test_acc", &rows)
}

/// The domains to process: the requested one, or every domain that has at
/// least one completed run, in dataset order.
fn target_domains<'a>(
    dataset: &'a DomainDataset,
    runs: &[LoadedRun],
    requested: Option<&'a str>,
) -> anyhow::Result<Vec<&'a Domain>> {
    if let Some(id) = requested {
        let (_, domain) = dataset
            .find_domain(id)
            .ok_or_else(|| UsageError::new(format!("unknown domain '{id}'")))?;
        return Ok(vec![domain]);
    }
    let covered: Vec<&Domain> = dataset
        .domains
        .iter()
        .filter(|d| runs.iter().any(|r| r.record.test_domain == d.id))
        .collect();
    if covered.is_empty() {
        bail!("no completed runs in the sweep");
    }
    Ok(covered)
}

fn domain_runs(runs: &[LoadedRun], domain: &str) -> Vec<LoadedRun> {
    runs.iter()
        .filter(|r| r.record.test_domain == domain)
        .cloned()
        .collect()
}

pub fn run_ensemble(args: &EnsembleArgs) -> anyhow::Result<()> {
    let (_, dataset, runs) = open_sweep(&args.sweep)?;
    let kind = args.kind.to_core();
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| args.sweep.join("ensemble"));
    for domain in target_domains(&dataset, &runs, args.domain.as_deref())? {
        let members = domain_runs(&runs, &domain.id);
        let ensemble = Ensemble::from_sweep(&members, kind)?;
        let samples = &domain.samples;

        let full_acc = ensemble.accuracy(samples)?;
        let mut member_accs = Vec::with_capacity(ensemble.len());
        for i in 0..ensemble.len() {
            member_accs.push(ensemble.subset_accuracy(&[i], samples)?);
        }
        let mean_member = member_accs.iter().sum::<f64>() / member_accs.len() as f64;
        println!(
            "{} ({}, {} members): ensemble acc {:.4}, mean member acc {:.4}",
            domain.id,
            args.kind.label(),
            ensemble.len(),
            full_acc,
            mean_member
        );

        let sizes: Vec<usize> = match &args.sizes {
            Some(sizes) => sizes.clone(),
            None => (1..=ensemble.len()).collect(),
        };
        let points = ensemble_size_curve(&ensemble, &sizes, args.subsets, args.seed, samples)?;

        let mut subset_rows = Vec::new();
        let mut size_rows = Vec::with_capacity(points.len());
        for point in &points {
            for (subset_id, acc) in point.subset_accs.iter().enumerate() {
                subset_rows.push(format!("{},{subset_id},{acc}", point.size));
            }
            size_rows.push(format!("{},{},{}", point.size, point.mean_acc, point.std_err));
        }
        let tag = format!("{}_{}", args.kind.label(), domain.id);
        write_rows(
            &out_dir.join(format!("{tag}_subsets.csv")),
            "size,subset_id,accuracy",
            &subset_rows,
        )?;
        write_rows(
            &out_dir.join(format!("{tag}_sizes.csv")),
            "size,mean_acc,std_err",
            &size_rows,
        )?;
    }
    Ok(())
}

fn records(runs: &[LoadedRun]) -> Vec<&RunRecord> {
    runs.iter().map(|r| &r.record).collect()
}

fn filter_runs(runs: Vec<LoadedRun>, domain: Option<&str>) -> anyhow::Result<Vec<LoadedRun>> {
    let Some(id) = domain else { return Ok(runs) };
    let filtered: Vec<LoadedRun> = runs
        .into_iter()
        .filter(|r| r.record.test_domain == id)
        .collect();
    if filtered.is_empty() {
        return Err(UsageError::new(format!("no completed runs for domain '{id}'")).into());
    }
    Ok(filtered)
}

fn rho_cell(rho: Option<f64>) -> String {
    match rho {
        Some(r) => r.to_string(),
        None => "NaN".to_string(),
    }
}

/// Console-friendly version of [`rho_cell`]; CSVs keep full precision.
fn rho_display(rho: Option<f64>) -> String {
    match rho {
        Some(r) => format!("{r:+.3}"),
        None => "undefined".to_string(),
    }
}

pub fn run_rankcorr(args: &DiagSweepArgs) -> anyhow::Result<()> {
    let (_, _, runs) = open_sweep(&args.sweep)?;
    let runs = filter_runs(runs, args.domain.as_deref())?;
    let report = within_run_rankcorr(&records(&runs))?;
    for run in &report.per_run {
        println!(
            "{}: online rho {}, sma rho {}",
            run.run_id,
            rho_display(run.online_rho),
            rho_display(run.sma_rho)
        );
    }
    let mut rows = Vec::with_capacity(report.groups.len());
    for group in &report.groups {
        println!(
            "{} {}: mean rho {} over {} runs ({} degenerate)",
            group.group,
            group.kind,
            rho_display(group.mean_rho),
            group.included,
            group.excluded
        );
        rows.push(format!(
            "{},{},{}",
            group.group,
            group.kind,
            rho_cell(group.mean_rho)
        ));
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.sweep.join("diag").join("rankcorr.csv"));
    write_rows(&out, "group,kind,rho", &rows)
}

pub fn run_crossrun(args: &DiagSweepArgs) -> anyhow::Result<()> {
    let (_, _, runs) = open_sweep(&args.sweep)?;
    let runs = filter_runs(runs, args.domain.as_deref())?;
    let series = cross_run_rankcorr(&records(&runs))?;
    let mut rows = Vec::new();
    for s in &series {
        println!(
            "{} {}: {} iterations correlated, {} skipped",
            s.group,
            s.kind,
            s.points.len(),
            s.skipped
        );
        for (iteration, rho) in &s.points {
            rows.push(format!("{},{},{iteration},{rho}", s.group, s.kind));
        }
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.sweep.join("diag").join("crossrun.csv"));
    write_rows(&out, "group,kind,iteration,rho", &rows)
}

pub fn run_biasvar(args: &DiagSweepArgs) -> anyhow::Result<()> {
    let (_, dataset, runs) = open_sweep(&args.sweep)?;
    for domain in target_domains(&dataset, &runs, args.domain.as_deref())? {
        let members = domain_runs(&runs, &domain.id);
        let ensemble = Ensemble::from_sweep(&members, EnsembleKind::Eoa)?;
        let labels: Vec<usize> = domain.samples.iter().map(|s| s.y).collect();
        let mut member_probs = Vec::with_capacity(ensemble.len());
        for i in 0..ensemble.len() {
            let mut probs = Vec::with_capacity(domain.samples.len());
            for sample in &domain.samples {
                probs.push(softmax(&ensemble.member_logits(i, &sample.x)?));
            }
            member_probs.push(probs);
        }
        let mut rows = Vec::with_capacity(2);
        for (name, centroid) in [
            ("geometric", CentroidKind::Geometric),
            ("arithmetic", CentroidKind::Arithmetic),
        ] {
            let bv = bias_variance(&member_probs, &labels, centroid)?;
            println!(
                "{} {name}: bias {:.4} + variance {:.4} vs mean CE {:.4}",
                domain.id, bv.bias, bv.variance, bv.mean_ce
            );
            rows.push(format!("{name},{},{},{}", bv.bias, bv.variance, bv.mean_ce));
        }
        let out = args
            .sweep
            .join("diag")
            .join(format!("biasvar_{}.csv", domain.id));
        write_rows(&out, "centroid,bias,variance,mean_ce", &rows)?;
    }
    Ok(())
}

pub fn run_taylor(args: &TaylorArgs) -> anyhow::Result<()> {
    let config = ExperimentConfig::load_from_sweep(&args.sweep)?;
    let dataset = config.dataset.materialize()?;
    let dir = args
        .sweep
        .join(&args.domain)
        .join(format!("trial{}", args.trial));
    let manifest = dir.join("manifest.json");
    if !manifest.is_file() {
        return Err(UsageError::new(format!("no run at {}", dir.display())).into());
    }
    let run = LoadedRun {
        record: load_manifest(&manifest)?,
        dir,
    };
    let splits = resplit_run(&run.record, &dataset)?;

    let t0 = run.record.config.sma.t0;
    let iterates: Vec<ParamVector> = load_online_series(&run)?
        .into_iter()
        .filter(|(t, _)| *t >= t0)
        .map(|(_, params)| params)
        .collect();
    if iterates.is_empty() {
        bail!(
            "run '{}' stores no iterates at or after its start iteration {t0}",
            run.record.run_id
        );
    }
    let average = ParamVector::mean_of(&iterates)?;

    let spec = &run.record.mlp;
    let count = args.samples.min(splits.test.len());
    let mut rows = Vec::with_capacity(count);
    for (j, sample) in splits.test[..count].iter().enumerate() {
        let class = match args.class {
            Some(c) => c,
            None => argmax(&spec.logits(&average, &sample.x, ForwardMode::Eval)?),
        };
        let so = second_order_term(spec, &average, &iterates, &sample.x, class, args.eps)?;
        rows.push(format!("{j},{class},{},{}", so.sma_logit, so.term));
    }
    println!(
        "run '{}': quadratic gap over {} held-out samples, {} iterates",
        run.record.run_id,
        count,
        iterates.len()
    );
    let out = args.out.clone().unwrap_or_else(|| {
        args.sweep
            .join("diag")
            .join(format!("taylor_{}_trial{}.csv", args.domain, args.trial))
    });
    write_rows(&out, "sample,class,sma_logit,second_order_term", &rows)
}

pub fn run_stability(args: &StabilityArgs) -> anyhow::Result<()> {
    let (_, _, runs) = open_sweep(&args.sweep)?;
    let mut rows = Vec::with_capacity(runs.len() * 2);
    for run in &runs {
        let trial = trial_index(run)?;
        for (kind, curve) in [
            (CheckpointKind::Online, &run.record.online_curve),
            (CheckpointKind::Sma, &run.record.sma_curve),
        ] {
            let accs: Vec<f64> = curve.iter().map(|p| p.test_acc).collect();
            let std = tail_std(&accs, args.tail).with_context(|| {
                format!("run '{}' ({kind})", run.record.run_id)
            })?;
            rows.push(format!("{},{trial},{kind},{std}", run.record.test_domain));
        }
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.sweep.join("diag").join("stability.csv"));
    write_rows(&out, "test_domain,trial,kind,tail_std", &rows)
}
