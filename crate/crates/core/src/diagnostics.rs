//! Reliability diagnostics: does validation accuracy rank checkpoints the
//! way held-out accuracy would, and why does averaging help?
//!
//! Three families live here:
//!
//! * Spearman rank correlation between validation and held-out accuracy,
//!   either along one run's curve or across runs at a fixed iteration.
//! * A decomposition of the members' mean cross-entropy into the centroid's
//!   cross-entropy ("bias") plus the mean divergence of members from the
//!   centroid ("variance"). With the normalized geometric-mean centroid the
//!   two sides agree exactly, per sample.
//! * Curvature and stability probes: a finite-difference estimate of the
//!   quadratic term that separates the averaged model's logit from the mean
//!   of its members' logits, and the standard deviation of a curve's tail.

use crate::checkpoint::CheckpointKind;
use crate::ensemble::mean_and_std_err;
use crate::error::{Error, Result};
use crate::model::MlpSpec;
use crate::param::ParamVector;
use crate::record::RunRecord;

/// Spearman rank correlation with average ranks for ties. Errors on length
/// mismatch, fewer than two pairs, or a constant side (where the correlation
/// is undefined).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "need at least 2 paired values, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank correlation input".into()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("inputs checked finite"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // 1-based ranks; a tied block shares the mean of its positions.
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = shared;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::DegenerateInput(
            "correlation of a constant sequence is undefined".into(),
        ));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation between one run's validation and held-out curves, for
/// both parameter views. `None` marks a curve where the correlation is
/// undefined (constant accuracy).
#[derive(Debug, Clone, PartialEq)]
pub struct RunRankCorr {
    pub run_id: String,
    pub test_domain: String,
    pub online_rho: Option<f64>,
    pub sma_rho: Option<f64>,
}

/// Aggregate over the runs of one held-out domain and one view.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRankCorr {
    pub group: String,
    pub kind: CheckpointKind,
    pub mean_rho: Option<f64>,
    pub std_err: Option<f64>,
    pub included: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankCorrReport {
    pub per_run: Vec<RunRankCorr>,
    pub groups: Vec<GroupRankCorr>,
}

fn rho_or_excluded(vals: &[f64], tests: &[f64]) -> Result<Option<f64>> {
    match spearman(vals, tests) {
        Ok(r) => Ok(Some(r)),
        Err(Error::DegenerateInput(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn domain_groups<'a>(runs: &'a [&RunRecord]) -> Vec<(&'a str, Vec<&'a RunRecord>)> {
    let mut groups: Vec<(&str, Vec<&RunRecord>)> = Vec::new();
    for run in runs {
        match groups.iter_mut().find(|(g, _)| *g == run.test_domain) {
            Some((_, members)) => members.push(run),
            None => groups.push((run.test_domain.as_str(), vec![run])),
        }
    }
    groups
}

/// How well validation accuracy tracks held-out accuracy along each run's
/// own evaluation curve, aggregated per held-out domain.
pub fn within_run_rankcorr(runs: &[&RunRecord]) -> Result<RankCorrReport> {
    if runs.is_empty() {
        return Err(Error::Empty("run list".into()));
    }
    let mut per_run = Vec::with_capacity(runs.len());
    for run in runs {
        let rho = |curve: &[crate::record::CurvePoint]| {
            let vals: Vec<f64> = curve.iter().map(|p| p.val_acc).collect();
            let tests: Vec<f64> = curve.iter().map(|p| p.test_acc).collect();
            rho_or_excluded(&vals, &tests)
        };
        per_run.push(RunRankCorr {
            run_id: run.run_id.clone(),
            test_domain: run.test_domain.clone(),
            online_rho: rho(&run.online_curve)?,
            sma_rho: rho(&run.sma_curve)?,
        });
    }
    let mut groups = Vec::new();
    for (group, members) in domain_groups(runs) {
        for kind in [CheckpointKind::Online, CheckpointKind::Sma] {
            let rhos: Vec<f64> = per_run
                .iter()
                .filter(|r| r.test_domain == group)
                .filter_map(|r| match kind {
                    CheckpointKind::Online => r.online_rho,
                    CheckpointKind::Sma => r.sma_rho,
                })
                .collect();
            let (mean_rho, std_err) = if rhos.is_empty() {
                (None, None)
            } else {
                let (m, se) = mean_and_std_err(&rhos);
                (Some(m), Some(se))
            };
            groups.push(GroupRankCorr {
                group: group.to_string(),
                kind,
                mean_rho,
                std_err,
                included: rhos.len(),
                excluded: members.len() - rhos.len(),
            });
        }
    }
    Ok(RankCorrReport { per_run, groups })
}

/// Rank correlation across a domain's runs at each shared iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossRunSeries {
    pub group: String,
    pub kind: CheckpointKind,
    pub points: Vec<(u64, f64)>,
    /// Iterations where the correlation was undefined (fewer than two runs
    /// or constant accuracies).
    pub skipped: usize,
}

/// At each evaluation iteration, does ranking a domain's trials by
/// validation accuracy match ranking them by held-out accuracy? Runs of a
/// domain must share their evaluation grid.
pub fn cross_run_rankcorr(runs: &[&RunRecord]) -> Result<Vec<CrossRunSeries>> {
    if runs.is_empty() {
        return Err(Error::Empty("run list".into()));
    }
    let mut series = Vec::new();
    for (group, members) in domain_groups(runs) {
        let grid: Vec<u64> = members[0].online_curve.iter().map(|p| p.iteration).collect();
        for run in &members {
            let theirs: Vec<u64> = run.online_curve.iter().map(|p| p.iteration).collect();
            if theirs != grid {
                return Err(Error::GridMismatch(format!(
                    "runs '{}' and '{}' were evaluated on different iteration grids",
                    members[0].run_id, run.run_id
                )));
            }
        }
        for kind in [CheckpointKind::Online, CheckpointKind::Sma] {
            fn curve_of(run: &RunRecord, kind: CheckpointKind) -> &[crate::record::CurvePoint] {
                match kind {
                    CheckpointKind::Online => &run.online_curve,
                    CheckpointKind::Sma => &run.sma_curve,
                }
            }
            let mut points = Vec::with_capacity(grid.len());
            let mut skipped = 0;
            for (i, &iteration) in grid.iter().enumerate() {
                let vals: Vec<f64> =
                    members.iter().map(|r| curve_of(r, kind)[i].val_acc).collect();
                let tests: Vec<f64> =
                    members.iter().map(|r| curve_of(r, kind)[i].test_acc).collect();
                match rho_or_excluded(&vals, &tests)? {
                    Some(rho) => points.push((iteration, rho)),
                    None => skipped += 1,
                }
            }
            series.push(CrossRunSeries {
                group: group.to_string(),
                kind,
                points,
                skipped,
            });
        }
    }
    Ok(series)
}

/// Which centroid the decomposition is taken around.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidKind {
    /// Normalized geometric mean of the member distributions. Bias plus
    /// variance reproduces the members' mean cross-entropy exactly.
    Geometric,
    /// Arithmetic mean of the member distributions.
    Arithmetic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasVariance {
    /// Mean cross-entropy of the centroid distribution.
    pub bias: f64,
    /// Mean KL divergence from the centroid to the members.
    pub variance: f64,
    /// Mean cross-entropy over (member, sample) pairs.
    pub mean_ce: f64,
}

/// Probabilities below this are clamped before logs are taken.
const PROB_FLOOR: f64 = 1e-12;

/// Decompose the members' mean cross-entropy. `member_probs[i][j]` is
/// member `i`'s predicted distribution for sample `j`; `labels[j]` is that
/// sample's class.
pub fn bias_variance(
    member_probs: &[Vec<Vec<f64>>],
    labels: &[usize],
    centroid: CentroidKind,
) -> Result<BiasVariance> {
    let members = member_probs.len();
    if members == 0 {
        return Err(Error::Empty("member probability sets".into()));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Empty("label list".into()));
    }
    let classes = member_probs[0]
        .first()
        .map(|d| d.len())
        .unwrap_or(0);
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    for probs in member_probs {
        if probs.len() != n {
            return Err(Error::Shape {
                expected: n,
                actual: probs.len(),
            });
        }
        for dist in probs {
            if dist.len() != classes {
                return Err(Error::Shape {
                    expected: classes,
                    actual: dist.len(),
                });
            }
            if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Invalid("negative or non-finite probability".into()));
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!(
                    "probability distribution sums to {sum}, not 1"
                )));
            }
        }
    }
    for &y in labels {
        if y >= classes {
            return Err(Error::LabelRange {
                label: y,
                num_classes: classes,
            });
        }
    }

    let (mut bias, mut variance, mut mean_ce) = (0.0, 0.0, 0.0);
    let mut dists = vec![vec![0.0; classes]; members];
    for (j, &y) in labels.iter().enumerate() {
        for (i, probs) in member_probs.iter().enumerate() {
            let mut sum = 0.0;
            for (q, p) in dists[i].iter_mut().zip(&probs[j]) {
                *q = p.max(PROB_FLOOR);
                sum += *q;
            }
            for q in dists[i].iter_mut() {
                *q /= sum;
            }
        }
        let mut g = vec![0.0; classes];
        match centroid {
            CentroidKind::Geometric => {
                for dist in &dists {
                    for (gk, p) in g.iter_mut().zip(dist) {
                        *gk += p.ln() / members as f64;
                    }
                }
                let lse = crate::model::log_sum_exp(&g);
                for gk in g.iter_mut() {
                    *gk = (*gk - lse).exp();
                }
            }
            CentroidKind::Arithmetic => {
                for dist in &dists {
                    for (gk, p) in g.iter_mut().zip(dist) {
                        *gk += p / members as f64;
                    }
                }
            }
        }
        bias -= g[y].ln() / n as f64;
        for dist in &dists {
            let kl: f64 = g
                .iter()
                .zip(dist)
                .map(|(gk, pk)| if *gk > 0.0 { gk * (gk.ln() - pk.ln()) } else { 0.0 })
                .sum();
            // KL is nonnegative by Gibbs' inequality; rounding can produce a
            // tiny negative value when centroid and member nearly coincide.
            variance += kl.max(0.0) / (members * n) as f64;
            mean_ce -= dist[y].ln() / (members * n) as f64;
        }
    }
    let result = BiasVariance {
        bias,
        variance,
        mean_ce,
    };
    if centroid == CentroidKind::Geometric {
        debug_assert!(
            (result.bias + result.variance - result.mean_ce).abs() < 1e-10,
            "decomposition identity violated: {result:?}"
        );
    }
    Ok(result)
}

/// Central second difference of `f` along `direction`, an estimate of the
/// quadratic form of the Hessian at `at`.
pub(crate) fn directional_second_difference(
    f: &impl Fn(&ParamVector) -> Result<f64>,
    at: &ParamVector,
    direction: &ParamVector,
    eps: f64,
) -> Result<f64> {
    let mut plus = at.clone();
    plus.axpy(eps, direction)?;
    let mut minus = at.clone();
    minus.axpy(-eps, direction)?;
    let dd = (f(&plus)? - 2.0 * f(at)? + f(&minus)?) / (eps * eps);
    if !dd.is_finite() {
        return Err(Error::FdStep { eps });
    }
    Ok(dd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondOrder {
    /// The averaged model's logit for the requested class.
    pub sma_logit: f64,
    /// Half the mean quadratic form over the displacement directions.
    pub term: f64,
}

/// Estimate the quadratic term separating the averaged model's logit from
/// the mean of its members' logits: half the mean of d'Hd over the
/// displacements d = average - iterate, via central differences on the class
/// logit. The step is rescaled per direction so large displacements do not
/// blow up the stencil.
pub fn second_order_term(
    spec: &MlpSpec,
    average: &ParamVector,
    iterates: &[ParamVector],
    x: &[f64],
    class: usize,
    base_eps: f64,
) -> Result<SecondOrder> {
    if iterates.is_empty() {
        return Err(Error::Empty("iterate list".into()));
    }
    if class >= spec.num_classes {
        return Err(Error::LabelRange {
            label: class,
            num_classes: spec.num_classes,
        });
    }
    if !(base_eps > 0.0 && base_eps.is_finite()) {
        return Err(Error::FdStep { eps: base_eps });
    }
    let f = |p: &ParamVector| -> Result<f64> {
        Ok(spec.logits(p, x, crate::model::ForwardMode::Eval)?[class])
    };
    let sma_logit = f(average)?;
    let avg_norm = average.l2_norm();
    let mut sum = 0.0;
    for theta in iterates {
        let d = average.sub(theta)?;
        let d_norm = d.l2_norm();
        if d_norm == 0.0 {
            continue;
        }
        let eps = base_eps * (1.0 + avg_norm) / (1.0 + d_norm);
        sum += directional_second_difference(&f, average, &d, eps)?;
    }
    Ok(SecondOrder {
        sma_logit,
        term: 0.5 * sum / iterates.len() as f64,
    })
}

/// Sample standard deviation of the last `ceil(tail_fraction * n)` values.
/// The tail must hold at least two values.
pub fn tail_std(values: &[f64], tail_fraction: f64) -> Result<f64> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tail_fraction must be in (0, 1], got {tail_fraction}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tail input".into()));
    }
    let count = (tail_fraction * values.len() as f64).ceil() as usize;
    if count < 2 {
        return Err(Error::DegenerateInput(format!(
            "tail of {count} value(s) from {} has no spread to measure",
            values.len()
        )));
    }
    let tail = &values[values.len() - count..];
    let mean = tail.iter().sum::<f64>() / count as f64;
    let var = tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count as f64 - 1.0);
    Ok(var.sqrt())
}
