//! Inference over several independently trained models by averaging their
//! logits.
//!
//! The prediction is the argmax of the member-mean logits; because softmax
//! is monotone in each logit, this is the same class the softmax of the mean
//! would pick. Members built from averaged checkpoints give the
//! ensemble-of-averages; members built from online checkpoints give the
//! plain ensemble baseline it is compared against.
//!
//! Each member carries the feature standardizer of its own training run, so
//! an ensemble can be fed raw samples even when its members were trained on
//! differently normalized views of the data.

use rand::seq::index::sample as index_sample;

use crate::checkpoint::{load_checkpoint, Checkpoint, CheckpointKind};
use crate::data::{Sample, Standardizer};
use crate::error::{Error, Result};
use crate::model::{argmax, MlpSpec};
use crate::record::checkpoint_filename;
use crate::rng::{stream, stream_rng};
use crate::sweep::LoadedRun;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    /// Ensemble of averages: members are averaged (sma) checkpoints.
    Eoa,
    /// Baseline ensemble of online checkpoints.
    Plain,
}

impl EnsembleKind {
    pub fn member_kind(self) -> CheckpointKind {
        match self {
            EnsembleKind::Eoa => CheckpointKind::Sma,
            EnsembleKind::Plain => CheckpointKind::Online,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub checkpoint: Checkpoint,
    /// Applied to raw inputs before this member's forward pass.
    pub standardizer: Option<Standardizer>,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    mlp: MlpSpec,
    kind: EnsembleKind,
    members: Vec<EnsembleMember>,
}

impl Ensemble {
    pub fn new(mlp: MlpSpec, kind: EnsembleKind, members: Vec<EnsembleMember>) -> Result<Self> {
        mlp.validate()?;
        if members.is_empty() {
            return Err(Error::Empty("ensemble member list".into()));
        }
        for m in &members {
            if m.checkpoint.kind != kind.member_kind() {
                return Err(Error::Invalid(format!(
                    "member '{}' is a {} checkpoint, but this ensemble wants {}",
                    m.checkpoint.run_id,
                    m.checkpoint.kind,
                    kind.member_kind()
                )));
            }
            if m.checkpoint.params.len() != mlp.param_count() {
                return Err(Error::Shape {
                    expected: mlp.param_count(),
                    actual: m.checkpoint.params.len(),
                });
            }
        }
        Ok(Self { mlp, kind, members })
    }

    /// Build from completed sweep runs, loading each run's selected
    /// checkpoint of the matching kind. All runs must share an architecture.
    pub fn from_sweep(runs: &[LoadedRun], kind: EnsembleKind) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Empty("sweep run list".into()));
        }
        // Dropout differs per trial but is off at inference; strip it.
        let arch = runs[0].record.mlp.with_dropout(0.0)?;
        let mut members = Vec::with_capacity(runs.len());
        for run in runs {
            if run.record.mlp.with_dropout(0.0)? != arch {
                return Err(Error::Invalid(format!(
                    "run '{}' has a different architecture than '{}'",
                    run.record.run_id, runs[0].record.run_id
                )));
            }
            let sel = match kind {
                EnsembleKind::Eoa => run.record.selected_sma,
                EnsembleKind::Plain => run.record.selected_online,
            };
            let path = run
                .dir
                .join(checkpoint_filename(kind.member_kind(), sel.iteration));
            let mut checkpoint = load_checkpoint(&path)?;
            checkpoint.run_id = run.record.run_id.clone();
            members.push(EnsembleMember {
                checkpoint,
                standardizer: Some(run.record.standardizer.clone()),
            });
        }
        Self::new(arch, kind, members)
    }

    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    /// Logits of the member at `index` for a raw input, with that member's
    /// standardizer applied.
    pub fn member_logits(&self, index: usize, x: &[f64]) -> Result<Vec<f64>> {
        let member = self.members.get(index).ok_or(Error::Shape {
            expected: self.members.len(),
            actual: index,
        })?;
        self.logits_of(member, x)
    }

    fn logits_of(&self, member: &EnsembleMember, x: &[f64]) -> Result<Vec<f64>> {
        match &member.standardizer {
            Some(st) => {
                let mut x = x.to_vec();
                st.transform(&mut x);
                self.mlp
                    .logits(&member.checkpoint.params, &x, crate::model::ForwardMode::Eval)
            }
            None => self
                .mlp
                .logits(&member.checkpoint.params, x, crate::model::ForwardMode::Eval),
        }
    }

    fn mean_logits_of(&self, indices: &[usize], x: &[f64]) -> Result<Vec<f64>> {
        let mut sum = vec![0.0; self.mlp.num_classes];
        for &i in indices {
            let logits = self.logits_of(&self.members[i], x)?;
            for (s, z) in sum.iter_mut().zip(&logits) {
                *s += z;
            }
        }
        let scale = 1.0 / indices.len() as f64;
        for s in &mut sum {
            *s *= scale;
        }
        Ok(sum)
    }

    /// Member-mean logits for a raw input.
    pub fn mean_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.members.len()).collect();
        self.mean_logits_of(&all, x)
    }

    /// Predicted class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.mean_logits(x)?))
    }

    pub fn accuracy(&self, samples: &[Sample]) -> Result<f64> {
        let all: Vec<usize> = (0..self.members.len()).collect();
        self.subset_accuracy(&all, samples)
    }

    /// Accuracy when only the members at `indices` vote.
    pub fn subset_accuracy(&self, indices: &[usize], samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("ensemble evaluation set".into()));
        }
        let mut correct = 0usize;
        for s in samples {
            if argmax(&self.mean_logits_of(indices, &s.x)?) == s.y {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }
}

/// Accuracy of sub-ensembles of one size.
#[derive(Debug, Clone, PartialEq)]
pub struct SizePoint {
    pub size: usize,
    pub mean_acc: f64,
    /// Standard error over subsets; zero when only one subset was scored.
    pub std_err: f64,
    /// One entry per scored subset, in enumeration or draw order.
    pub subset_accs: Vec<f64>,
}

pub(crate) fn mean_and_std_err(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// min(C(n, k), cap), without overflowing on the way.
fn combinations_capped(n: usize, k: usize, cap: u128) -> u128 {
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
        if c > cap {
            return cap;
        }
    }
    c
}

fn lexicographic_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        // Advance the rightmost index that still has room.
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] < n - k + i {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Score sub-ensembles of each requested size on `samples`. When a size has
/// at most `max_subsets` distinct subsets they are all enumerated (in
/// lexicographic order); otherwise `max_subsets` random subsets are drawn,
/// deterministically in `seed`.
pub fn ensemble_size_curve(
    ensemble: &Ensemble,
    sizes: &[usize],
    max_subsets: usize,
    seed: u64,
    samples: &[Sample],
) -> Result<Vec<SizePoint>> {
    if max_subsets == 0 {
        return Err(Error::InvalidConfig("max_subsets must be >= 1".into()));
    }
    let e = ensemble.len();
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || size > e {
            return Err(Error::InvalidConfig(format!(
                "subset size {size} out of range for an ensemble of {e}"
            )));
        }
        let subsets: Vec<Vec<usize>> =
            if combinations_capped(e, size, max_subsets as u128 + 1) <= max_subsets as u128 {
                lexicographic_subsets(e, size)
            } else {
                let mut rng = stream_rng(seed, &[stream::SUBSET, size as u64]);
                (0..max_subsets)
                    .map(|_| {
                        let mut idx = index_sample(&mut rng, e, size).into_vec();
                        idx.sort_unstable();
                        idx
                    })
                    .collect()
            };
        let mut accs = Vec::with_capacity(subsets.len());
        for subset in &subsets {
            accs.push(ensemble.subset_accuracy(subset, samples)?);
        }
        let (mean_acc, std_err) = mean_and_std_err(&accs);
        points.push(SizePoint {
            size,
            mean_acc,
            std_err,
            subset_accs: accs,
        });
    }
    Ok(points)
}
