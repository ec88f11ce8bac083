//! Synthetic multi-domain datasets, deterministic splits, and CSV exchange.
//!
//! A dataset is a list of named domains over a shared feature space. The
//! generator places class centroids on a circle and rotates them per domain,
//! so later domains are genuinely shifted versions of earlier ones and
//! holding one out gives an out-of-distribution test set.
//!
//! CSV layout: header `domain,y,x0,x1,...,x{d-1}`, one sample per row.
//! Floats are written with the shortest representation that parses back to
//! the same value, so a write/load cycle is lossless.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::atomic_write;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub id: String,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domains: Vec<Domain>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl DomainDataset {
    pub fn new(domains: Vec<Domain>, num_classes: usize, input_dim: usize) -> Result<Self> {
        let ds = Self {
            domains,
            num_classes,
            input_dim,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 domains, got {}",
                self.domains.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for d in &self.domains {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate domain id '{}'", d.id)));
            }
            if d.samples.is_empty() {
                return Err(Error::Empty(format!("domain '{}'", d.id)));
            }
            for s in &d.samples {
                if s.x.len() != self.input_dim {
                    return Err(Error::Shape {
                        expected: self.input_dim,
                        actual: s.x.len(),
                    });
                }
                if s.x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("feature in domain '{}'", d.id)));
                }
                if s.y >= self.num_classes {
                    return Err(Error::LabelRange {
                        label: s.y,
                        num_classes: self.num_classes,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn domain_ids(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.id.as_str()).collect()
    }

    pub fn find_domain(&self, id: &str) -> Option<(usize, &Domain)> {
        self.domains
            .iter()
            .enumerate()
            .find(|(_, d)| d.id == id)
    }

    pub fn total_samples(&self) -> usize {
        self.domains.iter().map(|d| d.samples.len()).sum()
    }
}

/// How to carve a dataset into train/val/test.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// The named domain is the test set; each remaining domain contributes
    /// `val_fraction` of its (shuffled) samples to validation and the rest to
    /// training.
    LeaveOneOut {
        test_domain: String,
        val_fraction: f64,
        split_seed: u64,
    },
    /// Domains are pooled and shuffled; fractions must sum to one.
    Iid {
        train_fraction: f64,
        val_fraction: f64,
        test_fraction: f64,
        split_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Materialize a split. Deterministic in (`dataset`, `spec`).
pub fn split(dataset: &DomainDataset, spec: &SplitSpec) -> Result<DataSplits> {
    match spec {
        SplitSpec::LeaveOneOut {
            test_domain,
            val_fraction,
            split_seed,
        } => {
            if !(0.0..1.0).contains(val_fraction) || *val_fraction <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "val_fraction must be in (0, 1), got {val_fraction}"
                )));
            }
            let (test_idx, test) = dataset
                .find_domain(test_domain)
                .ok_or_else(|| Error::UnknownDomain(test_domain.clone()))?;
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (d_idx, domain) in dataset.domains.iter().enumerate() {
                if d_idx == test_idx {
                    continue;
                }
                let n = domain.samples.len();
                let n_val = (*val_fraction * n as f64).floor() as usize;
                if n_val == 0 || n_val == n {
                    return Err(Error::DegenerateInput(format!(
                        "domain '{}' with {n} samples leaves an empty split at \
                         val_fraction {val_fraction}",
                        domain.id
                    )));
                }
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = stream_rng(*split_seed, &[stream::SPLIT, d_idx as u64]);
                order.shuffle(&mut rng);
                for (k, &i) in order.iter().enumerate() {
                    if k < n_val {
                        val.push(domain.samples[i].clone());
                    } else {
                        train.push(domain.samples[i].clone());
                    }
                }
            }
            Ok(DataSplits {
                train,
                val,
                test: test.samples.clone(),
            })
        }
        SplitSpec::Iid {
            train_fraction,
            val_fraction,
            test_fraction,
            split_seed,
        } => {
            let sum = train_fraction + val_fraction + test_fraction;
            if (sum - 1.0).abs() > 1e-9
                || *train_fraction <= 0.0
                || *val_fraction <= 0.0
                || *test_fraction <= 0.0
            {
                return Err(Error::InvalidConfig(format!(
                    "split fractions must be positive and sum to 1, got \
                     {train_fraction}/{val_fraction}/{test_fraction}"
                )));
            }
            let mut pool: Vec<Sample> = dataset
                .domains
                .iter()
                .flat_map(|d| d.samples.iter().cloned())
                .collect();
            let n = pool.len();
            let mut rng = stream_rng(*split_seed, &[stream::SPLIT]);
            pool.shuffle(&mut rng);
            let n_val = (*val_fraction * n as f64).floor() as usize;
            let n_test = (*test_fraction * n as f64).floor() as usize;
            if n_val == 0 || n_test == 0 || n_val + n_test >= n {
                return Err(Error::DegenerateInput(format!(
                    "{n} samples leave an empty split at fractions \
                     {train_fraction}/{val_fraction}/{test_fraction}"
                )));
            }
            let test = pool.split_off(n - n_test);
            let train = pool.split_off(n_val);
            Ok(DataSplits {
                train,
                val: pool,
                test,
            })
        }
    }
}

/// Per-feature affine map fitted on training data: subtract the mean, divide
/// by the (population) standard deviation. Features with zero spread are left
/// centered but unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("standardizer fit set".into()));
        }
        let dim = samples[0].x.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(&s.x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(&s.x) {
                let d = x - m;
                *v += d * d / n;
            }
        }
        let std = var
            .iter()
            .map(|&v| {
                let s = v.sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn apply_to(&self, samples: &mut [Sample]) {
        for s in samples {
            self.transform(&mut s.x);
        }
    }
}

impl DataSplits {
    /// Fit a standardizer on the training set and apply it to all three
    /// splits, returning it for reuse at inference time.
    pub fn standardize(&mut self) -> Result<Standardizer> {
        let st = Standardizer::fit(&self.train)?;
        st.apply_to(&mut self.train);
        st.apply_to(&mut self.val);
        st.apply_to(&mut self.test);
        Ok(st)
    }
}

/// Two-dimensional dataset whose class centroids sit on a circle of radius 2
/// and rotate by `rotation_step` radians per domain. Labels cycle through the
/// classes so every domain is balanced up to one sample.
pub fn gen_rotated_domains(
    seed: u64,
    num_domains: usize,
    per_domain: usize,
    num_classes: usize,
    rotation_step: f64,
    noise_std: f64,
) -> Result<DomainDataset> {
    if num_domains < 2 {
        return Err(Error::InvalidConfig("need at least 2 domains".into()));
    }
    if per_domain == 0 {
        return Err(Error::Empty("per-domain sample count".into()));
    }
    if num_classes < 2 {
        return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
    }
    if !rotation_step.is_finite() || !noise_std.is_finite() || noise_std < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "rotation_step {rotation_step} / noise_std {noise_std} out of range"
        )));
    }
    const RADIUS: f64 = 2.0;
    let mut domains = Vec::with_capacity(num_domains);
    for d in 0..num_domains {
        let mut rng = stream_rng(seed, &[stream::GEN, d as u64]);
        let mut samples = Vec::with_capacity(per_domain);
        for i in 0..per_domain {
            let y = i % num_classes;
            let angle = std::f64::consts::TAU * y as f64 / num_classes as f64
                + d as f64 * rotation_step;
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            samples.push(Sample {
                x: vec![
                    RADIUS * angle.cos() + noise_std * nx,
                    RADIUS * angle.sin() + noise_std * ny,
                ],
                y,
            });
        }
        domains.push(Domain {
            id: format!("d{d}"),
            samples,
        });
    }
    DomainDataset::new(domains, num_classes, 2)
}

/// Write a dataset as CSV, atomically.
pub fn write_csv(dataset: &DomainDataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let mut out = String::from("domain,y");
    for j in 0..dataset.input_dim {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for d in &dataset.domains {
        for s in &d.samples {
            out.push_str(&d.id);
            out.push_str(&format!(",{}", s.y));
            for v in &s.x {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Load a dataset written by [`write_csv`] (or by hand in the same layout).
/// Domains keep first-appearance order. The class count is `declared_classes`
/// when given, otherwise one past the largest label seen.
pub fn load_csv(path: &Path, declared_classes: Option<usize>) -> Result<DomainDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "domain" || cols[1] != "y" {
        return Err(parse_err(1, format!("unexpected header '{header}'")));
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("x{j}") {
            return Err(parse_err(1, format!("expected column x{j}, found '{c}'")));
        }
    }
    let input_dim = cols.len() - 2;
    let mut order: Vec<String> = Vec::new();
    let mut by_domain: std::collections::HashMap<String, Vec<Sample>> =
        std::collections::HashMap::new();
    let mut max_label = 0usize;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(
                lineno,
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let y: usize = fields[1]
            .parse()
            .map_err(|e| parse_err(lineno, format!("bad label '{}': {e}", fields[1])))?;
        max_label = max_label.max(y);
        let mut x = Vec::with_capacity(input_dim);
        for f in &fields[2..] {
            let v: f64 = f
                .parse()
                .map_err(|e| parse_err(lineno, format!("bad feature '{f}': {e}")))?;
            x.push(v);
        }
        let id = fields[0].to_string();
        if !by_domain.contains_key(&id) {
            order.push(id.clone());
        }
        by_domain.entry(id).or_default().push(Sample { x, y });
    }
    let num_classes = declared_classes.unwrap_or(max_label + 1);
    let domains = order
        .into_iter()
        .map(|id| {
            let samples = by_domain.remove(&id).expect("collected above");
            Domain { id, samples }
        })
        .collect();
    DomainDataset::new(domains, num_classes, input_dim)
}

/// Seed for the data split of run `trial` on held-out domain index
/// `domain_idx`, derived from the experiment base seed.
pub fn split_seed_for(base_seed: u64, domain_idx: usize, trial: usize) -> u64 {
    derive_seed(base_seed, &[stream::SPLIT, domain_idx as u64, trial as u64])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> DomainDataset {
        gen_rotated_domains(1, 3, 20, 2, 0.4, 0.1).unwrap()
    }

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let a = toy_dataset();
        let b = toy_dataset();
        assert_eq!(a, b);
        assert_eq!(a.domain_ids(), ["d0", "d1", "d2"]);
        for d in &a.domains {
            let ones = d.samples.iter().filter(|s| s.y == 1).count();
            assert_eq!(ones, 10);
        }
        assert_ne!(a, gen_rotated_domains(2, 3, 20, 2, 0.4, 0.1).unwrap());
    }

    #[test]
    fn rotation_moves_class_centroids() {
        // Noise-free: domain 1 of a 4-class circle rotated by pi/2 puts
        // class 0 at radius 2 on the y axis.
        let ds = gen_rotated_domains(0, 2, 8, 4, std::f64::consts::FRAC_PI_2, 0.0).unwrap();
        let s = &ds.domains[1].samples[0];
        assert_eq!(s.y, 0);
        assert!(s.x[0].abs() < 1e-12);
        assert!((s.x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn leave_one_out_holds_out_the_whole_domain() {
        let ds = toy_dataset();
        let spec = SplitSpec::LeaveOneOut {
            test_domain: "d1".into(),
            val_fraction: 0.2,
            split_seed: 5,
        };
        let s = split(&ds, &spec).unwrap();
        assert_eq!(s.test, ds.domains[1].samples);
        // 2 training domains, 20 samples each, 20% to validation.
        assert_eq!(s.val.len(), 8);
        assert_eq!(s.train.len(), 32);
        // Same seed reproduces the split; different seed reshuffles it.
        assert_eq!(split(&ds, &spec).unwrap(), s);
        let other = SplitSpec::LeaveOneOut {
            test_domain: "d1".into(),
            val_fraction: 0.2,
            split_seed: 6,
        };
        assert_ne!(split(&ds, &other).unwrap().train, s.train);
    }

    #[test]
    fn loo_partitions_without_overlap() {
        let ds = toy_dataset();
        let spec = SplitSpec::LeaveOneOut {
            test_domain: "d0".into(),
            val_fraction: 0.2,
            split_seed: 9,
        };
        let s = split(&ds, &spec).unwrap();
        let mut all: Vec<&Sample> = s.train.iter().chain(&s.val).collect();
        let src: Vec<&Sample> = ds.domains[1]
            .samples
            .iter()
            .chain(&ds.domains[2].samples)
            .collect();
        assert_eq!(all.len(), src.len());
        for s in src {
            let pos = all.iter().position(|t| *t == s).expect("sample present once");
            all.swap_remove(pos);
        }
        assert!(all.is_empty());
    }

    #[test]
    fn unknown_test_domain_is_an_error() {
        let ds = toy_dataset();
        let spec = SplitSpec::LeaveOneOut {
            test_domain: "nope".into(),
            val_fraction: 0.2,
            split_seed: 0,
        };
        assert!(matches!(split(&ds, &spec), Err(Error::UnknownDomain(_))));
    }

    #[test]
    fn iid_split_uses_floor_counts() {
        let ds = gen_rotated_domains(3, 5, 200, 4, 0.2, 0.3).unwrap();
        let spec = SplitSpec::Iid {
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            split_seed: 2,
        };
        let s = split(&ds, &spec).unwrap();
        assert_eq!(s.train.len(), 800);
        assert_eq!(s.val.len(), 100);
        assert_eq!(s.test.len(), 100);
    }

    #[test]
    fn standardizer_centers_and_scales_train() {
        let ds = toy_dataset();
        let spec = SplitSpec::LeaveOneOut {
            test_domain: "d2".into(),
            val_fraction: 0.2,
            split_seed: 1,
        };
        let mut s = split(&ds, &spec).unwrap();
        let st = s.standardize().unwrap();
        let n = s.train.len() as f64;
        for j in 0..2 {
            let mean: f64 = s.train.iter().map(|s| s.x[j]).sum::<f64>() / n;
            let var: f64 = s.train.iter().map(|s| s.x[j] * s.x[j]).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
        // The returned map reproduces the transformation.
        let mut x = ds.domains[2].samples[0].x.clone();
        st.transform(&mut x);
        assert_eq!(x, s.test[0].x);
    }

    #[test]
    fn constant_feature_standardizes_without_nan() {
        let samples = vec![
            Sample { x: vec![3.0, 1.0], y: 0 },
            Sample { x: vec![3.0, 2.0], y: 1 },
        ];
        let st = Standardizer::fit(&samples).unwrap();
        assert_eq!(st.std[0], 1.0);
        let mut x = vec![3.0, 1.5];
        st.transform(&mut x);
        assert_eq!(x[0], 0.0);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn csv_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = toy_dataset();
        write_csv(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("domain,y,x0,x1\n"));
        let back = load_csv(&path, Some(ds.num_classes)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn inferred_class_count_is_max_label_plus_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_csv(&gen_rotated_domains(7, 2, 9, 3, 0.1, 0.2).unwrap(), &path).unwrap();
        let back = load_csv(&path, None).unwrap();
        assert_eq!(back.num_classes, 3);
    }

    #[test]
    fn malformed_row_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "domain,y,x0\nd0,0,1.5\nd1,zero,2.0\n").unwrap();
        match load_csv(&path, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
