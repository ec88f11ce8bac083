//! Per-run artifacts: evaluation curves, the selection outcome, and the
//! manifest that ties a run directory together.
//!
//! A run directory holds `manifest.json` (a [`RunRecord`]), two curve CSVs,
//! and the periodic checkpoints. The manifest carries everything needed to
//! re-evaluate or extend a run offline: seeds, the effective architecture and
//! training configuration, the fitted standardizer, and both evaluation
//! curves on a shared iteration grid.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{atomic_write, CheckpointKind};
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::model::MlpSpec;
use crate::trainer::TrainConfig;

pub const CURVE_CSV_HEADER: &str = "iteration,train_loss,val_acc,test_acc";

/// One evaluation of a model view: loss averaged over the training steps
/// since the previous evaluation, plus validation and held-out accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// The checkpoint picked by validation accuracy (earliest iteration wins
/// ties), with the metrics it was picked on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub iteration: u64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub test_domain: String,
    pub seed: u64,
    pub split_seed: u64,
    pub mlp: MlpSpec,
    pub config: TrainConfig,
    pub standardizer: Standardizer,
    pub online_curve: Vec<CurvePoint>,
    pub sma_curve: Vec<CurvePoint>,
    pub selected_online: Selected,
    pub selected_sma: Selected,
}

/// Earliest point with the maximum validation accuracy.
pub fn select_best(curve: &[CurvePoint]) -> Result<Selected> {
    let best = curve
        .iter()
        .reduce(|a, b| if b.val_acc > a.val_acc { b } else { a })
        .ok_or_else(|| Error::Empty("evaluation curve".into()))?;
    Ok(Selected {
        iteration: best.iteration,
        val_acc: best.val_acc,
        test_acc: best.test_acc,
    })
}

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        if self.online_curve.is_empty() {
            return Err(Error::Empty(format!("curves of run '{}'", self.run_id)));
        }
        if self.online_curve.len() != self.sma_curve.len() {
            return Err(Error::GridMismatch(format!(
                "run '{}': online curve has {} points, sma curve {}",
                self.run_id,
                self.online_curve.len(),
                self.sma_curve.len()
            )));
        }
        let mut last: Option<u64> = None;
        for (o, s) in self.online_curve.iter().zip(&self.sma_curve) {
            if o.iteration != s.iteration {
                return Err(Error::GridMismatch(format!(
                    "run '{}': curves diverge at iterations {} vs {}",
                    self.run_id, o.iteration, s.iteration
                )));
            }
            if let Some(prev) = last {
                if o.iteration <= prev {
                    return Err(Error::Ordering {
                        t: o.iteration,
                        last: prev,
                    });
                }
            }
            last = Some(o.iteration);
            for p in [o, s] {
                if !p.train_loss.is_finite()
                    || !(0.0..=1.0).contains(&p.val_acc)
                    || !(0.0..=1.0).contains(&p.test_acc)
                {
                    return Err(Error::Invalid(format!(
                        "run '{}': bad metrics at iteration {}",
                        self.run_id, p.iteration
                    )));
                }
            }
        }
        for (curve, sel, kind) in [
            (&self.online_curve, &self.selected_online, "online"),
            (&self.sma_curve, &self.selected_sma, "sma"),
        ] {
            let expect = select_best(curve)?;
            if *sel != expect {
                return Err(Error::Invalid(format!(
                    "run '{}': recorded {kind} selection {sel:?} is not the \
                     best-validation point {expect:?}",
                    self.run_id
                )));
            }
        }
        self.mlp.validate()?;
        self.config.validate()?;
        Ok(())
    }
}

/// File name for the checkpoint written after a given step; zero-padded so a
/// lexicographic listing is chronological.
pub fn checkpoint_filename(kind: CheckpointKind, iteration: u64) -> String {
    format!("{}_{iteration:08}.ckpt", kind.as_str())
}

pub fn save_manifest(record: &RunRecord, path: &Path) -> Result<()> {
    record.validate()?;
    let mut bytes = serde_json::to_vec_pretty(record)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn load_manifest(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let record: RunRecord = serde_json::from_str(&text)?;
    record.validate()?;
    Ok(record)
}

/// Write a curve as CSV. Floats use the shortest representation that parses
/// back identically, so the bytes are a pure function of the values.
pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.iteration, p.train_loss, p.val_acc, p.test_acc
        ));
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CURVE_CSV_HEADER => {}
        Some((_, h)) => return Err(parse_err(1, format!("unexpected header '{h}'"))),
        None => return Err(parse_err(1, "empty file".into())),
    }
    let mut curve = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err(i + 1, format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| parse_err(i + 1, format!("bad number '{s}': {e}")))
        };
        curve.push(CurvePoint {
            iteration: f[0]
                .parse()
                .map_err(|e| parse_err(i + 1, format!("bad iteration '{}': {e}", f[0])))?,
            train_loss: num(f[1])?,
            val_acc: num(f[2])?,
            test_acc: num(f[3])?,
        });
    }
    Ok(curve)
}
