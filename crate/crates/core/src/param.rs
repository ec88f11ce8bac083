//! Flat parameter vectors.
//!
//! A [`ParamVector`] is the ordered list of all model parameters as 64-bit
//! reals. Construction rejects empty or non-finite input; in-place arithmetic
//! trusts the caller (divergence is caught by the trainer's loss check and
//! re-checked before any vector is persisted).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Build from raw values. Fails on an empty vector or any NaN/Inf entry.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("parameter vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter coordinate {i}")));
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &ParamVector) -> Result<()> {
        self.check_len(other)?;
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.values {
            *v *= c;
        }
    }

    /// `self = (1 - w) * self + w * other`; the running-mean update primitive.
    pub fn blend(&mut self, w: f64, other: &ParamVector) -> Result<()> {
        self.check_len(other)?;
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a = (1.0 - w) * *a + w * b;
        }
        Ok(())
    }

    /// `self - other` as a new vector.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other)?;
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector { values })
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other)?;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Arithmetic mean of the given vectors. All lengths must match.
    pub fn mean_of<'a, I>(vectors: I) -> Result<ParamVector>
    where
        I: IntoIterator<Item = &'a ParamVector>,
    {
        let mut it = vectors.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Empty("mean over zero vectors".into()))?;
        let mut acc = first.values.clone();
        let mut count = 1usize;
        for v in it {
            if v.len() != acc.len() {
                return Err(Error::Shape {
                    expected: acc.len(),
                    actual: v.len(),
                });
            }
            for (a, b) in acc.iter_mut().zip(v.values.iter()) {
                *a += b;
            }
            count += 1;
        }
        let inv = 1.0 / count as f64;
        for a in &mut acc {
            *a *= inv;
        }
        Ok(ParamVector { values: acc })
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Vec<f64> {
        p.values
    }
}
