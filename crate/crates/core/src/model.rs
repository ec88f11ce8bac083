//! Multi-layer perceptron with a flat parameter vector.
//!
//! The whole model lives in one [`ParamVector`] so averaging, checkpointing,
//! and directional perturbation work on plain vectors. Layout is layer by
//! layer: the weight matrix in row-major order (one row per output unit),
//! then the bias vector. Hidden activations are ReLU; the output layer is
//! linear and feeds a softmax cross-entropy loss.
//!
//! Dropout is the inverted kind, applied to hidden activations. The mask for
//! a given (seed, iteration, layer) is a pure function of those values and is
//! shared across a batch, which keeps a training step reproducible no matter
//! how the batch is chunked internally.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::rng::{stream, stream_rng};

/// Architecture plus dropout rate. `hidden_dims` may be empty, giving a
/// linear softmax classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

/// Whether a forward pass draws dropout masks. `Train` is deterministic in
/// (`seed`, `iteration`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    Train { seed: u64, iteration: u64 },
    Eval,
}

struct ForwardTrace {
    /// Input to each layer; `inputs[0]` is the sample itself.
    inputs: Vec<Vec<f64>>,
    /// d(post-activation)/d(pre-activation) for each hidden layer, with the
    /// dropout factor folded in.
    derivs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
        dropout_rate: f64,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            num_classes,
            dropout_rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden layer widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Same architecture with a different dropout rate.
    pub fn with_dropout(&self, dropout_rate: f64) -> Result<Self> {
        Self::new(
            self.input_dim,
            self.hidden_dims.clone(),
            self.num_classes,
            dropout_rate,
        )
    }

    /// (fan_in, fan_out) per layer, input to output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(fi, fo)| fi * fo + fo)
            .sum()
    }

    /// Glorot-uniform weights, zero biases, consumed from a single stream in
    /// layout order so the result is a pure function of (spec shape, seed).
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = stream_rng(seed, &[stream::INIT]);
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_dims() {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                // u in (0, 1) keeps the draw strictly inside (-a, a).
                let mut u = rng.gen::<f64>();
                while u == 0.0 {
                    u = rng.gen::<f64>();
                }
                values.push(a * (2.0 * u - 1.0));
            }
            values.extend(std::iter::repeat(0.0).take(fan_out));
        }
        ParamVector::new(values).expect("init draws are finite")
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(Error::Shape {
                expected,
                actual: params.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// One mask per hidden layer; `None` means identity. Masks are shared by
    /// every sample in the batch of a given iteration.
    fn dropout_masks(&self, mode: ForwardMode) -> Vec<Option<Vec<f64>>> {
        let layers = self.hidden_dims.len();
        match mode {
            ForwardMode::Eval => vec![None; layers],
            ForwardMode::Train { seed, iteration } => {
                if self.dropout_rate == 0.0 {
                    return vec![None; layers];
                }
                let keep = 1.0 - self.dropout_rate;
                self.hidden_dims
                    .iter()
                    .enumerate()
                    .map(|(l, &width)| {
                        let mut rng =
                            stream_rng(seed, &[stream::DROPOUT, iteration, l as u64]);
                        Some(
                            (0..width)
                                .map(|_| {
                                    if rng.gen::<f64>() < self.dropout_rate {
                                        0.0
                                    } else {
                                        1.0 / keep
                                    }
                                })
                                .collect(),
                        )
                    })
                    .collect()
            }
        }
    }

    fn forward_traced(
        &self,
        params: &[f64],
        x: &[f64],
        masks: &[Option<Vec<f64>>],
    ) -> ForwardTrace {
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        let mut inputs = Vec::with_capacity(dims.len());
        let mut derivs = Vec::with_capacity(last);
        let mut h = x.to_vec();
        let mut off = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            inputs.push(h.clone());
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let mut z = vec![0.0; fan_out];
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &w[r * fan_in..(r + 1) * fan_in];
                *zr = b[r] + row.iter().zip(&h).map(|(wi, hi)| wi * hi).sum::<f64>();
            }
            if l == last {
                return ForwardTrace {
                    inputs,
                    derivs,
                    logits: z,
                };
            }
            let mut deriv = vec![0.0; fan_out];
            for j in 0..fan_out {
                // ReLU subgradient at exactly zero is taken as zero.
                let mut d = if z[j] > 0.0 { 1.0 } else { 0.0 };
                let mut a = z[j].max(0.0);
                if let Some(mask) = &masks[l] {
                    d *= mask[j];
                    a *= mask[j];
                }
                deriv[j] = d;
                z[j] = a;
            }
            derivs.push(deriv);
            h = z;
        }
        unreachable!("loop returns at the output layer")
    }

    /// Logits for one input.
    pub fn logits(&self, params: &ParamVector, x: &[f64], mode: ForwardMode) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_input(x)?;
        let masks = self.dropout_masks(mode);
        Ok(self.forward_traced(params.as_slice(), x, &masks).logits)
    }

    /// Mean cross-entropy over `batch` plus `weight_decay / 2` times the
    /// squared norm of the weight matrices (biases are not decayed), and its
    /// exact gradient.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &[Sample],
        weight_decay: f64,
        mode: ForwardMode,
    ) -> Result<(f64, ParamVector)> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let masks = self.dropout_masks(mode);
        let dims = self.layer_dims();
        let p = params.as_slice();
        let mut grad = vec![0.0; p.len()];
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for sample in batch {
            self.check_input(&sample.x)?;
            if sample.y >= self.num_classes {
                return Err(Error::LabelRange {
                    label: sample.y,
                    num_classes: self.num_classes,
                });
            }
            let trace = self.forward_traced(p, &sample.x, &masks);
            let lse = log_sum_exp(&trace.logits);
            loss += scale * (lse - trace.logits[sample.y]);
            // delta at the output: (softmax - onehot) / batch_size.
            let mut delta: Vec<f64> = trace
                .logits
                .iter()
                .map(|&z| scale * (z - lse).exp())
                .collect();
            delta[sample.y] -= scale;
            // Walk layers output to input.
            let mut off_end = p.len();
            for l in (0..dims.len()).rev() {
                let (fan_in, fan_out) = dims[l];
                let w_off = off_end - fan_in * fan_out - fan_out;
                let b_off = off_end - fan_out;
                let input = &trace.inputs[l];
                for r in 0..fan_out {
                    let dr = delta[r];
                    grad[b_off + r] += dr;
                    let g_row = &mut grad[w_off + r * fan_in..w_off + (r + 1) * fan_in];
                    for (gi, hi) in g_row.iter_mut().zip(input) {
                        *gi += dr * hi;
                    }
                }
                if l > 0 {
                    let w = &p[w_off..w_off + fan_in * fan_out];
                    let deriv = &trace.derivs[l - 1];
                    let mut prev = vec![0.0; fan_in];
                    for (r, &dr) in delta.iter().enumerate() {
                        let row = &w[r * fan_in..(r + 1) * fan_in];
                        for (pj, wj) in prev.iter_mut().zip(row) {
                            *pj += dr * wj;
                        }
                    }
                    for (pj, dj) in prev.iter_mut().zip(deriv) {
                        *pj *= dj;
                    }
                    delta = prev;
                }
                off_end = w_off;
            }
        }
        if weight_decay != 0.0 {
            let mut off = 0;
            for (fan_in, fan_out) in dims {
                for i in off..off + fan_in * fan_out {
                    loss += 0.5 * weight_decay * p[i] * p[i];
                    grad[i] += weight_decay * p[i];
                }
                off += fan_in * fan_out + fan_out;
            }
        }
        Ok((loss, ParamVector::new(grad)?))
    }

    /// Predicted class for one input, dropout off. Ties go to the lowest index.
    pub fn predict(&self, params: &ParamVector, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(params, x, ForwardMode::Eval)?))
    }

    /// Fraction of samples whose prediction matches the label.
    pub fn evaluate_accuracy(&self, params: &ParamVector, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("evaluation set".into()));
        }
        let mut correct = 0usize;
        for s in samples {
            if self.predict(params, &s.x)? == s.y {
                correct += 1;
            }
        }
        Ok(correct as f64 / samples.len() as f64)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| (z - lse).exp()).collect()
}
