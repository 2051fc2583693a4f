//! Dense matrices, reverse-mode differentiation and the Adam optimizer.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{gelu_scalar, sigmoid_scalar, Gradients, Tape, Tensor};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("non-finite gradient {value} in parameter '{param}' at entry {index}")]
    NonFiniteGradient {
        param: String,
        index: usize,
        value: f64,
    },
}

pub type ParamId = usize;

/// Named trainable matrices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (i, n.as_str(), v))
    }

    /// Records parameter `id` on `tape`.
    pub fn leaf(&self, tape: &mut Tape, id: ParamId) -> Tensor {
        tape.param(id, self.values[id].clone())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Glorot-uniform initialization.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

/// Sums per-leaf gradients into one dense gradient per parameter.
pub fn accumulate(store: &ParamStore, grads: &Gradients) -> Vec<Option<Matrix>> {
    let mut out: Vec<Option<Matrix>> = vec![None; store.len()];
    for (id, g) in grads.params() {
        match &mut out[*id] {
            Some(m) => m.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
    out
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = |p: &Matrix| Matrix::zeros(p.rows(), p.cols());
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.values.iter().map(zeros).collect(),
            v: store.values.iter().map(zeros).collect(),
        }
    }

    /// Applies one update. Parameters without a gradient are treated as
    /// having a zero gradient. Nothing is modified if any gradient entry is
    /// not finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>]) -> Result<(), NumericError> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(NumericError::InvalidArgument {
                op: "optimizer_step",
                reason: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != store.values[id].shape() {
                return Err(NumericError::ShapeMismatch {
                    op: "optimizer_step",
                    left: store.values[id].shape(),
                    right: g.shape(),
                });
            }
            if let Some((index, &value)) = g.data().iter().enumerate().find(|(_, x)| !x.is_finite()) {
                return Err(NumericError::NonFiniteGradient {
                    param: store.names[id].clone(),
                    index,
                    value,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter().enumerate() {
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = store.values[id].data_mut();
            for k in 0..p.len() {
                let gk = g.as_ref().map_or(0.0, |g| g.data()[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Finite-difference gradient checking.
pub mod gradcheck {
    use super::{Matrix, NumericError, Tape, Tensor};

    /// Compares the tape gradient of `f` with central differences of step
    /// `h`, for every input. Returns the worst norm-wise relative error
    /// `|g - n| / (|g| + |n|)` over the inputs (0 when both vanish).
    pub fn max_relative_error<F>(inputs: &[Matrix], h: f64, f: F) -> Result<f64, NumericError>
    where
        F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, NumericError>,
    {
        let eval = |vals: &[Matrix]| -> Result<f64, NumericError> {
            let mut tape = Tape::new();
            let ts: Vec<Tensor> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = f(&mut tape, &ts)?;
            Ok(tape.scalar(out))
        };
        let mut tape = Tape::new();
        let ts: Vec<Tensor> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &ts)?;
        let grads = tape.backward(out)?;
        let mut worst: f64 = 0.0;
        let mut vals = inputs.to_vec();
        for (k, t) in ts.iter().enumerate() {
            let analytic = grads
                .get(*t)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(inputs[k].rows(), inputs[k].cols()));
            let mut diff = 0.0;
            let mut norm_a = 0.0;
            let mut norm_n = 0.0;
            for e in 0..inputs[k].len() {
                let orig = vals[k].data()[e];
                vals[k].data_mut()[e] = orig + h;
                let up = eval(&vals)?;
                vals[k].data_mut()[e] = orig - h;
                let down = eval(&vals)?;
                vals[k].data_mut()[e] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.data()[e];
                diff += (a - numeric).powi(2);
                norm_a += a * a;
                norm_n += numeric * numeric;
            }
            let denom = norm_a.sqrt() + norm_n.sqrt();
            if denom > 0.0 {
                worst = worst.max(diff.sqrt() / denom);
            }
        }
        Ok(worst)
    }
}
