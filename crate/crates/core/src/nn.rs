//! Small bias-free feed-forward networks, Adam, and spectral normalization.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    /// No nonlinearity; used by tests and linear baselines.
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn record(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Identity => v,
        }
    }
}

/// `W_{L+1} a(W_L ... a(W_1 x))`, optionally with per-layer biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Option<Vec<DMatrix<f64>>>,
    pub activation: Activation,
}

/// Tape handles for one network's parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Option<Vec<Var>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(sizes: &[usize], activation: Activation, with_bias: bool, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Invalid(format!("layer sizes must be >= 1 and at least two: {sizes:?}")));
        }
        let weights = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-bound..bound))
            })
            .collect();
        let biases = with_bias.then(|| sizes[1..].iter().map(|&n| DMatrix::zeros(n, 1)).collect());
        Ok(Mlp {
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        Mlp {
            weights: sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: None,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.nrows())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.weights.iter().map(|w| w.nrows()));
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Invalid("network has no layers".into()));
        }
        for (i, w) in self.weights.windows(2).enumerate() {
            if w[1].ncols() != w[0].nrows() {
                return Err(Error::shape("layer chain", w[0].nrows(), format!("layer {} has {} inputs", i + 1, w[1].ncols())));
            }
        }
        if let Some(b) = &self.biases {
            if b.len() != self.weights.len() {
                return Err(Error::shape("bias count", self.weights.len(), b.len()));
            }
            for (w, b) in self.weights.iter().zip(b) {
                if b.shape() != (w.nrows(), 1) {
                    return Err(Error::shape("bias", w.nrows(), format!("{:?}", b.shape())));
                }
            }
        }
        if !self.params().iter().all(|m| m.iter().all(|v| v.is_finite())) {
            return Err(Error::Invalid("network has non-finite weights".into()));
        }
        Ok(())
    }

    /// Evaluates the network on each column of `x`.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.nrows()));
        }
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for (i, w) in self.weights.iter().enumerate() {
            h = w * h;
            if let Some(b) = &self.biases {
                for mut c in h.column_iter_mut() {
                    c += &b[i];
                }
            }
            if i < last {
                let a = self.activation;
                h.apply(|v| *v = a.apply(*v));
            }
        }
        Ok(h)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&DMatrix::from_column_slice(x.len(), 1, x))?.as_slice().to_vec())
    }

    pub fn record_params(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self
                .biases
                .as_ref()
                .map(|bs| bs.iter().map(|b| tape.param(b.clone())).collect()),
        }
    }

    /// Records the forward pass on `x` (columns are samples).
    pub fn record_forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let last = vars.weights.len() - 1;
        let mut h = x;
        for (i, w) in vars.weights.iter().enumerate() {
            h = tape.matmul(*w, h)?;
            if let Some(b) = &vars.biases {
                h = tape.add_column(h, b[i])?;
            }
            if i < last {
                h = self.activation.record(tape, h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        let mut p: Vec<&DMatrix<f64>> = self.weights.iter().collect();
        if let Some(b) = &self.biases {
            p.extend(b.iter());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut p: Vec<&mut DMatrix<f64>> = self.weights.iter_mut().collect();
        if let Some(b) = &mut self.biases {
            p.extend(b.iter_mut());
        }
        p
    }

    pub fn vars_list(vars: &MlpVars) -> Vec<Var> {
        let mut v = vars.weights.clone();
        if let Some(b) = &vars.biases {
            v.extend(b.iter().copied());
        }
        v
    }

    pub fn spectral_normalize_all(&mut self) -> Result<()> {
        for w in &mut self.weights {
            *w = spectral_normalize(w)?;
        }
        Ok(())
    }
}

/// Largest singular value by power iteration on `W^T W`.
pub fn spectral_norm(w: &DMatrix<f64>) -> Result<f64> {
    if w.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let wtw = w.transpose() * w;
    let n = wtw.nrows();
    // Deterministic start with every component nonzero.
    let mut v = DMatrix::from_fn(n, 1, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    v /= v.norm();
    let mut sigma2 = 0.0;
    for it in 0..1000 {
        let mut next = &wtw * &v;
        let nrm = next.norm();
        if nrm == 0.0 {
            // Start vector in the null space; restart along a basis vector.
            v = DMatrix::zeros(n, 1);
            v[(it % n, 0)] = 1.0;
            continue;
        }
        next /= nrm;
        let done = it >= 20 && (nrm - sigma2).abs() <= 1e-14 * nrm;
        sigma2 = nrm;
        v = next;
        if done {
            break;
        }
    }
    Ok(sigma2.sqrt())
}

pub fn spectral_normalize(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(w / spectral_norm(w)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
        }
    }

    /// One bias-corrected update of every parameter.
    pub fn update(&mut self, params: &mut [&mut DMatrix<f64>], grads: &[DMatrix<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam parameter count", self.m.len(), params.len().max(grads.len())));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..self.m.len() {
            let g = &grads[i];
            if g.shape() != self.m[i].shape() || params[i].shape() != self.m[i].shape() {
                return Err(Error::shape("adam parameter", format!("{:?}", self.m[i].shape()), format!("{:?}", g.shape())));
            }
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            self.m[i].zip_apply(g, |m, g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_apply(g, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = &mut *params[i];
            for ((p, m), v) in p.iter_mut().zip(self.m[i].iter()).zip(self.v[i].iter()) {
                *p -= lr * (m / b1t) / ((v / b2t).sqrt() + eps);
            }
        }
        Ok(())
    }
}
