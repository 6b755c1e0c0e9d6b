//! Forward/backward pairs for the handful of operations the model uses.
//!
//! Every backward accumulates (`+=`) into parameter gradients and returns the
//! gradient with respect to its input, so callers can chain them by hand.

use rand::Rng;

use super::tensor::{axpy, dot, l2_norm, Matrix, ParamTensor};
use crate::error::{DuplexError, Result};

/// `y = x·W + b` with `W` of shape `d_in × d_out`.
pub fn linear(x: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.rows() {
        return Err(DuplexError::DimensionMismatch {
            op: "linear",
            left: (1, x.len()),
            right: w.shape(),
        });
    }
    if b.len() != w.cols() {
        return Err(DuplexError::DimensionMismatch {
            op: "linear bias",
            left: (1, b.len()),
            right: w.shape(),
        });
    }
    let mut y = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, w.row(i), &mut y);
        }
    }
    Ok(y)
}

/// Accumulates `dW += xᵀ·dy`, `db += dy` and returns `dx = dy·Wᵀ`.
pub fn linear_backward(
    x: &[f64],
    w: &Matrix,
    dy: &[f64],
    grad_w: &mut Matrix,
    grad_b: Option<&mut [f64]>,
) -> Vec<f64> {
    debug_assert_eq!(dy.len(), w.cols());
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, dy, grad_w.row_mut(i));
        }
    }
    if let Some(gb) = grad_b {
        axpy(1.0, dy, gb);
    }
    (0..w.rows()).map(|i| dot(w.row(i), dy)).collect()
}

/// Two-layer perceptron `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub w1: ParamTensor,
    pub b1: ParamTensor,
    pub w2: ParamTensor,
    pub b2: ParamTensor,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Mlp2Trace {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp2 {
    /// He-scaled first layer, `1/√hidden` second layer, zero biases.
    pub fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Mlp2 {
            w1: ParamTensor::new(Matrix::gaussian(dim, hidden, (2.0 / dim as f64).sqrt(), rng)),
            b1: ParamTensor::new(Matrix::zeros(1, hidden)),
            w2: ParamTensor::new(Matrix::gaussian(hidden, dim, 1.0 / (hidden as f64).sqrt(), rng)),
            b2: ParamTensor::new(Matrix::zeros(1, dim)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.value.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.value.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.value.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Mlp2Trace> {
        if self.w2.value.rows() != self.w1.value.cols() {
            return Err(DuplexError::DimensionMismatch {
                op: "mlp2 layers",
                left: self.w1.shape(),
                right: self.w2.shape(),
            });
        }
        let pre = linear(x, &self.w1.value, self.b1.value.as_slice())?;
        // relu'(0) = 0, matching the backward mask below
        let hidden: Vec<f64> = pre.iter().map(|&p| if p > 0.0 { p } else { 0.0 }).collect();
        let output = linear(&hidden, &self.w2.value, self.b2.value.as_slice())?;
        Ok(Mlp2Trace {
            input: x.to_vec(),
            pre,
            hidden,
            output,
        })
    }

    pub fn backward(&mut self, trace: &Mlp2Trace, dy: &[f64]) -> Vec<f64> {
        let mut dh = linear_backward(
            &trace.hidden,
            &self.w2.value,
            dy,
            &mut self.w2.grad,
            Some(self.b2.grad.as_mut_slice()),
        );
        for (g, &p) in dh.iter_mut().zip(&trace.pre) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        linear_backward(
            &trace.input,
            &self.w1.value,
            &dh,
            &mut self.w1.grad,
            Some(self.b1.grad.as_mut_slice()),
        )
    }

    pub fn params(&self) -> [&ParamTensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

pub fn mlp2(x: &[f64], params: &Mlp2) -> Result<Vec<f64>> {
    Ok(params.forward(x)?.output)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(DuplexError::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// `p_i = exp(l_i/τ) / Σ_j exp(l_j/τ)`, evaluated after subtracting the max logit.
pub fn softmax_with_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.is_empty() {
        return Err(DuplexError::Empty("softmax logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(DuplexError::NonFinite("softmax logits".into()));
    }
    let mut p: Vec<f64> = logits.iter().map(|&l| ((l - max) / tau).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// `−ln p_target` and its gradient w.r.t. the logits, `(p − onehot)/τ`.
pub fn cross_entropy(probabilities: &[f64], target: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    if target >= probabilities.len() {
        return Err(DuplexError::InvalidArgument(format!(
            "target {target} out of range for {} classes",
            probabilities.len()
        )));
    }
    let loss = -probabilities[target].ln();
    let mut grad: Vec<f64> = probabilities.iter().map(|p| p / tau).collect();
    grad[target] -= 1.0 / tau;
    Ok((loss, grad))
}

/// Softmax followed by cross-entropy, with the loss taken through log-sum-exp.
#[derive(Clone, Debug)]
pub struct SoftmaxCrossEntropy {
    pub loss: f64,
    pub probs: Vec<f64>,
    /// d loss / d logits
    pub grad: Vec<f64>,
}

pub fn softmax_cross_entropy(logits: &[f64], target: usize, tau: f64) -> Result<SoftmaxCrossEntropy> {
    let probs = softmax_with_temperature(logits, tau)?;
    let (_, grad) = cross_entropy(&probs, target, tau)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&l| ((l - max) / tau).exp()).sum::<f64>().ln();
    let loss = lse - (logits[target] - max) / tau;
    Ok(SoftmaxCrossEntropy { loss, probs, grad })
}

/// L2-normalizes `v`, returning the unit vector and the original norm.
pub fn normalize(v: &[f64], what: &'static str) -> Result<(Vec<f64>, f64)> {
    let n = l2_norm(v);
    if !n.is_finite() {
        return Err(DuplexError::NonFinite(what.to_string()));
    }
    if n == 0.0 {
        return Err(DuplexError::Degenerate(what));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Gradient through `u = v/‖v‖`: `(dy − u·(u·dy)) / ‖v‖`.
pub fn normalize_backward(unit: &[f64], norm: f64, dy: &[f64]) -> Vec<f64> {
    let proj = dot(unit, dy);
    unit.iter()
        .zip(dy)
        .map(|(u, g)| (g - u * proj) / norm)
        .collect()
}
