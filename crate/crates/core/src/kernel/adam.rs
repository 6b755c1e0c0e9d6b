use super::tensor::{Matrix, ParamTensor};
use crate::error::{DuplexError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        AdamState {
            config,
            step: 0,
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One bias-corrected Adam update over `params`, in the same order the state was built with.
pub fn adam_step(params: &mut [&mut ParamTensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(DuplexError::DimensionMismatch {
            op: "adam_step parameter count",
            left: (params.len(), 1),
            right: (state.first.len(), 1),
        });
    }
    for (p, m) in params.iter().zip(&state.first) {
        if p.shape() != m.shape() || p.grad.shape() != p.shape() {
            return Err(DuplexError::DimensionMismatch {
                op: "adam_step",
                left: p.shape(),
                right: m.shape(),
            });
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let grads = p.grad.as_slice().to_vec();
        let values = p.value.as_mut_slice();
        for (i, g) in grads.into_iter().enumerate() {
            let mi = &mut m.as_mut_slice()[i];
            let vi = &mut v.as_mut_slice()[i];
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !p.value.is_finite() {
            return Err(DuplexError::NonFinite("parameter after adam step".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamTensor {
        ParamTensor::new(Matrix::from_vec(1, 1, vec![v]).unwrap())
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = ParamTensor::new(Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        let before = p.value.clone();
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &[(2, 2)]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &mut st).unwrap();
        }
        assert_eq!(p.value, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamTensor::new(Matrix::from_vec(1, 3, vec![0.0, 1.0, 2.0]).unwrap());
        p.grad = Matrix::from_vec(1, 3, vec![0.3, -4.0, 1e-3]).unwrap();
        let mut st = AdamState::new(AdamConfig::with_lr(0.01), &[(1, 3)]);
        adam_step(&mut [&mut p], &mut st).unwrap();
        let deltas = [0.0 - p.value[(0, 0)], 1.0 - p.value[(0, 1)], 2.0 - p.value[(0, 2)]];
        assert!((deltas[0] - 0.01).abs() < 1e-8);
        assert!((deltas[1] + 0.01).abs() < 1e-8);
        assert!((deltas[2] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn three_step_trace_matches_hand_recurrence() {
        // θ=1, g=0.5, lr=0.1, β=(0.9, 0.999), ε=1e-8
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 0.5;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.1 * mh / (vh.sqrt() + 1e-8);
            expected.push(theta);
        }
        let mut p = scalar(1.0);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &[(1, 1)]);
        for want in expected {
            p.grad = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
            adam_step(&mut [&mut p], &mut st).unwrap();
            assert!((p.value[(0, 0)] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &[(2, 1)]);
        assert!(adam_step(&mut [&mut p], &mut st).is_err());
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &[]);
        assert!(adam_step(&mut [&mut p], &mut st).is_err());
    }
}
