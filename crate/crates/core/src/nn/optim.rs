use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        check_shapes(self.m.len(), params, grads)?;
        self.t += 1;
        let t = self.t as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_shapes(params.len(), params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

fn check_shapes(state: usize, params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != state || grads.len() != state {
        return Err(Error::Dimension(format!(
            "optimizer state for {state} parameters, got {} parameters and {} gradients",
            params.len(),
            grads.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = AdamState::new(3, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0, 1.0, -2.0];
        s.step(&mut p, &[3.0, -0.001, 250.0], 0.01).unwrap();
        let moved = [p[0] - 0.0, p[1] - 1.0, p[2] + 2.0];
        assert!((moved[0] + 0.01).abs() < 1e-8);
        assert!((moved[1] - 0.01).abs() < 1e-7);
        assert!((moved[2] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = AdamState::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![0.5, -0.5];
        for _ in 0..10 {
            s.step(&mut p, &[0.0, 0.0], 0.01).unwrap();
        }
        assert_eq!(p, vec![0.5, -0.5]);
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        // g = 0.5 twice, lr = 0.01, theta_0 = 0.
        // t=1: m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25 -> step 0.5/(0.5+eps)
        // t=2: m = 0.095, v = 0.00049975, m_hat = 0.095/0.19 = 0.5,
        //      v_hat = 0.00049975/0.001999 = 0.25 -> same step again
        let eps = 1e-8;
        let step = 0.01 * 0.5 / (0.5 + eps);
        let expected = -2.0 * step;
        let mut s = AdamState::new(1, 0.9, 0.999, eps);
        let mut p = vec![0.0];
        s.step(&mut p, &[0.5], 0.01).unwrap();
        s.step(&mut p, &[0.5], 0.01).unwrap();
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
        assert_eq!(s.steps(), 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = AdamState::new(2, 0.9, 0.999, 1e-8);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3], 0.1).is_err());
        assert!(sgd_step(&mut [0.0; 2], &[0.0; 3], 0.1).is_err());
    }
}
