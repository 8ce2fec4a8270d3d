//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update to every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if self.config.lr.is_nan() || self.config.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.config.lr
            )));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} moments, {} params, {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
            for ((pi, &gi), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(moments) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let before = p.clone();
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        for _ in 0..3 {
            state.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.steps(), 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps).
        let mut p = Tensor::scalar(1.0);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        state.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        let expected = 1.0 - 0.002 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((1.0 - p.item() - 0.002).abs() < 1e-10);
    }

    #[test]
    fn identical_parameters_get_identical_updates() {
        let mut a = Tensor::from_vec(vec![0.3, 0.3]);
        let mut state = AdamState::new(AdamConfig::default(), [&a]);
        let g = Tensor::from_vec(vec![-0.7, -0.7]);
        for _ in 0..5 {
            state.step(&mut [&mut a], std::slice::from_ref(&g)).unwrap();
        }
        assert_eq!(a.data()[0], a.data()[1]);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        let err = state.step(&mut [&mut p], &[Tensor::zeros(&[3])]);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        let mut p = Tensor::zeros(&[1]);
        let config = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(config, [&p]);
        assert!(state.step(&mut [&mut p], &[Tensor::zeros(&[1])]).is_err());
    }
}
