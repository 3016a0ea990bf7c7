use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are created lazily on the first step.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            p.expect_shape(g.shape())?;
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::Shape("parameter count changed between Adam steps".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (lr_t, c1_t, c2_t, eps_t) = (T::of(lr), T::of(c1), T::of(c2), T::of(eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / c1_t;
                let v_hat = *vi / c2_t;
                *pi = *pi - lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_and_moments() {
        let mut adam = AdamState::<f64>::new(AdamConfig::default());
        let mut p = vec![Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap()];
        let before = p.clone();
        adam.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, before);
        assert!(adam.first_moments()[0].data().iter().all(|&m| m == 0.0));
        assert!(adam.second_moments()[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = AdamState::<f64>::new(AdamConfig::default());
        let mut p = vec![Tensor::scalar(0.5)];
        adam.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn negated_gradients_negate_first_update() {
        let g = Tensor::from_f64(&[4], &[0.3, -2.0, 1e-4, 7.0]).unwrap();
        let mut a = AdamState::<f64>::new(AdamConfig::default());
        let mut b = AdamState::<f64>::new(AdamConfig::default());
        let mut pa = vec![Tensor::zeros(&[4])];
        let mut pb = vec![Tensor::zeros(&[4])];
        a.step(&mut pa, std::slice::from_ref(&g)).unwrap();
        b.step(&mut pb, &[g.map(|x| -x)]).unwrap();
        for (x, y) in pa[0].data().iter().zip(pb[0].data()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = AdamState::<f32>::new(AdamConfig::default());
        let mut p = vec![Tensor::zeros(&[2])];
        assert!(adam.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
    }
}
