use serde::{Deserialize, Serialize};

use super::tensor::Parameter;
use crate::error::{Error, Result};

/// ADAM with bias-corrected moments. Each [`Parameter`] carries its own
/// moment buffers and step counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Applies one update to every parameter and consumes its gradient.
    /// All gradients are checked before anything is modified.
    pub fn step<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        let mut params: Vec<&mut Parameter> = params.into_iter().collect();
        if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
            return Err(Error::State(format!("parameter {} has no gradient", p.name)));
        }
        for p in params.iter_mut() {
            let grad = p.tensor.take_grad().expect("checked above");
            p.step_count += 1;
            let t = p.step_count as i32;
            let m_correction = 1.0 - self.beta1.powi(t);
            let v_correction = 1.0 - self.beta2.powi(t);
            let Parameter {
                tensor,
                adam_m,
                adam_v,
                ..
            } = &mut **p;
            for (((w, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(adam_m.iter_mut()).zip(adam_v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / m_correction;
                let v_hat = *v / v_correction;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn param(values: Vec<f64>, grad: Vec<f64>) -> Parameter {
        let mut p = Parameter::new("p", Tensor::from_vec(values));
        p.tensor.set_grad(grad).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(vec![0.5; 4], vec![1.0; 4]);
        Adam::new(0.001).step([&mut p]).unwrap();
        // m_hat = v_hat = 1 at t = 1, so the step is lr / (1 + eps)
        let expected = 0.5 - 0.001 / (1.0 + 1e-8);
        assert!(p.data().iter().all(|&w| (w - expected).abs() < 1e-15));
        assert_eq!(p.step_count, 1);
        assert!(p.tensor.grad().is_none());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = param(vec![0.3, -0.2], vec![0.0, 0.0]);
        Adam::new(0.1).step([&mut p]).unwrap();
        assert_eq!(p.data(), &[0.3, -0.2]);
    }

    #[test]
    fn identical_state_identical_update() {
        let mut a = param(vec![1.0, 2.0], vec![0.3, -0.7]);
        let mut b = a.clone();
        Adam::new(0.01).step([&mut a, &mut b]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_gradient_is_a_state_error() {
        let mut a = param(vec![1.0], vec![0.5]);
        let mut b = Parameter::new("nograd", Tensor::from_vec(vec![1.0]));
        let err = Adam::new(0.01).step([&mut a, &mut b]).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        assert_eq!(a.data(), &[1.0]);
    }
}
