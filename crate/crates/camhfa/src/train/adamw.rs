//! AdamW: Adam moments with bias correction plus decoupled weight decay.

use crate::tensor::Tensor;

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state across steps. Parameter order must stay fixed between
/// calls; moment buffers are allocated on the first step.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update over matching parameter/gradient lists. Both the moment
    /// step and the decay term read the pre-update parameter value.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                })
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list changed");
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((param, grad), moments) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch");
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i];
                moments.m[i] = self.beta1 * moments.m[i] + (1.0 - self.beta1) * g;
                moments.v[i] = self.beta2 * moments.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = moments.m[i] / bias1;
                let v_hat = moments.v[i] / bias2;
                let old = data[i];
                data[i] = old - lr * m_hat / (v_hat.sqrt() + self.eps) - lr * self.weight_decay * old;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradients_and_zero_decay_leave_parameters_unchanged() {
        let mut p = scalar(1.5);
        let mut opt = AdamW::new(0.0);
        opt.step(0.1, &mut [&mut p], &[scalar(0.0)]);
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn bias_corrected_first_step_moves_by_learning_rate() {
        // With gradient 1 the corrected moments are m = 1, v = 1, so the
        // step is lr / (1 + eps), i.e. 0.1 up to eps.
        let mut p = scalar(2.0);
        let mut opt = AdamW::new(0.0);
        opt.step(0.1, &mut [&mut p], &[scalar(1.0)]);
        assert!((p.data()[0] - 1.9).abs() < 1e-8, "{}", p.data()[0]);
    }

    #[test]
    fn decay_only_step_scales_parameter() {
        let mut p = scalar(4.0);
        let mut opt = AdamW::new(0.01);
        opt.step(0.1, &mut [&mut p], &[scalar(0.0)]);
        assert!((p.data()[0] - 4.0 * (1.0 - 0.001)).abs() < 1e-12, "{}", p.data()[0]);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = Tensor::new(vec![3], vec![0.3, -1.0, 2.5]).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(0.05);
        let grad = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        opt.step(0.0, &mut [&mut p], &[grad.clone()]);
        opt.step(0.0, &mut [&mut p], &[grad]);
        for (a, b) in p.data().iter().zip(before.data().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_steps_converge_toward_a_quadratic_minimum() {
        // Minimize (x - 3)^2 by feeding the optimizer its gradient.
        let mut p = scalar(0.0);
        let mut opt = AdamW::new(0.0);
        for _ in 0..2000 {
            let g = 2.0 * (p.data()[0] - 3.0);
            opt.step(0.05, &mut [&mut p], &[scalar(g)]);
        }
        assert!((p.data()[0] - 3.0).abs() < 0.05, "{}", p.data()[0]);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
            let mut opt = AdamW::new(0.01);
            for i in 0..10 {
                let g = Tensor::new(vec![2], vec![0.1 * i as f64, -0.2]).unwrap();
                opt.step(0.01, &mut [&mut p], &[g]);
            }
            p
        };
        assert_eq!(run().data(), run().data());
    }
}
