use crate::policies::PolicyParams;
use crate::{Error, Result};

/// Per-tensor gradient buffers aligned with [`PolicyParams::entries`] order.
#[derive(Debug, Clone)]
pub struct Grads {
    pub per_tensor: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(params: &PolicyParams) -> Grads {
        Grads {
            per_tensor: params.entries().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (mine, theirs) in self.per_tensor.iter_mut().zip(&other.per_tensor) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in &mut self.per_tensor {
            for v in buf.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.per_tensor
            .iter()
            .flat_map(|buf| buf.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm does not exceed `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.per_tensor.iter().flatten().copied().collect()
    }
}

/// Adam moment accumulators, aligned with [`PolicyParams::entries`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &PolicyParams) -> AdamState {
        let zeros: Vec<Vec<f64>> = params.entries().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }

    /// Clears the accumulators (used at training-stage boundaries so a newly
    /// activated head starts from fresh optimizer statistics).
    pub fn reset(&mut self) {
        for buf in self.first_moment.iter_mut().chain(&mut self.second_moment) {
            buf.fill(0.0);
        }
        self.step = 0;
    }

    /// Standard Adam update with bias correction.
    pub fn apply(
        &mut self,
        params: &mut PolicyParams,
        grads: &Grads,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<()> {
        if grads.per_tensor.len() != self.first_moment.len() {
            return Err(Error::Usage(format!(
                "gradient tensor count {} does not match optimizer state {}",
                grads.per_tensor.len(),
                self.first_moment.len()
            )));
        }
        for (i, buf) in grads.per_tensor.iter().enumerate() {
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::Verification(format!(
                    "non-finite gradient in parameter tensor {i}; aborting optimization"
                )));
            }
        }
        self.step += 1;
        let correction1 = 1.0 - beta1.powi(self.step as i32);
        let correction2 = 1.0 - beta2.powi(self.step as i32);
        for ((tensor, grad), (m, v)) in params
            .tensors_mut()
            .zip(&grads.per_tensor)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            for i in 0..grad.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                tensor.data_mut()[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::policies::NetworkConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_params() -> PolicyParams {
        let env = EnvConfig {
            n: 4,
            c: 1,
            m: 2,
            step: 2,
            episodes: 1,
            horizon: 1,
        };
        let net = NetworkConfig {
            kernel: 3,
            planner_width: 2,
            planner_blocks: 1,
            classifier_base: 2,
            classifier_blocks: 1,
            classes: 3,
        };
        PolicyParams::init(&env, &net, &mut ChaCha12Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = tiny_params();
        let before: Vec<f64> = params.entries().flat_map(|(_, t)| t.data().to_vec()).collect();
        let mut opt = AdamState::new(&params);
        let grads = Grads::zeros_like(&params);
        for _ in 0..3 {
            opt.apply(&mut params, &grads, 0.1, 0.9, 0.999, 1e-8).unwrap();
        }
        let after: Vec<f64> = params.entries().flat_map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn constant_gradient_step_approaches_signed_learning_rate() {
        let mut params = tiny_params();
        let mut opt = AdamState::new(&params);
        let mut grads = Grads::zeros_like(&params);
        for buf in &mut grads.per_tensor {
            buf.fill(0.37);
        }
        let lr = 0.01;
        let mut prev: Vec<f64> = params.entries().flat_map(|(_, t)| t.data().to_vec()).collect();
        let mut last_delta = 0.0;
        for _ in 0..2000 {
            opt.apply(&mut params, &grads, lr, 0.9, 0.999, 1e-8).unwrap();
            let now: Vec<f64> = params.entries().flat_map(|(_, t)| t.data().to_vec()).collect();
            last_delta = now[0] - prev[0];
            prev = now;
        }
        // With a constant positive gradient the per-step move tends to -lr.
        assert!((last_delta + lr).abs() < 1e-6, "delta {last_delta}");
    }

    #[test]
    fn quadratic_loss_converges() {
        // Minimize f(x) = x^2 by feeding Adam the exact gradient 2x; the
        // iterate must fall below 1e-6 overall loss within 500 steps.
        let mut x = 3.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let mut converged_at = None;
        for step in 1..=500 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(step));
            let v_hat = v / (1.0 - b2.powi(step));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
            if x * x < 1e-6 {
                converged_at = Some(step);
                break;
            }
        }
        assert!(converged_at.is_some(), "x^2 = {}", x * x);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut params = tiny_params();
        let mut opt = AdamState::new(&params);
        let mut grads = Grads::zeros_like(&params);
        grads.per_tensor[0][0] = f64::NAN;
        assert!(opt.apply(&mut params, &grads, 0.1, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn clip_bounds_global_norm() {
        let params = tiny_params();
        let mut grads = Grads::zeros_like(&params);
        for buf in &mut grads.per_tensor {
            buf.fill(1.0);
        }
        grads.clip(2.0);
        assert!((grads.global_norm() - 2.0).abs() < 1e-12);
    }
}
