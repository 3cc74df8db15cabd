//! The two optimizers of the training loop.
//!
//! All ordinary parameters follow Adam. The class centers follow their own
//! plain SGD step whose incoming gradient — taken from the fused loss, where
//! the center term is scaled by `w0 * alpha^t` — is first rescaled by the
//! inverse of that weight. The rescale cancels the fusion weight exactly, so
//! the centers move as if trained on the unweighted center loss no matter
//! how hot the schedule runs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGrad { name: String },
    #[error("parameter `{name}`: gradient length {grad} does not match value length {value}")]
    LengthMismatch { name: String, value: usize, grad: usize },
    #[error("optimizer state holds {expected} parameters, step got {got}")]
    StateMismatch { expected: usize, got: usize },
    #[error("center rescale requires a positive center weight, got {weight}")]
    BadCenterWeight { weight: f64 },
}

/// One parameter's view for an optimizer step: its name (for error
/// reporting), its values, and the gradient accumulated for it.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Adam with bias correction. Moment buffers are allocated on the first
/// step and must keep their shapes afterwards; the step counter strictly
/// increases.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one Adam update at learning rate `lr` to every parameter.
    ///
    /// `lr = 0` is legal and leaves values untouched while the moments and
    /// step counter still advance, which keeps frozen-model runs exact.
    pub fn step(&mut self, lr: f64, updates: &mut [ParamUpdate]) -> Result<(), OptimError> {
        if self.m.is_empty() {
            self.m = updates.iter().map(|u| vec![0.0; u.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != updates.len() {
            return Err(OptimError::StateMismatch { expected: self.m.len(), got: updates.len() });
        }
        for (u, m) in updates.iter().zip(&self.m) {
            if u.grad.len() != u.value.len() || u.value.len() != m.len() {
                return Err(OptimError::LengthMismatch {
                    name: u.name.to_string(),
                    value: u.value.len(),
                    grad: u.grad.len(),
                });
            }
            if u.grad.iter().any(|g| !g.is_finite()) {
                return Err(OptimError::NonFiniteGrad { name: u.name.to_string() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (u, (m, v)) in updates.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..u.value.len() {
                let g = u.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                u.value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate after decay: the base rate halves (or scales by the
/// configured factor) once per completed decay interval.
pub fn effective_lr(base: f64, decay: f64, interval: usize, epoch: usize) -> f64 {
    base * decay.powi((epoch / interval.max(1)) as i32)
}

/// Plain-SGD center update with fusion-weight cancellation.
///
/// `fused_grad` is the gradient of the fused loss with respect to the
/// centers, which carries a factor of `center_weight = w0 * alpha^t`; the
/// step divides it back out, so the applied update is `-rate *
/// d(center_loss)/dC`. A zero weight makes the rescale undefined — the step
/// is skipped and `Ok(false)` returned so the caller can log the frozen
/// centers. A negative weight is rejected.
pub fn center_step(
    centers: &mut [f64],
    fused_grad: &[f64],
    center_weight: f64,
    rate: f64,
) -> Result<bool, OptimError> {
    if center_weight == 0.0 {
        return Ok(false);
    }
    if !(center_weight.is_finite() && center_weight > 0.0) {
        return Err(OptimError::BadCenterWeight { weight: center_weight });
    }
    if centers.len() != fused_grad.len() {
        return Err(OptimError::LengthMismatch {
            name: "centers".to_string(),
            value: centers.len(),
            grad: fused_grad.len(),
        });
    }
    if fused_grad.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGrad { name: "centers".to_string() });
    }
    let inv = 1.0 / center_weight;
    for (c, &g) in centers.iter_mut().zip(fused_grad) {
        *c -= rate * (g * inv);
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param<'a>(value: &'a mut [f64], grad: &'a [f64]) -> Vec<ParamUpdate<'a>> {
        vec![ParamUpdate { name: "w", value, grad }]
    }

    #[test]
    fn first_step_with_unit_gradient_is_one_bias_corrected_lr() {
        let mut adam = Adam::new();
        let mut value = [0.0];
        let grad = [1.0];
        adam.step(0.1, &mut one_param(&mut value, &grad)).unwrap();
        // Bias correction makes m_hat = v_hat = 1 on the first step, so the
        // move is lr / (1 + eps).
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((value[0] - expected).abs() < 1e-15, "got {}", value[0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradients_leave_fresh_parameters_unchanged() {
        let mut adam = Adam::new();
        let mut value = [3.5, -2.0];
        let grad = [0.0, 0.0];
        for _ in 0..5 {
            adam.step(0.1, &mut one_param(&mut value, &grad)).unwrap();
        }
        assert_eq!(value, [3.5, -2.0]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn identical_runs_take_identical_trajectories() {
        let run = || {
            let mut adam = Adam::new();
            let mut value = [1.0, 2.0, 3.0];
            for step in 0..20 {
                let grad = [0.3 * (step as f64).sin(), -0.1, 0.02 * step as f64];
                adam.step(0.05, &mut one_param(&mut value, &grad)).unwrap();
            }
            value
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_lr_advances_moments_but_freezes_values() {
        let mut adam = Adam::new();
        let mut value = [1.25];
        let grad = [0.7];
        adam.step(0.0, &mut one_param(&mut value, &grad)).unwrap();
        adam.step(0.0, &mut one_param(&mut value, &grad)).unwrap();
        assert_eq!(value, [1.25]);
        assert_eq!(adam.step_count(), 2);
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let mut adam = Adam::new();
        let mut value = [0.0];
        let grad = [f64::NAN];
        let err = adam
            .step(0.1, &mut [ParamUpdate { name: "w2.bias", value: &mut value, grad: &grad }])
            .unwrap_err();
        assert!(err.to_string().contains("w2.bias"), "{err}");
        assert_eq!(adam.step_count(), 0, "failed step must not advance the counter");
    }

    #[test]
    fn parameter_count_changes_are_rejected() {
        let mut adam = Adam::new();
        let mut a = [0.0];
        let mut b = [0.0];
        let g = [1.0];
        adam.step(0.1, &mut one_param(&mut a, &g)).unwrap();
        let err = adam
            .step(
                0.1,
                &mut [
                    ParamUpdate { name: "a", value: &mut a, grad: &g },
                    ParamUpdate { name: "b", value: &mut b, grad: &g },
                ],
            )
            .unwrap_err();
        assert!(matches!(err, OptimError::StateMismatch { expected: 1, got: 2 }));
    }

    #[test]
    fn decay_halves_once_per_interval() {
        assert_eq!(effective_lr(1e-5, 0.5, 35, 0), 1e-5);
        assert_eq!(effective_lr(1e-5, 0.5, 35, 34), 1e-5);
        assert_eq!(effective_lr(1e-5, 0.5, 35, 35), 0.5e-5);
        assert_eq!(effective_lr(1e-5, 0.5, 35, 69), 0.5e-5);
        assert_eq!(effective_lr(1e-5, 0.5, 35, 70), 0.25e-5);
    }

    #[test]
    fn center_rescale_inverts_the_fusion_weight() {
        // Fused gradient = 0.01 * raw; the step must apply 100x to recover
        // the raw gradient before the SGD rate.
        let mut centers = [0.0, 0.0];
        let raw = [0.02, -0.01];
        let fused: Vec<f64> = raw.iter().map(|g| g * 0.01).collect();
        let stepped = center_step(&mut centers, &fused, 0.01, 0.5).unwrap();
        assert!(stepped);
        for (c, &g) in centers.iter().zip(&raw) {
            assert!((c + 0.5 * g).abs() < 1e-12, "update must equal -rate * raw grad");
        }
    }

    #[test]
    fn center_trajectory_is_independent_of_the_fusion_weight() {
        let raw = [0.4, -0.3, 0.05, 1.0];
        let run = |w: f64| {
            let mut centers = [1.0, 2.0, -1.0, 0.0];
            for t in 0..50 {
                let decayed: Vec<f64> = raw.iter().map(|g| g * w * (1.0 + t as f64 * 0.01)).collect();
                let weight = w * (1.0 + t as f64 * 0.01);
                center_step(&mut centers, &decayed, weight, 0.5).unwrap();
            }
            centers
        };
        let a = run(0.01);
        let b = run(0.5);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn zero_center_weight_skips_the_step() {
        let mut centers = [1.0, -1.0];
        let fused = [0.5, 0.5];
        let stepped = center_step(&mut centers, &fused, 0.0, 0.5).unwrap();
        assert!(!stepped);
        assert_eq!(centers, [1.0, -1.0]);

        let err = center_step(&mut centers, &fused, -0.01, 0.5).unwrap_err();
        assert!(matches!(err, OptimError::BadCenterWeight { .. }));
    }
}
