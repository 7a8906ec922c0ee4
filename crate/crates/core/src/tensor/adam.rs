use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        Self {
            first_moment: Tensor::zeros(shape.to_vec()),
            second_moment: Tensor::zeros(shape.to_vec()),
            step: 0,
            config,
        }
    }

    /// In-place update; `parameter` is untouched on error.
    pub fn update(&mut self, parameter: &mut Tensor, gradient: &Tensor) -> Result<()> {
        if parameter.shape() != gradient.shape() || parameter.shape() != self.first_moment.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "parameter {:?}, gradient {:?}, moments {:?}",
                    parameter.shape(),
                    gradient.shape(),
                    self.first_moment.shape()
                ),
            });
        }
        if !gradient.is_finite() {
            return Err(TensorError::NonFiniteGradient(gradient.shape().to_vec()));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - (beta1 as f64).powi(t);
        let c2 = 1.0 - (beta2 as f64).powi(t);
        let step_size = (lr as f64 / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        for (((p, &g), m), v) in parameter
            .data_mut()
            .iter_mut()
            .zip(gradient.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= step_size * *m / (v.sqrt() / c2_sqrt + epsilon);
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. Returns the new parameter and state with
/// `step + 1`; inputs are not modified.
pub fn adam_step(parameter: &Tensor, gradient: &Tensor, state: &AdamState) -> Result<(Tensor, AdamState)> {
    let mut p = parameter.clone();
    let mut s = state.clone();
    s.update(&mut p, gradient)?;
    Ok((p, s))
}
