use crate::error::{Result, TensorError};
use crate::param::ParamStore;

/// Bias-corrected Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl Adam {
    pub fn with_lr(self, lr: f32) -> Self {
        Self { lr, ..self }
    }

    /// Apply one update to every element of every parameter.
    pub fn step(&self, store: &mut ParamStore, step_count: u64) -> Result<()> {
        self.step_masked(store, step_count, |_| None)
    }

    /// Apply one update, skipping elements whose entry in `active(param)` is
    /// `false`. Skipped elements keep their value and moments untouched.
    pub fn step_masked<'a, F>(&self, store: &mut ParamStore, step_count: u64, active: F) -> Result<()>
    where
        F: Fn(usize) -> Option<&'a [bool]>,
    {
        if step_count == 0 {
            return Err(TensorError::Usage("adam step_count must be >= 1".into()));
        }
        for (_, p) in store.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
        }
        let t = step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in store.iter_mut().enumerate() {
            let mask = active(idx);
            let values = p.value.data_mut();
            for i in 0..values.len() {
                if mask.is_some_and(|m| !m[i]) {
                    continue;
                }
                let g = p.grad[i];
                let m1 = self.beta1 * p.first_moment[i] + (1.0 - self.beta1) * g;
                let m2 = self.beta2 * p.second_moment[i] + (1.0 - self.beta2) * g * g;
                p.first_moment[i] = m1;
                p.second_moment[i] = m2;
                values[i] -= self.lr * (m1 / bc1) / ((m2 / bc2).sqrt() + self.eps);
                if !values[i].is_finite() {
                    return Err(TensorError::NonFinite { op: "adam_step" });
                }
            }
        }
        Ok(())
    }
}
