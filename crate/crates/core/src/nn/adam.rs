use super::params::ModelState;
use super::scalar::Scalar;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

impl<T: Scalar> ModelState<T> {
    /// One bias-corrected Adam update, applied in flat parameter order.
    pub fn optimizer_step(&mut self, grad: &[T], lr: f64) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries, model has {}",
                grad.len(),
                self.params.len()
            )));
        }
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} in parameter {} (flat index {i})",
                grad[i],
                self.layout().name_of(i)
            )));
        }
        let t = self.step + 1;
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let bc1 = T::of(1.0 - BETA1.powf(t as f64));
        let bc2 = T::of(1.0 - BETA2.powf(t as f64));
        let (lr, eps) = (T::of(lr), T::of(EPS));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (((p, m), v), &g) in self.params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        self.step = t;
        Ok(())
    }
}
