use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        let zeros: Vec<Vec<T>> = store
            .entries()
            .iter()
            .map(|e| vec![T::zero(); e.value.len()])
            .collect();
        Ok(Adam {
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} gradient blocks for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (e, g) in store.entries().iter().zip(grads) {
            if g.len() != e.value.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("block {} has {} values, grad {}", e.name, e.value.len(), g.len()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter block {}", e.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (k, (e, g)) in store.entries_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, p) in e.value.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
