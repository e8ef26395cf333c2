//! Per-dimension affine standardization of observations and actions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Real;

/// Standard deviations below this are raised to it.
pub const STD_FLOOR: f64 = 1e-3;

/// `x ↦ (x − mean) / std`, applied cyclically over rows of width `dim()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "standardizer needs matching non-empty mean/std, got {} and {}",
                mean.len(),
                std.len()
            )));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("standardizer statistics".into()));
        }
        let std = std.into_iter().map(|s| s.max(STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply<T: Real>(&self, x: &mut [T]) {
        let d = self.dim();
        for (i, v) in x.iter_mut().enumerate() {
            *v = T::of((v.as_f64() - self.mean[i % d]) / self.std[i % d]);
        }
    }

    pub fn invert<T: Real>(&self, x: &mut [T]) {
        let d = self.dim();
        for (i, v) in x.iter_mut().enumerate() {
            *v = T::of(v.as_f64() * self.std[i % d] + self.mean[i % d]);
        }
    }

    pub fn applied<T: Real>(&self, x: &[T]) -> Vec<T> {
        let mut out = x.to_vec();
        self.apply(&mut out);
        out
    }
}
