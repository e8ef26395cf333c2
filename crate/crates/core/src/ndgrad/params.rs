use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameter blocks in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Tape handles for every block of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Leaves placed on a tape by the caller, one per block in declaration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Glorot-uniform matrix of shape `[fan_in, fan_out]`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| T::of(dist.sample(rng)));
        self.add(name, t)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, T::of(v)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    /// Place every block on `tape`; `train` marks them as requiring gradients.
    pub fn bind(&self, tape: &mut Tape<T>, train: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| tape.leaf(e.value.clone(), train))
                .collect(),
        )
    }

    /// Gradients for every block, in declaration order.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .zip(&bound.0)
            .map(|(e, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(e.value.shape())))
            .collect()
    }

    /// `self ← τ·online + (1 − τ)·self`
    pub fn polyak_from(&mut self, online: &ParamStore<T>, tau: T) -> Result<()> {
        if online.entries.len() != self.entries.len() {
            return Err(Error::InvalidArgument(
                "polyak update between stores of different layout".into(),
            ));
        }
        for (t, o) in self.entries.iter_mut().zip(&online.entries) {
            for (x, &y) in t.value.data_mut().iter_mut().zip(o.value.data()) {
                *x = tau * y + (T::one() - tau) * *x;
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}
