//! Chunked flow-matching behavior policy.
//!
//! A state-conditioned velocity field `v(u, s, x)` over flattened `H × d`
//! chunks, trained to transport Gaussian noise onto data chunks along straight
//! paths and sampled with a fixed-step Euler integrator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::scaling::Standardizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub flow_steps: usize,
    /// Sampled actions are clipped to `[-action_bound, action_bound]`.
    pub action_bound: f64,
}

impl FlowConfig {
    pub fn chunk_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.action_dim == 0 || self.horizon == 0 {
            return Err(Error::Config("flow dimensions must be positive".into()));
        }
        if self.flow_steps == 0 {
            return Err(Error::Config("flow needs at least one Euler step".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("flow hidden widths must be positive".into()));
        }
        if !(self.action_bound > 0.0) {
            return Err(Error::Config("action bound must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FlowPolicy<T> {
    pub config: FlowConfig,
    pub params: ParamStore<T>,
    layers: Vec<(ParamId, ParamId)>,
    pub obs_scaler: Standardizer,
    /// Chunks are modelled in standardized action coordinates.
    pub action_scaler: Standardizer,
}

impl<T: Real> FlowPolicy<T> {
    pub fn new(
        config: FlowConfig,
        obs_scaler: Standardizer,
        action_scaler: Standardizer,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if obs_scaler.dim() != config.obs_dim || action_scaler.dim() != config.action_dim {
            return Err(Error::Config("flow scaler dimensions do not match the config".into()));
        }
        let mut params = ParamStore::new();
        let mut widths = vec![config.obs_dim + config.chunk_dim() + 1];
        widths.extend(&config.hidden);
        widths.push(config.chunk_dim());
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let wid = params.add_glorot(format!("flow.l{i}.w"), w[0], w[1], rng);
                let bid = params.add_filled(format!("flow.l{i}.b"), &[w[1]], 0.0);
                (wid, bid)
            })
            .collect();
        Ok(FlowPolicy {
            config,
            params,
            layers,
            obs_scaler,
            action_scaler,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> FlowPolicy<U> {
        FlowPolicy {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
            obs_scaler: self.obs_scaler.clone(),
            action_scaler: self.action_scaler.clone(),
        }
    }

    /// `v(u, s, x)` on standardized observations; all inputs are `[B, ·]`.
    pub fn velocity(&self, tape: &mut Tape<T>, p: &Bound, obs: Var, x: Var, u: Var) -> Result<Var> {
        let mut h = tape.concat(&[obs, x, u], 1)?;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, p[w], p[b])?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn check_rows(&self, obs: &[T], other: &[T], width: usize, what: &str) -> Result<usize> {
        let od = self.config.obs_dim;
        if obs.is_empty() || !obs.len().is_multiple_of(od) || other.len() != obs.len() / od * width {
            return Err(Error::shape(
                "flow",
                format!(
                    "{} observation values and {} {what} values (obs dim {od}, width {width})",
                    obs.len(),
                    other.len()
                ),
            ));
        }
        Ok(obs.len() / od)
    }

    /// Flow-matching loss with explicit noise `z`, times `u` and standardized
    /// target chunks: `mean_b ‖v(u, s, (1−u)z + u·a) − (a − z)‖²`.
    pub fn bc_loss_with(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        obs: &[T],
        chunks: &[T],
        z: &[T],
        u: &[T],
    ) -> Result<Var> {
        let cd = self.config.chunk_dim();
        let rows = self.check_rows(obs, chunks, cd, "chunk")?;
        if z.len() != chunks.len() || u.len() != rows {
            return Err(Error::shape(
                "flow_bc_loss",
                format!("noise {} and times {} for {rows} rows", z.len(), u.len()),
            ));
        }
        let mut xz = vec![T::zero(); chunks.len()];
        let mut target = vec![T::zero(); chunks.len()];
        for r in 0..rows {
            let ur = u[r];
            for j in r * cd..(r + 1) * cd {
                xz[j] = (T::one() - ur) * z[j] + ur * chunks[j];
                target[j] = chunks[j] - z[j];
            }
        }
        let obs_v = tape.constant(Tensor::new(
            vec![rows, self.config.obs_dim],
            self.obs_scaler.applied(obs),
        )?);
        let x_v = tape.constant(Tensor::new(vec![rows, cd], xz)?);
        let u_v = tape.constant(Tensor::new(vec![rows, 1], u.to_vec())?);
        let v = self.velocity(tape, p, obs_v, x_v, u_v)?;
        tape.squared_error(v, &target, None, T::one() / T::of(rows as f64))
    }

    /// Flow-matching loss on raw (unstandardized) chunks with fresh noise and times.
    pub fn bc_loss(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        obs: &[T],
        chunks: &[T],
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let cd = self.config.chunk_dim();
        let rows = self.check_rows(obs, chunks, cd, "chunk")?;
        let target = self.action_scaler.applied(chunks);
        let z = gaussian::<T>(rng, chunks.len());
        let unit = Uniform::new_inclusive(0.0, 1.0).expect("valid range");
        let u: Vec<T> = (0..rows).map(|_| T::of(unit.sample(rng))).collect();
        self.bc_loss_with(tape, p, obs, &target, &z, &u)
    }

    /// Euler-integrate from `noise` (standardized coordinates) and return raw,
    /// clipped chunks, `rows × H·d`.
    pub fn sample(&self, obs: &[T], noise: &[T]) -> Result<Vec<T>> {
        let cd = self.config.chunk_dim();
        let rows = self.check_rows(obs, noise, cd, "noise")?;
        let steps = self.config.flow_steps;
        let dt = T::one() / T::of(steps as f64);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let obs_v = tape.constant(Tensor::new(
            vec![rows, self.config.obs_dim],
            self.obs_scaler.applied(obs),
        )?);
        let mut x = noise.to_vec();
        for i in 0..steps {
            let x_v = tape.constant(Tensor::new(vec![rows, cd], x.clone())?);
            let u = T::of(i as f64) * dt;
            let u_v = tape.constant(Tensor::filled(&[rows, 1], u));
            let v = self.velocity(&mut tape, &p, obs_v, x_v, u_v)?;
            for (xi, &vi) in x.iter_mut().zip(tape.value(v).data()) {
                *xi += dt * vi;
            }
        }
        self.action_scaler.invert(&mut x);
        let b = T::of(self.config.action_bound);
        for xi in &mut x {
            *xi = xi.max(-b).min(b);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampled flow chunk".into()));
        }
        Ok(x)
    }

    /// `count` chunks per observation row, drawing fresh noise from `rng`.
    /// Output is `rows × count × H·d`, grouped by observation.
    pub fn sample_many(&self, obs: &[T], count: usize, rng: &mut impl Rng) -> Result<Vec<T>> {
        let od = self.config.obs_dim;
        let rows = obs.len() / od;
        let mut rep = Vec::with_capacity(rows * count * od);
        for r in 0..rows {
            for _ in 0..count {
                rep.extend_from_slice(&obs[r * od..(r + 1) * od]);
            }
        }
        let noise = gaussian::<T>(rng, rows * count * self.config.chunk_dim());
        self.sample(&rep, &noise)
    }
}

/// `len` independent standard normal draws.
pub fn gaussian<T: Real>(rng: &mut impl Rng, len: usize) -> Vec<T> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z)
        })
        .collect()
}
