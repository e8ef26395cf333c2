//! Five-point central-difference gradient checking and a family of random test networks.
#![allow(dead_code)]

use acsac_core::critic::{h_step_targets, td_loss, CriticConfig, CriticMode, PrefixCritic};
use acsac_core::envs::{Dataset, DatasetMeta, Episode};
use acsac_core::flow::{FlowConfig, FlowPolicy};
use acsac_core::ndgrad::{Bound, ParamStore, Tape, Tensor, Var};
use acsac_core::scaling::Standardizer;
use acsac_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Below this magnitude the comparison is absolute rather than relative.
pub const REL_FLOOR: f64 = 1e-2;
/// Disagreement between the h and 2h central differences beyond this means
/// the stencil straddles a ReLU kink; smooth curvature stays orders below it.
pub const KINK_TOL: f64 = 1e-3;

pub type LossFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub coords: usize,
    pub max_rel_err: f64,
    /// Coordinates skipped because the loss is not differentiable on the stencil.
    pub kinks: usize,
    pub ops: Vec<&'static str>,
}

/// Worst per-coordinate relative error between reverse-mode and fourth-order
/// central differences, over every scalar of every input.
pub fn gradcheck(inputs: &[Tensor<f64>], f: &LossFn) -> Result<GradReport> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let mut ops: Vec<&'static str> = tape.op_names().collect();
    ops.sort_unstable();
    ops.dedup();
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut kinks = 0;
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let g = grads.get(v).unwrap_or(&zero);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            let mut at = |d: f64| -> Result<f64> {
                probe[i].data_mut()[j] = x0 + d;
                eval(&probe)
            };
            let near = at(FD_STEP)? - at(-FD_STEP)?;
            let far = at(2.0 * FD_STEP)? - at(-2.0 * FD_STEP)?;
            probe[i].data_mut()[j] = x0;
            let (d1, d2) = (near / (2.0 * FD_STEP), far / (4.0 * FD_STEP));
            if (d1 - d2).abs() > KINK_TOL * d1.abs().max(d2.abs()).max(REL_FLOOR) {
                kinks += 1;
                continue;
            }
            let numeric = (8.0 * near - far) / (12.0 * FD_STEP);
            let analytic = g.data()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
            coords += 1;
        }
    }
    Ok(GradReport {
        coords,
        max_rel_err: worst,
        kinks,
        ops,
    })
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let (u1, u2): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
        scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// One randomly shaped network plus its inputs; the loss is always scalar.
pub struct RandomNet {
    pub kind: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub loss: Box<LossFn<'static>>,
}

/// Dense stack: linear, gelu, matmul, tanh, relu, layer norm, squared error.
pub fn mlp_net(rng: &mut ChaCha8Rng) -> RandomNet {
    let (b, d0, d1, d2) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(2..6), rng.random_range(1..4));
    let target = random_targets(rng, b * d2);
    let weights: Vec<f64> = (0..b * d2).map(|_| rng.random_range(0.0..2.0)).collect();
    let inputs = vec![
        normal(rng, &[b, d0], 1.0),
        normal(rng, &[d0, d1], 0.8),
        normal(rng, &[d1], 0.3),
        normal(rng, &[d1], 1.0),
        normal(rng, &[d1], 0.3),
        normal(rng, &[d1, d2], 0.8),
    ];
    RandomNet {
        kind: "mlp",
        inputs,
        loss: Box::new(move |t, v| {
            let h = t.linear(v[0], v[1], v[2])?;
            let h = t.gelu(h);
            let h = t.layer_norm(h, v[3], v[4], 1e-5)?;
            let h = t.tanh(h);
            let h = t.matmul(h, v[5])?;
            let r = t.relu(h);
            let h = t.add(h, r)?;
            t.squared_error(h, &target, Some(&weights), 0.5)
        }),
    }
}

/// Causal single-head attention over `[batch, time, dim]`.
pub fn attention_net(rng: &mut ChaCha8Rng) -> RandomNet {
    let (b, tt, d) = (rng.random_range(1..3), rng.random_range(2..5), rng.random_range(2..5));
    let mask: Vec<bool> = (0..tt * tt).map(|i| i % tt <= i / tt).collect();
    let inputs = vec![
        normal(rng, &[b, tt, d], 1.0),
        normal(rng, &[d, d], 0.7),
        normal(rng, &[d, d], 0.7),
        normal(rng, &[d, d], 0.7),
        normal(rng, &[d], 1.0),
        normal(rng, &[d], 0.2),
    ];
    let scale = 1.0 / (d as f64).sqrt();
    RandomNet {
        kind: "attention",
        inputs,
        loss: Box::new(move |t, v| {
            let x = t.layer_norm(v[0], v[4], v[5], 1e-5)?;
            let q = t.matmul(x, v[1])?;
            let k = t.matmul(x, v[2])?;
            let val = t.matmul(x, v[3])?;
            let s = t.batch_matmul(q, k, true)?;
            let s = t.scale(s, scale);
            let w = t.masked_softmax(s, &mask)?;
            let o = t.batch_matmul(w, val, false)?;
            let o = t.add(o, v[0])?;
            let o = t.mul(o, o)?;
            let o = t.sum_last_axis(o);
            Ok(t.mean(o))
        }),
    }
}

/// Shape plumbing: slice, concat, reshape, permute, sub, scale, sum.
pub fn plumbing_net(rng: &mut ChaCha8Rng) -> RandomNet {
    let (a, b, c) = (rng.random_range(1..4), rng.random_range(2..5), rng.random_range(1..4));
    let inputs = vec![normal(rng, &[a, b, c], 1.0), normal(rng, &[a, b, c], 1.0)];
    let take = rng.random_range(1..b);
    RandomNet {
        kind: "plumbing",
        inputs,
        loss: Box::new(move |t, v| {
            let head = t.slice(v[0], 1, 0, take)?;
            let tail = t.slice(v[1], 1, take, b - take)?;
            let joined = t.concat(&[head, tail], 1)?;
            let p = t.permute(joined, &[2, 0, 1])?;
            let p = t.reshape(p, &[c, a * b])?;
            let q = t.permute(v[1], &[2, 0, 1])?;
            let q = t.reshape(q, &[c, a * b])?;
            let d = t.sub(p, q)?;
            let d = t.scale(d, 1.7);
            let g = t.tanh(d);
            let m = t.mul(g, p)?;
            Ok(t.sum(m))
        }),
    }
}

fn toy_dataset(rng: &mut ChaCha8Rng, horizon: usize) -> Dataset {
    let mut d = Dataset::empty(DatasetMeta {
        env_id: "gradcheck".into(),
        obs_dim: 2,
        action_dim: 2,
        num_episodes: 0,
        generator_seed: 0,
        action_mean: vec![0.0; 2],
        action_std: vec![1.0; 2],
    });
    let len = horizon + 2;
    let mut ep = Episode::new(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    for i in 0..len {
        let a = [rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0)];
        let s = [rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0)];
        ep.push(&a, -1.0, &s, i + 1 == len && rng.random_bool(0.5));
    }
    d.push_episode(ep);
    d
}

/// Zero-initialized blocks (biases) are redrawn: with a dead ReLU layer below,
/// a zero bias puts the next pre-activation exactly on the kink.
fn store_net(
    rng: &mut ChaCha8Rng,
    kind: &'static str,
    store: &ParamStore<f64>,
    eval: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> RandomNet {
    let inputs = store
        .entries()
        .iter()
        .map(|e| {
            let mut v = e.value.clone();
            if v.data().iter().all(|&x| x == 0.0) {
                v.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
            }
            v
        })
        .collect();
    RandomNet { kind, inputs, loss: Box::new(eval) }
}

/// Tiny prefix critic evaluated through the multi-horizon TD loss.
pub fn critic_net(rng: &mut ChaCha8Rng) -> RandomNet {
    let horizon = rng.random_range(1..4);
    let config = CriticConfig {
        obs_dim: 2,
        action_dim: 2,
        horizon,
        n_layer: rng.random_range(1..3),
        n_head: rng.random_range(1..3),
        d_head: 2,
        d_ff: 4,
        ensemble: rng.random_range(1..3),
        q_scale: 1.0,
    };
    let critic: PrefixCritic<f64> =
        PrefixCritic::new(config, Standardizer::identity(2), rng).expect("valid critic");
    let data = toy_dataset(rng, horizon);
    let rows = rng.random_range(1..4);
    let windows: Vec<_> = (0..rows).map(|_| data.window(0, rng.random_range(0..3), horizon)).collect();
    let boot: Vec<f64> = random_targets(rng, horizon);
    let bundles: Vec<_> = windows
        .iter()
        .map(|w| h_step_targets(w, 0.9, &boot, CriticMode::MultiHorizon).unwrap())
        .collect();
    let obs: Vec<f64> = windows.iter().flat_map(|w| w.state(0).iter().map(|&x| f64::from(x))).collect();
    let chunks: Vec<f64> = windows.iter().flat_map(|w| w.actions.iter().map(|&x| f64::from(x))).collect();
    let template = critic.clone();
    store_net(rng, "critic", &critic.params, move |t, v| {
        let bound = Bound::from_vars(v.to_vec());
        td_loss(&template, t, &bound, &obs, &chunks, &bundles, CriticMode::MultiHorizon)
    })
}

/// Tiny flow velocity field evaluated through the flow-matching loss.
pub fn flow_net(rng: &mut ChaCha8Rng) -> RandomNet {
    let horizon = rng.random_range(1..4);
    let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..6)).collect();
    let config = FlowConfig {
        obs_dim: 2,
        action_dim: 2,
        horizon,
        hidden,
        flow_steps: 2,
        action_bound: 1.0,
    };
    let flow: FlowPolicy<f64> =
        FlowPolicy::new(config, Standardizer::identity(2), Standardizer::identity(2), rng).expect("valid flow");
    let rows = rng.random_range(1..4);
    let cd = 2 * horizon;
    let obs = random_targets(rng, rows * 2);
    let chunks = random_targets(rng, rows * cd);
    let z = random_targets(rng, rows * cd);
    let u: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..1.0)).collect();
    let template = flow.clone();
    store_net(rng, "flow", &flow.params, move |t, v| {
        let bound = Bound::from_vars(v.to_vec());
        template.bc_loss_with(t, &bound, &obs, &chunks, &z, &u)
    })
}

/// The `i`-th network of the suite cycles through every family.
pub fn random_net(i: usize, rng: &mut ChaCha8Rng) -> RandomNet {
    match i % 5 {
        0 => mlp_net(rng),
        1 => attention_net(rng),
        2 => plumbing_net(rng),
        3 => critic_net(rng),
        _ => flow_net(rng),
    }
}

/// Largest change in any head `h ≤ j` when actions `j+1..=H` of a chunk are
/// resampled, over `trials` random (state, chunk, j).
pub fn prefix_perturbation_gap<T: acsac_core::ndgrad::Real>(
    critic: &PrefixCritic<T>,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let c = &critic.config;
    let (hz, ad) = (c.horizon, c.action_dim);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let obs: Vec<T> = (0..c.obs_dim).map(|_| T::of(rng.random_range(0.0..8.0))).collect();
        let chunk: Vec<T> = (0..hz * ad).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
        let keep = rng.random_range(1..hz.max(2));
        let mut moved = chunk.clone();
        for x in &mut moved[keep * ad..] {
            *x = T::of(rng.random_range(-3.0..3.0));
        }
        let (a, b) = (critic.q_values(&obs, &chunk)?, critic.q_values(&obs, &moved)?);
        for (qa, qb) in a.iter().zip(&b) {
            for h in 0..keep.min(hz) {
                worst = worst.max((qa[h].as_f64() - qb[h].as_f64()).abs());
            }
        }
    }
    Ok(worst)
}
