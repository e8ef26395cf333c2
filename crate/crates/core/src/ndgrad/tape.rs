//! Append-only computation tape with reverse-mode differentiation.
//!
//! Nodes are recorded in evaluation order, so insertion order is a
//! topological order and the reverse pass is a single backwards sweep.

use super::kernels::{dot, mm_nn, mm_nt, mm_tn};
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    MaskedSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SquaredError { pred: Var, target: Vec<T>, weights: Option<Vec<T>>, scale: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLastAxis(..) => "sum_last_axis",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::SquaredError { .. } => "squared_error",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Tanh(x)
            | Op::MaskedSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumLastAxis(x)
            | Op::Reshape(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Slice { x, .. } | Op::Permute { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::SquaredError { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` for leaves recorded without `requires_grad` and for non-leaf nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Split `shape` as `[outer, axis, inner]` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `x` (shape `shape`) into the axis order `perm`.
fn permute_data<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    // Trailing axes left in place are copied as contiguous blocks.
    let mut keep = perm.len();
    while keep > 0 && perm[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let block: usize = shape[keep..].iter().product();
    let src_strides: Vec<usize> = perm[..keep].iter().map(|&p| in_strides[p]).collect();
    let outer = &out_shape[..keep];
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; keep];
    for _ in 0..x.len() / block.max(1) {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&x[off..off + block]);
        for ax in (0..keep).rev() {
            idx[ax] += 1;
            if idx[ax] < outer[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Op names of every node in recording order.
    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.op.name())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input. Gradients are only tracked for `requires_grad` leaves.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// `a[..., k] · b[k, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k;
        let mut out = vec![T::zero(); m * n];
        mm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Op::MatMul(a, b), Tensor::from_raw(shape, out)))
    }

    /// Batched product of rank-3 tensors; `trans_b` multiplies by `b[i]ᵀ`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                mm_nt(m, k, n, ai, bi, ci);
            } else {
                mm_nn(m, k, n, ai, bi, ci);
            }
        }
        Ok(self.push(
            Op::BatchMatMul { a, b, trans_b },
            Tensor::from_raw(vec![batch, m, n], out),
        ))
    }

    /// `b` must be a single value or have a shape that is a suffix of `a`'s.
    fn broadcast_len(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bl = numel(sb);
        if bl == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb) {
            Ok(bl)
        } else {
            Err(Error::shape(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let bl = self.broadcast_len(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(av.len());
        for row in av.data().chunks_exact(bl) {
            data.extend(row.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        }
        let value = Tensor::from_raw(av.shape().to_vec(), data);
        let rec = match op {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(rec, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * c).collect();
        let value = Tensor::from_raw(v.shape().to_vec(), data);
        self.push(Op::Scale(x, c), value)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let value = Tensor::from_raw(v.shape().to_vec(), data);
        self.push(op, value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |e| if e > T::zero() { e } else { T::zero() })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        self.unary(x, Op::Gelu(x), |e| {
            half * e * (T::one() + Real::tanh_fast(c * (e + a * e * e * e)))
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |e| e.tanh())
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta` (both of
    /// the last axis' length).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {sx:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let dn = T::from_usize(d).unwrap();
        // The normalized rows are only kept when a backward pass can use them.
        let keep = [x, gamma, beta].iter().any(|&v| self.requires_grad(v));
        let mut xhat = if keep { vec![T::zero(); xv.len()] } else { Vec::new() };
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for (r, (row, orow)) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (((o, &e), &gj), &bj) in orow.iter_mut().zip(row).zip(g).zip(b) {
                *o = (e - mean) * rs * gj + bj;
            }
            if keep {
                for (h, &e) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *h = (e - mean) * rs;
                }
            }
        }
        let value = Tensor::from_raw(sx, out);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            value,
        ))
    }

    /// Softmax over the last axis. `mask` covers a suffix of `x`'s shape
    /// (at least the last axis); masked entries get weight exactly zero.
    /// A fully masked row yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if mask.is_empty() || !mask.len().is_multiple_of(d) || sx.is_empty() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} entries for input {sx:?}", mask.len()),
            ));
        }
        let total = numel(&sx);
        if !total.is_multiple_of(mask.len()) {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} entries does not tile input {sx:?}", mask.len()),
            ));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); total];
        for r in 0..total / d {
            let m = &mask[(r * d) % mask.len()..(r * d) % mask.len() + d];
            let row = &xv[r * d..(r + 1) * d];
            let mut mx = T::neg_infinity();
            for j in 0..d {
                if m[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let o = &mut out[r * d..(r + 1) * d];
            let mut z = T::zero();
            for j in 0..d {
                if m[j] {
                    o[j] = (row[j] - mx).exp();
                    z += o[j];
                }
            }
            for e in o.iter_mut() {
                *e = *e / z;
            }
        }
        Ok(self.push(Op::MaskedSoftmax(x), Tensor::from_raw(sx, out)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// Sum over the last axis, dropping it (a rank-1 input becomes a single value).
    pub fn sum_last_axis(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let sx = v.shape();
        let d = *sx.last().unwrap();
        let data: Vec<T> = v.data().chunks(d).map(|c| c.iter().copied().sum()).collect();
        let shape = if sx.len() > 1 {
            sx[..sx.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let value = Tensor::from_raw(shape, data);
        self.push(Op::SumLastAxis(x), value)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} range {start}..{} of {sx:?}", start + len),
            ));
        }
        let (outer, ax, inner) = split_axis(&sx, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ax * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(Op::Slice { x, axis, start }, Tensor::from_raw(shape, out)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total_ax = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {first:?} along axis {axis}"),
                ));
            }
            total_ax += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total_ax * inner);
        for o in 0..outer {
            for &v in xs {
                let ax = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * ax * inner..(o + 1) * ax * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total_ax;
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            Tensor::from_raw(shape, out),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("perm {perm:?} for {sx:?}")));
        }
        let (shape, data) = permute_data(self.value(x).data(), &sx, perm);
        Ok(self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            Tensor::from_raw(shape, data),
        ))
    }

    /// `scale · Σ wᵢ (predᵢ − targetᵢ)²`; `target` and `weights` are constants.
    pub fn squared_error(
        &mut self,
        pred: Var,
        target: &[T],
        weights: Option<&[T]>,
        scale: T,
    ) -> Result<Var> {
        let p = self.value(pred).data();
        if target.len() != p.len() || weights.is_some_and(|w| w.len() != p.len()) {
            return Err(Error::shape(
                "squared_error",
                format!(
                    "pred {:?}, target {}, weights {:?}",
                    self.shape(pred),
                    target.len(),
                    weights.map(|w| w.len())
                ),
            ));
        }
        let mut s = T::zero();
        for i in 0..p.len() {
            let e = p[i] - target[i];
            let w = weights.map_or(T::one(), |w| w[i]);
            s += w * e * e;
        }
        let value = Tensor::scalar(scale * s);
        Ok(self.push(
            Op::SquaredError {
                pred,
                target: target.to_vec(),
                weights: weights.map(|w| w.to_vec()),
                scale,
            },
            value,
        ))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] || sb != [sw[1]] {
            return Err(Error::shape("linear", format!("{sx:?} x {sw:?} + {sb:?}")));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = numel(&sx) / k;
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        mm_nn(m, k, n, self.value(x).data(), self.value(w).data(), &mut out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Op::Linear { x, w, b }, Tensor::from_raw(shape, out)))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let Tape { nodes } = self;
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if numel(&loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut adj)?;
        }

        let grads = nodes
            .iter()
            .zip(adj)
            .map(|(n, a)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => Some(match a {
                    Some(g) => Tensor::from_raw(n.value.shape().to_vec(), g),
                    None => Tensor::zeros(n.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    adj: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
    f(slot);
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    i: usize,
    g: &[T],
    adj: &mut [Option<Vec<T>>],
) -> Result<()> {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (k, n) = (shp(*b)[0], shp(*b)[1]);
            let m = nodes[a.0].value.len() / k;
            accumulate(nodes, adj, *a, |ga| mm_nt(m, n, k, g, val(*b), ga));
            accumulate(nodes, adj, *b, |gb| mm_tn(k, m, n, val(*a), g, gb));
        }
        Op::Linear { x, w, b } => {
            let (k, n) = (shp(*w)[0], shp(*w)[1]);
            let m = nodes[x.0].value.len() / k;
            accumulate(nodes, adj, *x, |gx| mm_nt(m, n, k, g, val(*w), gx));
            accumulate(nodes, adj, *w, |gw| mm_tn(k, m, n, val(*x), g, gw));
            accumulate(nodes, adj, *b, |gb| {
                for row in g.chunks_exact(n) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            });
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (batch, m, k) = (shp(*a)[0], shp(*a)[1], shp(*a)[2]);
            let n = node.value.shape()[2];
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, adj, *a, |ga| {
                for t in 0..batch {
                    let gi = &g[t * m * n..(t + 1) * m * n];
                    let bi = &bv[t * k * n..(t + 1) * k * n];
                    let out = &mut ga[t * m * k..(t + 1) * m * k];
                    if *trans_b {
                        // b[t] is [n, k]
                        mm_nn(m, n, k, gi, bi, out);
                    } else {
                        mm_nt(m, n, k, gi, bi, out);
                    }
                }
            });
            accumulate(nodes, adj, *b, |gb| {
                for t in 0..batch {
                    let gi = &g[t * m * n..(t + 1) * m * n];
                    let ai = &av[t * m * k..(t + 1) * m * k];
                    let out = &mut gb[t * k * n..(t + 1) * k * n];
                    if *trans_b {
                        // d b[t] = gᵀ a, shape [n, k]
                        mm_tn(n, m, k, gi, ai, out);
                    } else {
                        mm_tn(k, m, n, ai, gi, out);
                    }
                }
            });
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            accumulate(nodes, adj, *a, |ga| {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            });
            let bl = nodes[b.0].value.len();
            accumulate(nodes, adj, *b, |gb| {
                for row in g.chunks_exact(bl) {
                    for (x, &y) in gb.iter_mut().zip(row) {
                        *x += sign * y;
                    }
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let bl = bv.len();
            accumulate(nodes, adj, *a, |ga| {
                for (gr, gar) in g.chunks_exact(bl).zip(ga.chunks_exact_mut(bl)) {
                    for ((x, &y), &w) in gar.iter_mut().zip(gr).zip(bv) {
                        *x += y * w;
                    }
                }
            });
            accumulate(nodes, adj, *b, |gb| {
                for (gr, ar) in g.chunks_exact(bl).zip(av.chunks_exact(bl)) {
                    for ((x, &y), &w) in gb.iter_mut().zip(gr).zip(ar) {
                        *x += y * w;
                    }
                }
            });
        }
        Op::Scale(x, c) => accumulate(nodes, adj, *x, |gx| {
            for (e, &y) in gx.iter_mut().zip(g) {
                *e += y * *c;
            }
        }),
        Op::Relu(x) => {
            let xv = val(*x);
            accumulate(nodes, adj, *x, |gx| {
                for j in 0..g.len() {
                    if xv[j] > T::zero() {
                        gx[j] += g[j];
                    }
                }
            })
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
            let three = T::of(3.0);
            accumulate(nodes, adj, *x, |gx| {
                for j in 0..g.len() {
                    let e = xv[j];
                    let t = Real::tanh_fast(c * (e + a * e * e * e));
                    let d = half * (T::one() + t)
                        + half * e * (T::one() - t * t) * c * (T::one() + three * a * e * e);
                    gx[j] += g[j] * d;
                }
            })
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            accumulate(nodes, adj, *x, |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * (T::one() - y[j] * y[j]);
                }
            })
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gam = val(*gamma);
            let d = gam.len();
            let rows = g.len() / d;
            let dn = T::from_usize(d).unwrap();
            accumulate(nodes, adj, *x, |gx| {
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        dxhat[j] = gr[j] * gam[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hr[j];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
            });
            accumulate(nodes, adj, *gamma, |gg| {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            accumulate(nodes, adj, *beta, |gb| {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            });
        }
        Op::MaskedSoftmax(x) => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            accumulate(nodes, adj, *x, |gx| {
                for r in 0..g.len() / d {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let s = dot(yr, gr);
                    for j in 0..d {
                        gx[r * d + j] += yr[j] * (gr[j] - s);
                    }
                }
            })
        }
        Op::Sum(x) => accumulate(nodes, adj, *x, |gx| {
            for e in gx.iter_mut() {
                *e += g[0];
            }
        }),
        Op::Mean(x) => {
            let n = T::from_usize(nodes[x.0].value.len()).unwrap();
            accumulate(nodes, adj, *x, |gx| {
                for e in gx.iter_mut() {
                    *e += g[0] / n;
                }
            })
        }
        Op::SumLastAxis(x) => {
            let d = *shp(*x).last().unwrap();
            accumulate(nodes, adj, *x, |gx| {
                for (j, e) in gx.iter_mut().enumerate() {
                    *e += g[j / d];
                }
            })
        }
        Op::Slice { x, axis, start } => {
            let (outer, ax, inner) = split_axis(shp(*x), *axis);
            let len = node.value.shape()[*axis];
            accumulate(nodes, adj, *x, |gx| {
                for o in 0..outer {
                    let base = o * ax * inner + start * inner;
                    for (dst, &src) in gx[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *dst += src;
                    }
                }
            })
        }
        Op::Concat { xs, axis } => {
            let shape = node.value.shape();
            let outer = numel(&shape[..*axis]);
            let inner = numel(&shape[axis + 1..]);
            let total_ax = shape[*axis];
            let mut off = 0;
            for &v in xs {
                let ax = shp(v)[*axis];
                accumulate(nodes, adj, v, |gv| {
                    for o in 0..outer {
                        let src = &g[(o * total_ax + off) * inner..(o * total_ax + off + ax) * inner];
                        for (dst, &s) in gv[o * ax * inner..(o + 1) * ax * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                });
                off += ax;
            }
        }
        Op::Reshape(x) => accumulate(nodes, adj, *x, |gx| {
            for (e, &y) in gx.iter_mut().zip(g) {
                *e += y;
            }
        }),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, back) = permute_data(g, node.value.shape(), &inv);
            accumulate(nodes, adj, *x, |gx| {
                for (e, y) in gx.iter_mut().zip(back) {
                    *e += y;
                }
            })
        }
        Op::SquaredError {
            pred,
            target,
            weights,
            scale,
        } => {
            let p = val(*pred);
            let two = T::of(2.0) * *scale * g[0];
            accumulate(nodes, adj, *pred, |gp| {
                for j in 0..p.len() {
                    let w = weights.as_ref().map_or(T::one(), |w| w[j]);
                    gp[j] += two * w * (p[j] - target[j]);
                }
            })
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn masked_softmax_two_live_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 1e9]));
        let y = tape.masked_softmax(x, &[true, true, false]).unwrap();
        let w = tape.value(y).data();
        assert!((w[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((w[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.masked_softmax(x, &[true, false, false, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero_before_affine() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[3.0; 4]));
        let g = tape.constant(t(&[4], &[1.0; 4]));
        let b = tape.constant(t(&[4], &[0.0; 4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let a = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_grad_and_constants_none() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[2], &[5.0, 6.0]));
        let c = tape.constant(t(&[2], &[1.0, 1.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0]);
        assert!(grads.get(c).is_none());
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn permute_round_trips() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        // element [i,j,k] of x lands at [k,i,j]
        assert_eq!(tape.value(y).data()[6 + 3 + 2], data[12 + 2 * 4 + 1]);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z).data(), &data[..]);
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 2], &data));
        let a = tape.slice(x, 1, 0, 1).unwrap();
        let b = tape.slice(x, 1, 1, 2).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }
}
