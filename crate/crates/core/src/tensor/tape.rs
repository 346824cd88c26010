//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Nodes are appended in execution order, so the record is already
//! topologically sorted; `backward` walks it once from the end.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

enum Op<T> {
    Leaf,
    #[allow(dead_code)]
    Param(ParamId),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    MulConst {
        x: usize,
        factor: Vec<T>,
    },
    Gelu { x: usize, cdf: Vec<T> },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax {
        x: usize,
        cols: usize,
    },
    Gather {
        x: usize,
        rows: Vec<usize>,
        width: usize,
    },
    Reshape(usize),
    /// `out[o] = in[src[o]]`; covers permutes and relative-position gathers.
    Index {
        x: usize,
        src: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        rows: Vec<(usize, usize, T)>,
        classes: usize,
        probs: Vec<T>,
    },
    SoftplusSum {
        x: usize,
        weights: Vec<T>,
    },
    RowDot {
        a: usize,
        b: usize,
        width: usize,
    },
    Sum(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records differentiable operations for one forward pass.
///
/// A tape is confined to one thread. Parameters enter through
/// [`Tape::param`], which returns the same node for repeated requests so
/// shared weights accumulate gradient from every use.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    dropout_rng: RefCell<Option<ChaCha8Rng>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Evaluation tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            dropout_rng: RefCell::new(None),
        }
    }

    /// Training tape with dropout masks drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        let tape = Self::new();
        *tape.dropout_rng.borrow_mut() = Some(ChaCha8Rng::seed_from_u64(seed));
        tape
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.borrow().is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let var = self.push(store.value(id).clone(), Op::Param(id));
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Mean of `-log softmax(logits)[target]` over active rows of a `[p, C]`
    /// logit matrix. Inactive rows contribute exactly zero.
    pub fn masked_cross_entropy(
        &self,
        logits: Var<'_, T>,
        targets: &[usize],
        active: &[bool],
    ) -> Result<Var<'_, T>> {
        let weights = {
            let n_active = active.iter().filter(|a| **a).count();
            if n_active == 0 {
                return Err(Error::DegenerateBatch);
            }
            let w = T::one() / T::from_usize(n_active).unwrap();
            active
                .iter()
                .map(|&a| if a { w } else { T::zero() })
                .collect::<Vec<_>>()
        };
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// `Σ_r w_r · -log softmax(logits_r)[target_r]`; rows with zero weight are skipped.
    pub fn weighted_cross_entropy(
        &self,
        logits: Var<'_, T>,
        targets: &[usize],
        weights: &[T],
    ) -> Result<Var<'_, T>> {
        let (value, rows, classes, probs) = {
            let x = self.value(logits.id);
            let classes = x.last_dim();
            let p = x.len() / classes.max(1);
            if targets.len() != p || weights.len() != p {
                return Err(Error::Shape(format!(
                    "cross entropy over {p} rows got {} targets and {} weights",
                    targets.len(),
                    weights.len()
                )));
            }
            let mut rows = Vec::new();
            let mut probs = Vec::new();
            let mut loss = T::zero();
            for r in 0..p {
                if weights[r] == T::zero() {
                    continue;
                }
                let t = targets[r];
                if t >= classes {
                    return Err(Error::Shape(format!(
                        "target {t} outside {classes} classes"
                    )));
                }
                let row = &x.data()[r * classes..(r + 1) * classes];
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut total = T::zero();
                let start = probs.len();
                for &v in row {
                    let e = (v - max).exp();
                    probs.push(e);
                    total += e;
                }
                for pr in &mut probs[start..] {
                    *pr /= total;
                }
                loss += weights[r] * (max + total.ln() - row[t]);
                rows.push((r, t, weights[r]));
            }
            (loss, rows, classes, probs)
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits: logits.id,
                rows,
                classes,
                probs,
            },
        ))
    }

    /// `Σ_i w_i · softplus(x_i)` as a scalar, with `softplus(x) = ln(1 + e^x)`.
    pub fn softplus_sum(&self, x: Var<'_, T>, weights: &[T]) -> Result<Var<'_, T>> {
        let value = {
            let xv = self.value(x.id);
            if weights.len() != xv.len() {
                return Err(Error::Shape(format!(
                    "{} weights for {} values",
                    weights.len(),
                    xv.len()
                )));
            }
            xv.data()
                .iter()
                .zip(weights)
                .map(|(&v, &w)| {
                    if w == T::zero() {
                        T::zero()
                    } else {
                        w * softplus(v)
                    }
                })
                .sum()
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftplusSum {
                x: x.id,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Propagates `d loss / d node` for every node that `loss` depends on.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = self.params.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients { grads, params })
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let len_of = |i: usize| nodes[i].value.len();
    match &nodes[id].op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            {
                let ga = slot(grads, a, len_of(a));
                for s in 0..batch {
                    let gs = &g[s * m * n..(s + 1) * m * n];
                    let bs = &bv[s * k * n..(s + 1) * k * n];
                    let out = &mut ga[s * m * k..(s + 1) * m * k];
                    if trans_b {
                        gemm_nn(gs, bs, out, m, n, k);
                    } else {
                        gemm_nt(gs, bs, out, m, n, k);
                    }
                }
            }
            let gb = slot(grads, b, len_of(b));
            for s in 0..batch {
                let gs = &g[s * m * n..(s + 1) * m * n];
                let as_ = &av[s * m * k..(s + 1) * m * k];
                let out = &mut gb[s * k * n..(s + 1) * k * n];
                if trans_b {
                    gemm_tn(gs, as_, out, m, n, k);
                } else {
                    gemm_tn(as_, gs, out, m, k, n);
                }
            }
        }
        &Op::Add(a, b) => {
            add_into(slot(grads, a, len_of(a)), g);
            add_into(slot(grads, b, len_of(b)), g);
        }
        &Op::Sub(a, b) => {
            add_into(slot(grads, a, len_of(a)), g);
            let gb = slot(grads, b, len_of(b));
            for (o, &v) in gb.iter_mut().zip(g) {
                *o -= v;
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            let ga = slot(grads, a, len_of(a));
            for i in 0..g.len() {
                ga[i] += g[i] * bv[i];
            }
            let gb = slot(grads, b, len_of(b));
            for i in 0..g.len() {
                gb[i] += g[i] * av[i];
            }
        }
        &Op::AddBias { x, bias } => {
            add_into(slot(grads, x, len_of(x)), g);
            let d = len_of(bias);
            let gb = slot(grads, bias, d);
            for row in g.chunks_exact(d) {
                add_into(gb, row);
            }
        }
        &Op::Scale { x, factor } => {
            let gx = slot(grads, x, len_of(x));
            for (o, &v) in gx.iter_mut().zip(g) {
                *o += v * factor;
            }
        }
        Op::MulConst { x, factor } => {
            let gx = slot(grads, *x, len_of(*x));
            for i in 0..g.len() {
                gx[i] += g[i] * factor[i];
            }
        }
        Op::Gelu { x, cdf } => {
            let x = *x;
            let xv = nodes[x].value.data();
            let gx = slot(grads, x, len_of(x));
            let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
            let half = T::from_f64_lossy(0.5);
            for i in 0..g.len() {
                let v = xv[i];
                let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
                gx[i] += g[i] * (cdf[i] + v * pdf);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = len_of(*gain);
            let gv = nodes[*gain].value.data();
            {
                let gg = slot(grads, *gain, d);
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                    }
                }
            }
            {
                let gbias = slot(grads, *bias, d);
                for gr in g.chunks_exact(d) {
                    add_into(gbias, gr);
                }
            }
            let gx = slot(grads, *x, len_of(*x));
            let inv_d = T::one() / T::from_usize(d).unwrap();
            let mut dxhat = vec![T::zero(); d];
            for (r, (gr, xr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                let mut mean_dxhat = T::zero();
                let mut mean_dxhat_xhat = T::zero();
                for j in 0..d {
                    dxhat[j] = gr[j] * gv[j];
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xr[j];
                }
                mean_dxhat *= inv_d;
                mean_dxhat_xhat *= inv_d;
                let out = &mut gx[r * d..(r + 1) * d];
                for j in 0..d {
                    out[j] += rstd[r] * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_xhat);
                }
            }
        }
        &Op::MaskedSoftmax { x, cols } => {
            let y = nodes[id].value.data();
            let gx = slot(grads, x, len_of(x));
            for ((yr, gr), out) in y
                .chunks_exact(cols)
                .zip(g.chunks_exact(cols))
                .zip(gx.chunks_exact_mut(cols))
            {
                let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..cols {
                    out[j] += yr[j] * (gr[j] - inner);
                }
            }
        }
        Op::Gather { x, rows, width } => {
            let gx = slot(grads, *x, len_of(*x));
            for (o, &r) in rows.iter().enumerate() {
                add_into(
                    &mut gx[r * width..(r + 1) * width],
                    &g[o * width..(o + 1) * width],
                );
            }
        }
        &Op::Reshape(x) => add_into(slot(grads, x, len_of(x)), g),
        Op::Index { x, src } => {
            let gx = slot(grads, *x, len_of(*x));
            for (o, &s) in src.iter().enumerate() {
                gx[s] += g[o];
            }
        }
        Op::CrossEntropy {
            logits,
            rows,
            classes,
            probs,
        } => {
            let gl = slot(grads, *logits, len_of(*logits));
            let g0 = g[0];
            for (k, &(r, t, w)) in rows.iter().enumerate() {
                let p = &probs[k * classes..(k + 1) * classes];
                let out = &mut gl[r * classes..(r + 1) * classes];
                let scale = g0 * w;
                for j in 0..*classes {
                    out[j] += scale * p[j];
                }
                out[t] -= scale;
            }
        }
        Op::SoftplusSum { x, weights } => {
            let xv = nodes[*x].value.data();
            let gx = slot(grads, *x, len_of(*x));
            for i in 0..xv.len() {
                if weights[i] != T::zero() {
                    gx[i] += g[0] * weights[i] * sigmoid(xv[i]);
                }
            }
        }
        &Op::RowDot { a, b, width } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            let ga = slot(grads, a, len_of(a));
            for (r, &gr) in g.iter().enumerate() {
                for j in 0..width {
                    ga[r * width + j] += gr * bv[r * width + j];
                }
            }
            let gb = slot(grads, b, len_of(b));
            for (r, &gr) in g.iter().enumerate() {
                for j in 0..width {
                    gb[r * width + j] += gr * av[r * width + j];
                }
            }
        }
        &Op::Sum(x) => {
            let gx = slot(grads, x, len_of(x));
            for o in gx.iter_mut() {
                *o += g[0];
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads[var.id].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, n)| self.grads[n].as_deref())
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(pid);
                if p.requires_grad {
                    add_into(p.grad.data_mut(), g);
                }
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    fn same_shape(&self, other: Var<'t, T>, what: &str) -> Result<Vec<usize>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
        }
        Ok(a)
    }

    fn elementwise(
        self,
        other: Var<'t, T>,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let shape = self.same_shape(other, what)?;
        let data = {
            let (a, b) = (self.value(), other.value());
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        Ok(self.tape.push(Tensor::new(&shape, data)?, op))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let value = self.value().map(|v| v * factor);
        self.tape.push(value, Op::Scale { x: self.id, factor })
    }

    /// Adds a `[d]` bias to every row of a `[.., d]` tensor.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (x, b) = (self.value(), bias.value());
            let d = b.len();
            if x.last_dim() != d {
                return Err(Error::Shape(format!(
                    "bias of {d} for rows of {}",
                    x.last_dim()
                )));
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(d) {
                add_into(row, b.data());
            }
            out
        };
        Ok(self.tape.push(
            value,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    /// Multiplies by a fixed tensor that receives no gradient.
    pub fn mul_const(self, factor: Vec<T>) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            if factor.len() != x.len() {
                return Err(Error::Shape(format!(
                    "constant of {} for {} values",
                    factor.len(),
                    x.len()
                )));
            }
            Tensor::new(
                x.shape(),
                x.data().iter().zip(&factor).map(|(&a, &b)| a * b).collect(),
            )?
        };
        Ok(self.tape.push(value, Op::MulConst { x: self.id, factor }))
    }

    /// Inverted dropout. Identity on evaluation tapes or when `rate` is 0.
    pub fn dropout(self, rate: f64) -> Result<Var<'t, T>> {
        if rate <= 0.0 || !self.tape.is_training() {
            return Ok(self);
        }
        let n = self.value().len();
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask = {
            let mut rng = self.tape.dropout_rng.borrow_mut();
            let rng = rng.as_mut().expect("training tape");
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect()
        };
        self.mul_const(mask)
    }

    /// `x · Φ(x)` with the exact normal CDF.
    pub fn gelu(self) -> Var<'t, T> {
        let (value, cdf) = {
            let x = self.value();
            let cdf: Vec<T> = x.data().iter().map(|v| v.normal_cdf()).collect();
            let out = x.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
            (Tensor { shape: x.shape().to_vec(), data: out }, cdf)
        };
        self.tape.push(value, Op::Gelu { x: self.id, cdf })
    }

    /// Per-row standardization over the last axis followed by `gain`, `bias`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let (value, xhat, rstd) = {
            let (x, gv, bv) = (self.value(), gain.value(), bias.value());
            let d = x.last_dim();
            if gv.len() != d || bv.len() != d {
                return Err(Error::Shape(format!(
                    "layer norm over {d} with gain {} bias {}",
                    gv.len(),
                    bv.len()
                )));
            }
            let eps = T::from_f64_lossy(eps);
            let inv_d = T::one() / T::from_usize(d).unwrap();
            let rows = x.len() / d;
            let mut out = vec![T::zero(); x.len()];
            let mut xhat = vec![T::zero(); x.len()];
            let mut rstd = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &x.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let denom = (var + eps).sqrt();
                let rs = if denom > T::zero() {
                    T::one() / denom
                } else {
                    T::zero()
                };
                rstd.push(rs);
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(x.shape(), out)?, xhat, rstd)
        };
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis of a `[N, rows, cols]` tensor where only
    /// entries with `visible[(n / heads), r, c]` participate. Hidden entries
    /// get probability zero; rows with nothing visible are all zero.
    pub fn masked_softmax(self, visible: &[bool], heads: usize) -> Result<Var<'t, T>> {
        let (value, cols) = {
            let x = self.value();
            let shape = x.shape();
            if shape.len() != 3 {
                return Err(Error::Shape(format!(
                    "masked softmax wants [N, rows, cols], got {shape:?}"
                )));
            }
            let (n, rows, cols) = (shape[0], shape[1], shape[2]);
            if heads == 0 || n % heads != 0 || visible.len() != (n / heads) * rows * cols {
                return Err(Error::Shape(format!(
                    "mask of {} for {shape:?} with {heads} heads",
                    visible.len()
                )));
            }
            let plane = rows * cols;
            let mut out = vec![T::zero(); x.len()];
            for s in 0..n {
                let mask = &visible[(s / heads) * plane..(s / heads + 1) * plane];
                for r in 0..rows {
                    let base = s * plane + r * cols;
                    let row = &x.data()[base..base + cols];
                    let vis = &mask[r * cols..(r + 1) * cols];
                    let mut max = T::neg_infinity();
                    for j in 0..cols {
                        if vis[j] {
                            max = max.max(row[j]);
                        }
                    }
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let mut total = T::zero();
                    for j in 0..cols {
                        if vis[j] {
                            let e = (row[j] - max).exp();
                            out[base + j] = e;
                            total += e;
                        }
                    }
                    for o in &mut out[base..base + cols] {
                        *o /= total;
                    }
                }
            }
            (Tensor::new(shape, out)?, cols)
        };
        Ok(self
            .tape
            .push(value, Op::MaskedSoftmax { x: self.id, cols }))
    }

    fn matmul_impl(self, other: Var<'t, T>, batched: bool, trans_b: bool) -> Result<Var<'t, T>> {
        let (value, batch, m, k, n) = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            let (batch, m, k, out_lead): (usize, usize, usize, Vec<usize>) = if batched {
                if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
                    return Err(Error::Shape(format!(
                        "bmm needs matching [N, .., ..], got {sa:?} and {sb:?}"
                    )));
                }
                (sa[0], sa[1], sa[2], vec![sa[0], sa[1]])
            } else {
                if sa.is_empty() || sb.len() != 2 {
                    return Err(Error::Shape(format!(
                        "matmul needs [.., k] and [k, n], got {sa:?} and {sb:?}"
                    )));
                }
                let k = sa[sa.len() - 1];
                (1, a.len() / k.max(1), k, sa[..sa.len() - 1].to_vec())
            };
            let (bk, n) = {
                let r = sb.len();
                if trans_b {
                    (sb[r - 1], sb[r - 2])
                } else {
                    (sb[r - 2], sb[r - 1])
                }
            };
            if bk != k {
                return Err(Error::Shape(format!(
                    "inner dimensions differ: {sa:?} and {sb:?} (trans_b={trans_b})"
                )));
            }
            let mut out = vec![T::zero(); batch * m * n];
            for s in 0..batch {
                let a_s = &a.data()[s * m * k..(s + 1) * m * k];
                let b_s = &b.data()[s * k * n..(s + 1) * k * n];
                let c_s = &mut out[s * m * n..(s + 1) * m * n];
                if trans_b {
                    gemm_nt(a_s, b_s, c_s, m, k, n);
                } else {
                    gemm_nn(a_s, b_s, c_s, m, k, n);
                }
            }
            let mut shape = out_lead;
            shape.push(n);
            (Tensor::new(&shape, out)?, batch, m, k, n)
        };
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    /// `[.., k] · [k, n]`; leading axes of `self` are flattened.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false, false)
    }

    /// `[.., k] · [n, k]ᵀ`
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false, true)
    }

    /// `[N, m, k] · [N, k, n]`
    pub fn bmm(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true, false)
    }

    /// `[N, m, k] · [N, n, k]ᵀ`
    pub fn bmm_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true, true)
    }

    /// Rows of a `[R, width]` tensor (any leading shape is flattened), in
    /// the order given. Output shape is `[rows.len(), width]`.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t, T>> {
        let (value, width) = {
            let x = self.value();
            let width = x.last_dim();
            let total = x.len() / width.max(1);
            let mut out = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                if r >= total {
                    return Err(Error::Shape(format!("row {r} out of {total}")));
                }
                out.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
            }
            (Tensor::new(&[rows.len(), width], out)?, width)
        };
        Ok(self.tape.push(
            value,
            Op::Gather {
                x: self.id,
                rows: rows.to_vec(),
                width,
            },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id)))
    }

    /// Generic axis permutation; output axis `d` is input axis `perm[d]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let (shape, src) = {
            let x = self.value();
            let in_shape = x.shape();
            let rank = in_shape.len();
            let mut sorted = perm.to_vec();
            sorted.sort_unstable();
            if sorted != (0..rank).collect::<Vec<_>>() {
                return Err(Error::Shape(format!(
                    "bad permutation {perm:?} for {in_shape:?}"
                )));
            }
            let mut strides = vec![1usize; rank];
            for d in (0..rank.saturating_sub(1)).rev() {
                strides[d] = strides[d + 1] * in_shape[d + 1];
            }
            let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
            let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
            let mut src = Vec::with_capacity(x.len());
            let mut counter = vec![0usize; rank];
            for _ in 0..x.len() {
                src.push(counter.iter().zip(&out_strides).map(|(c, s)| c * s).sum());
                for d in (0..rank).rev() {
                    counter[d] += 1;
                    if counter[d] < out_shape[d] {
                        break;
                    }
                    counter[d] = 0;
                }
            }
            (out_shape, src)
        };
        self.index_with(&shape, src)
    }

    /// Relative-position lookup on a `[N, L, R]` tensor.
    ///
    /// Plain: `out[n, i, j] = x[n, i, bucket[i * L + j]]`.
    /// Transposed: `out[n, i, j] = x[n, j, bucket[j * L + i]]`.
    pub fn relative_gather(self, bucket: &[usize], transposed: bool) -> Result<Var<'t, T>> {
        let (shape, src) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 3 || bucket.len() != s[1] * s[1] {
                return Err(Error::Shape(format!(
                    "relative gather of {s:?} with {} buckets",
                    bucket.len()
                )));
            }
            let (n, l, r) = (s[0], s[1], s[2]);
            if let Some(&b) = bucket.iter().find(|&&b| b >= r) {
                return Err(Error::Shape(format!(
                    "bucket {b} outside {r} relative positions"
                )));
            }
            let mut src = Vec::with_capacity(n * l * l);
            for batch in 0..n {
                for i in 0..l {
                    for j in 0..l {
                        let (row, col) = if transposed {
                            (j, bucket[j * l + i])
                        } else {
                            (i, bucket[i * l + j])
                        };
                        src.push(batch * l * r + row * r + col);
                    }
                }
            }
            (vec![n, l, l], src)
        };
        self.index_with(&shape, src)
    }

    fn index_with(self, shape: &[usize], src: Vec<usize>) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            Tensor::new(shape, src.iter().map(|&s| x.data()[s]).collect())?
        };
        Ok(self.tape.push(value, Op::Index { x: self.id, src }))
    }

    /// Row-wise dot products of two `[n, width]` tensors, giving `[n]`.
    pub fn row_dot(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.same_shape(other, "row_dot")?;
        let (value, width) = {
            let (a, b) = (self.value(), other.value());
            let width = a.last_dim();
            let rows = a.len() / width.max(1);
            let out = (0..rows)
                .map(|r| {
                    super::kernels::dot(
                        &a.data()[r * width..(r + 1) * width],
                        &b.data()[r * width..(r + 1) * width],
                    )
                })
                .collect();
            (Tensor::new(&[rows], out)?, width)
        };
        let _ = shape;
        Ok(self.tape.push(
            value,
            Op::RowDot {
                a: self.id,
                b: other.id,
                width,
            },
        ))
    }

    pub fn sum(self) -> Var<'t, T> {
        let total = self.value().data().iter().copied().sum();
        self.tape.push(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::from_usize(self.value().len()).unwrap();
        self.sum().scale(T::one() / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.value().data(), &[19.0, 22.0, 43.0, 50.0]);
        let i = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(i.matmul(b).unwrap().value().data(), b.value().data());
    }

    #[test]
    fn matmul_shape_error() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::Shape(_))));
        assert!(a.matmul_t(b).is_ok());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = w.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_parameter_sums_paths() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[2], &[2.0, 3.0]));
        let tape = Tape::new();
        let w1 = tape.param(&store, id);
        let w2 = tape.param(&store, id);
        assert_eq!(w1.id(), w2.id());
        // loss = sum(w * w) + sum(3 w): grad = 2w + 3
        let loss = w1.mul(w2).unwrap().sum().add(w2.scale(3.0).sum()).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(id).unwrap(), &[7.0, 9.0]);
        g.accumulate_into(&mut store);
        g.accumulate_into(&mut store);
        assert_eq!(store.get(id).grad.data(), &[14.0, 18.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::new();
        let gain = tape.leaf(t(&[2], &[1.0, 1.0]));
        let bias = tape.leaf(t(&[2], &[0.0, 0.0]));
        let x = tape.leaf(t(&[1, 2], &[1.0, 3.0]));
        assert_eq!(
            x.layer_norm(gain, bias, 0.0).unwrap().value().data(),
            &[-1.0, 1.0]
        );
        let c = tape.leaf(t(&[1, 2], &[4.0, 4.0]));
        assert_eq!(
            c.layer_norm(gain, bias, 1e-12).unwrap().value().data(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn gelu_values() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[0.0, 1.0, -1.7, 1.7]));
        let y = x.gelu();
        let v = y.value();
        assert_eq!(v.data()[0], 0.0);
        assert!((v.data()[1] - 0.841_344_746).abs() < 1e-8);
        assert!((v.data()[3] - v.data()[2] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
        let loss = tape.masked_cross_entropy(logits, &[0], &[true]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);

        let confident = tape.leaf(t(&[1, 3], &[60.0, 0.0, 0.0]));
        let loss = tape.masked_cross_entropy(confident, &[0], &[true]).unwrap();
        assert!(loss.item() < 1e-20);

        assert!(matches!(
            tape.masked_cross_entropy(logits, &[0], &[false]),
            Err(Error::DegenerateBatch)
        ));
    }

    #[test]
    fn inactive_rows_contribute_nothing() {
        let logits = t(
            &[4, 3],
            &[
                0.3, -1.0, 2.0, 1.0, 0.1, 0.2, -0.5, 0.5, 0.0, 2.0, 2.0, -2.0,
            ],
        );
        let targets = [2, 0, 1, 1];
        let per_row: Vec<f64> = (0..4)
            .map(|r| {
                let row = &logits.data()[r * 3..r * 3 + 3];
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[targets[r]]
            })
            .collect();
        let tape = Tape::<f64>::new();
        let l = tape.leaf(logits.clone());
        let all = tape
            .weighted_cross_entropy(l, &targets, &[1.0; 4])
            .unwrap()
            .item();
        let half = tape
            .weighted_cross_entropy(l, &targets, &[1.0, 0.0, 1.0, 0.0])
            .unwrap()
            .item();
        assert!((all - per_row.iter().sum::<f64>()).abs() < 1e-12);
        assert!((half - (per_row[0] + per_row[2])).abs() < 1e-12);

        // garbage targets on inactive rows are never read
        let loss = tape
            .masked_cross_entropy(l, &[2, 99, 1, 99], &[true, false, true, false])
            .unwrap();
        let g = tape.backward(loss).unwrap();
        let gl = g.wrt(l).unwrap();
        assert!(gl[3..6].iter().chain(&gl[9..12]).all(|&v| v == 0.0));
    }

    #[test]
    fn masked_softmax_rows() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = x.masked_softmax(&[true, false, false, false], 1).unwrap();
        assert_eq!(y.value().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = x.permute(&[1, 0, 2]).unwrap();
        assert_eq!(y.shape(), vec![3, 2, 4]);
        assert_eq!(y.value().data()[4..8], [12.0, 13.0, 14.0, 15.0]);
        let z = y.permute(&[1, 0, 2]).unwrap();
        assert_eq!(z.value().data(), x.value().data());
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let check = GradCheck::default();
        let a0 = Tensor::from_fn(&[2, 3, 4], |i| ((i * 7 % 11) as f64 - 5.0) / 4.0);
        let b0 = Tensor::from_fn(&[2, 4, 3], |i| ((i * 5 % 13) as f64 - 6.0) / 5.0);
        let g0 = Tensor::from_fn(&[4], |i| 1.0 + i as f64 / 10.0);
        let bias0 = Tensor::from_fn(&[4], |i| i as f64 / 7.0 - 0.2);
        let report = check_gradients(
            &[a0, b0, g0, bias0],
            |tape, v| {
                let (a, b, gain, bias) = (v[0], v[1], v[2], v[3]);
                let ln = a.layer_norm(gain, bias, 1e-5)?.gelu();
                let prod = ln.bmm(b)?; // [2,3,3]
                let vis = [true, true, false, true, false, true, true, true, true];
                let sm = prod.masked_softmax(&vis, 2)?;
                let bt = b.permute(&[0, 2, 1])?; // [2,3,4]
                let mixed = sm.bmm(bt)?.add_bias(bias)?; // [2,3,4]
                let rows = mixed.reshape(&[6, 4])?.gather_rows(&[0, 5, 2, 2])?;
                let logits = rows.matmul_t(a.reshape(&[6, 4])?)?;
                let ce =
                    tape.masked_cross_entropy(logits, &[1, 0, 5, 3], &[true, true, false, true])?;
                let dots = rows.row_dot(rows.scale(0.5))?;
                let sp = tape.softplus_sum(dots, &[0.1, 0.2, 0.3, 0.4])?;
                let rel = prod.relative_gather(&[0, 1, 2, 2, 1, 0, 1, 1, 1], true)?;
                ce.add(sp)?
                    .add(rel.mul(rel)?.mean())?
                    .sub(mixed.sum().scale(0.01))
            },
            &check,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
