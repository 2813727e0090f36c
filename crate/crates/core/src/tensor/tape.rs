use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::kernels::{conv2d_backward, conv2d_forward, gemm, ConvGeom};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Records differentiable operations for one forward/backward pass.
///
/// A tape is confined to a single thread and a single training step.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
    dropout: RefCell<Option<(f64, super::Rng)>>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        batch: usize,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: f64 },
    Relu { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Reshape { a: usize },
    Gather { a: usize, map: Vec<usize> },
    Concat { parts: Vec<usize> },
    Sum { a: usize },
    Dot { a: usize, weights: Vec<f64> },
    MaskRenorm { a: usize, mask: Vec<f64>, n: usize },
    ScalarWithGrad { a: usize, grad: Vec<f64> },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Var::backward`], addressable by leaf or parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Tape::leaf`] or [`Tape::param`].
    pub fn wrt(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, node)| self.leaves.get(node))
    }

    /// Every parameter that received a gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, node)| self.leaves.get(node).map(|g| (*p, g)))
    }

    /// Overwrites a parameter gradient; used to build negative controls.
    pub fn set_param(&mut self, id: ParamId, grad: Tensor) {
        if let Some((_, node)) = self.params.iter().find(|(p, _)| *p == id) {
            self.leaves.insert(*node, grad);
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which [`Var::dropout`] zeroes entries with probability
    /// `rate`, drawing masks from a stream seeded with `seed`.
    pub fn with_dropout(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let tape = Self::default();
        if rate > 0.0 {
            *tape.dropout.borrow_mut() = Some((rate, super::seeded_rng(seed)));
        }
        Ok(tape)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: inner.nodes.len() - 1,
        })
    }

    fn rg(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// A leaf that receives a gradient, queried via [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// Registers (once per tape) a parameter of `store` as a gradient leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.inner.borrow().params.get(&id) {
            return Var { tape: self, id: node };
        }
        let v = self.push_leaf(store.value(id).clone(), true);
        self.inner.borrow_mut().params.insert(id, v.id);
        v
    }

    /// Records a scalar whose gradient with respect to `a` was computed
    /// outside the tape (used by the CTC forward/backward recursion).
    pub(crate) fn scalar_with_grad<'t>(&'t self, a: &Var<'t>, value: f64, grad: Vec<f64>) -> Result<Var<'t>> {
        debug_assert_eq!(grad.len(), a.numel());
        let rg = self.rg(a.id);
        self.push(Tensor::scalar(value), Op::ScalarWithGrad { a: a.id, grad }, rg, "scalar_with_grad")
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.inner.borrow(), |inner| &inner.nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// A constant copy of this value, cut from the gradient path.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value().clone();
        self.tape.constant(v)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    /// Matrix product over the last two axes; see [`Var::matmul_ex`].
    pub fn matmul(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(b, false, false)
    }

    /// `self · bᵀ`.
    pub fn matmul_t(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(b, false, true)
    }

    /// Batched matrix product `op(self) · op(b)` over the last two axes.
    ///
    /// `self` has shape `[.., r, c]`; `b` is either 2-D (shared across the
    /// batch) or has the same leading axes as `self`.
    pub fn matmul_ex(&self, b: &Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.same_tape(b);
        let (out, op) = {
            let av = self.value();
            let bv = b.value();
            let (ash, bsh) = (av.shape(), bv.shape());
            if ash.len() < 2 || bsh.len() < 2 {
                return Err(shape_err("matmul", ash, bsh));
            }
            let lead = &ash[..ash.len() - 2];
            let (r, c) = (ash[ash.len() - 2], ash[ash.len() - 1]);
            let (m, k) = if ta { (c, r) } else { (r, c) };
            let b_batched = bsh.len() > 2;
            if b_batched && bsh[..bsh.len() - 2] != *lead {
                return Err(shape_err("matmul", ash, bsh));
            }
            let (r2, c2) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
            let (kb, n) = if tb { (c2, r2) } else { (r2, c2) };
            if k != kb {
                return Err(shape_err("matmul", ash, bsh));
            }
            let batch: usize = lead.iter().product();
            let mut data = vec![0.0; batch * m * n];
            let (ad, bd) = (av.data(), bv.data());
            for bi in 0..batch {
                let bs = if b_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
                gemm(
                    m,
                    n,
                    k,
                    &ad[bi * m * k..(bi + 1) * m * k],
                    ta,
                    bs,
                    tb,
                    &mut data[bi * m * n..(bi + 1) * m * n],
                );
            }
            let mut shape = lead.to_vec();
            shape.extend([m, n]);
            (
                Tensor::new(shape, data)?,
                Op::MatMul {
                    a: self.id,
                    b: b.id,
                    ta,
                    tb,
                    batch,
                    b_batched,
                    m,
                    k,
                    n,
                },
            )
        };
        let rg = self.requires_grad() || b.requires_grad();
        self.tape.push(out, op, rg, "matmul")
    }

    /// Elementwise sum; `b` may broadcast when its shape is a suffix of `self`'s.
    pub fn add(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.binary(b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise product with the same broadcasting rule as [`Var::add`].
    pub fn mul(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.binary(b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn sub(&self, b: &Var<'t>) -> Result<Var<'t>> {
        self.add(&b.scale(-1.0)?)
    }

    fn binary(
        &self,
        b: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(b);
        let out = {
            let av = self.value();
            let bv = b.value();
            if !is_suffix(bv.shape(), av.shape()) {
                return Err(shape_err(name, av.shape(), bv.shape()));
            }
            let inner = bv.numel();
            let data = av
                .data()
                .chunks(inner.max(1))
                .flat_map(|chunk| chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        let rg = self.requires_grad() || b.requires_grad();
        self.tape.push(out, op(self.id, b.id), rg, name)
    }

    /// Inverted dropout when the tape was built with [`Tape::with_dropout`];
    /// identity otherwise.
    pub fn dropout(&self) -> Result<Var<'t>> {
        let mask = {
            let mut d = self.tape.dropout.borrow_mut();
            let Some((rate, rng)) = d.as_mut() else {
                return Ok(*self);
            };
            let keep = 1.0 / (1.0 - *rate);
            let data = (0..self.numel())
                .map(|_| if rand::Rng::random::<f64>(rng) < *rate { 0.0 } else { keep })
                .collect();
            Tensor::new(self.shape(), data)?
        };
        self.mul(&self.tape.constant(mask))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect())?
        };
        self.tape.push(out, Op::Scale { a: self.id, s }, self.requires_grad(), "scale")
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.max(0.0)).collect())?
        };
        self.tape.push(out, Op::Relu { a: self.id }, self.requires_grad(), "relu")
    }

    fn last_axis(&self, name: &str) -> Result<usize> {
        let shape = self.shape();
        match shape.last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(Error::InvalidArgument(format!("{name} over an empty axis"))),
        }
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let n = self.last_axis("softmax")?;
        let out = {
            let v = self.value();
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(n) {
                softmax_in_place(row);
            }
            Tensor::new(v.shape().to_vec(), data)?
        };
        self.tape.push(out, Op::Softmax { a: self.id }, self.requires_grad(), "softmax")
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let n = self.last_axis("log_softmax")?;
        let out = {
            let v = self.value();
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(n) {
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|x| *x -= lse);
            }
            Tensor::new(v.shape().to_vec(), data)?
        };
        self.tape
            .push(out, Op::LogSoftmax { a: self.id }, self.requires_grad(), "log_softmax")
    }

    /// Layer normalisation over the last axis (epsilon 1e-5) with affine gain/bias.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let n = self.last_axis("layer_norm")?;
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(shape_err("layer_norm", &self.shape(), &gain.shape()));
        }
        let (out, xhat, rstd) = {
            let v = self.value();
            let g = gain.value();
            let b = bias.value();
            let rows = v.numel() / n;
            let mut xhat = vec![0.0; v.numel()];
            let mut rstd = vec![0.0; rows];
            let mut data = vec![0.0; v.numel()];
            for r in 0..rows {
                let x = &v.data()[r * n..(r + 1) * n];
                let mean = x.iter().sum::<f64>() / n as f64;
                let var = x.iter().map(|&xi| (xi - mean) * (xi - mean)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..n {
                    let h = (x[j] - mean) * rs;
                    xhat[r * n + j] = h;
                    data[r * n + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(v.shape().to_vec(), data)?, xhat, rstd)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        self.tape.push(
            out,
            Op::LayerNorm {
                a: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// 2-D cross-correlation of a `[cin, h, w]` input with `[cout, cin, kh, kw]` kernels.
    pub fn conv2d(
        &self,
        kernel: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var<'t>> {
        let ish = self.shape();
        let ksh = kernel.shape();
        if ish.len() != 3 || ksh.len() != 4 || ksh[1] != ish[0] {
            return Err(shape_err("conv2d", &ish, &ksh));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (cin, h, w) = (ish[0], ish[1], ish[2]);
        let (cout, kh, kw) = (ksh[0], ksh[2], ksh[3]);
        if kh > h + 2 * padding.0 || kw > w + 2 * padding.1 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding.0,
                w + 2 * padding.1
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_err("conv2d bias", &b.shape(), &[cout]));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            ho: (h + 2 * padding.0 - kh) / stride.0 + 1,
            wo: (w + 2 * padding.1 - kw) / stride.1 + 1,
        };
        let out = {
            let mut data = vec![0.0; cout * geom.ho * geom.wo];
            if let Some(b) = bias {
                let bv = b.value();
                for (co, plane) in data.chunks_mut(geom.ho * geom.wo).enumerate() {
                    plane.iter_mut().for_each(|x| *x = bv.data()[co]);
                }
            }
            conv2d_forward(&geom, self.value().data(), kernel.value().data(), &mut data);
            Tensor::new(vec![cout, geom.ho, geom.wo], data)?
        };
        let rg = self.requires_grad() || kernel.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        self.tape.push(
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            rg,
            "conv2d",
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().clone().reshape(shape)?;
        self.tape.push(out, Op::Reshape { a: self.id }, self.requires_grad(), "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let mut strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let total: usize = shape.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        for _ in 0..total {
            map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        self.gather(out_shape, map, "permute")
    }

    /// Rows of the leading axis, in the given order (repeats allowed).
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let lead = *shape.first().ok_or_else(|| Error::InvalidArgument("index_select on scalar".into()))?;
        let inner: usize = shape[1..].iter().product();
        let mut map = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= lead {
                return Err(Error::InvalidArgument(format!("index {i} out of range {lead}")));
            }
            map.extend(i * inner..(i + 1) * inner);
        }
        let mut out_shape = vec![indices.len()];
        out_shape.extend_from_slice(&shape[1..]);
        self.gather(out_shape, map, "index_select")
    }

    /// Rows `start..end` of the leading axis.
    pub fn narrow(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..end).collect();
        self.index_select(&idx)
    }

    /// Entries `start..end` of the last axis.
    pub fn narrow_last(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let w = *shape.last().ok_or_else(|| Error::InvalidArgument("narrow_last on scalar".into()))?;
        if start > end || end > w {
            return Err(Error::InvalidArgument(format!("range {start}..{end} outside axis of {w}")));
        }
        let rows = self.numel() / w.max(1);
        let mut map = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            map.extend(r * w + start..r * w + end);
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(end - start);
        self.gather(out_shape, map, "narrow_last")
    }

    fn gather(&self, shape: Vec<usize>, map: Vec<usize>, name: &'static str) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            Tensor::new(shape, map.iter().map(|&i| v.data()[i]).collect())?
        };
        self.tape.push(out, Op::Gather { a: self.id, map }, self.requires_grad(), name)
    }

    /// Concatenation along the last axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let tape = first.tape;
        let lead_shape = first.shape();
        let lead = &lead_shape[..lead_shape.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            p.same_tape(first);
            let s = p.shape();
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(shape_err("concat", &lead_shape, &s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for r in 0..rows {
                for (v, &w) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
            "concat",
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum { a: self.id }, self.requires_grad(), "sum")
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// `Σ self_i · weights_i` for constant weights.
    pub fn dot_const(&self, weights: Vec<f64>) -> Result<Var<'t>> {
        if weights.len() != self.numel() {
            return Err(shape_err("dot_const", &self.shape(), &[weights.len()]));
        }
        let s = self.value().data().iter().zip(&weights).map(|(a, w)| a * w).sum();
        self.tape.push(
            Tensor::scalar(s),
            Op::Dot { a: self.id, weights },
            self.requires_grad(),
            "dot_const",
        )
    }

    /// Zeroes entries of a square matrix where `mask` is false, then
    /// renormalises each row to sum to one.
    pub fn mask_renorm(&self, mask: &[bool]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != shape[1] || mask.len() != shape[0] * shape[1] {
            return Err(shape_err("mask_renorm", &shape, &[mask.len()]));
        }
        let n = shape[0];
        let maskf: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let out = {
            let v = self.value();
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                let s: f64 = (0..n).map(|j| v.data()[i * n + j] * maskf[i * n + j]).sum();
                if s <= 0.0 {
                    return Err(Error::InvalidArgument(format!("mask removes all weight from row {i}")));
                }
                for j in 0..n {
                    data[i * n + j] = v.data()[i * n + j] * maskf[i * n + j] / s;
                }
            }
            Tensor::new(shape, data)?
        };
        self.tape.push(
            out,
            Op::MaskRenorm {
                a: self.id,
                mask: maskf,
                n,
            },
            self.requires_grad(),
            "mask_renorm",
        )
    }

    /// Reverse pass from a scalar. Clears the tape.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let Inner { nodes, params } = std::mem::take(&mut *self.tape.inner.borrow_mut());
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for i in (0..=self.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        let mut params: Vec<(ParamId, usize)> = params.into_iter().collect();
        params.sort();
        Ok(Gradients { leaves, params })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]))
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            b_batched,
            m,
            k,
            n,
        } => {
            let (ad, bd) = (nodes[a].value.data(), nodes[b].value.data());
            if let Some(da) = acc(nodes, grads, a) {
                for bi in 0..batch {
                    let bs = if b_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let das = &mut da[bi * m * k..(bi + 1) * m * k];
                    if ta {
                        gemm(k, m, n, bs, tb, gs, true, das);
                    } else {
                        gemm(m, k, n, gs, false, bs, !tb, das);
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, b) {
                for bi in 0..batch {
                    let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let dbs = if b_batched { &mut db[bi * k * n..(bi + 1) * k * n] } else { &mut db[..] };
                    if tb {
                        gemm(n, k, m, gs, true, as_, ta, dbs);
                    } else {
                        gemm(k, n, m, as_, !ta, gs, false, dbs);
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            if let Some(da) = acc(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(db) = acc(nodes, grads, b) {
                let inner = db.len();
                for chunk in g.chunks(inner) {
                    db.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            let inner = bv.len();
            if let Some(da) = acc(nodes, grads, a) {
                for (r, chunk) in g.chunks(inner).enumerate() {
                    for j in 0..inner {
                        da[r * inner + j] += chunk[j] * bv[j];
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, b) {
                for (r, chunk) in g.chunks(inner).enumerate() {
                    for j in 0..inner {
                        db[j] += chunk[j] * av[r * inner + j];
                    }
                }
            }
        }
        &Op::Scale { a, s } => {
            if let Some(da) = acc(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
        }
        &Op::Relu { a } => {
            let av = nodes[a].value.data();
            if let Some(da) = acc(nodes, grads, a) {
                for j in 0..g.len() {
                    if av[j] > 0.0 {
                        da[j] += g[j];
                    }
                }
            }
        }
        &Op::Softmax { a } => {
            let n = *out.shape().last().unwrap();
            let y = out.data();
            if let Some(da) = acc(nodes, grads, a) {
                for r in 0..y.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        da[r * n + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax { a } => {
            let n = *out.shape().last().unwrap();
            let y = out.data();
            if let Some(da) = acc(nodes, grads, a) {
                for r in 0..y.len() / n {
                    let gs = &g[r * n..(r + 1) * n];
                    let gsum: f64 = gs.iter().sum();
                    for j in 0..n {
                        da[r * n + j] += gs[j] - y[r * n + j].exp() * gsum;
                    }
                }
            }
        }
        Op::LayerNorm {
            a,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = *out.shape().last().unwrap();
            let gv = nodes[*gain].value.data();
            if let Some(dg) = acc(nodes, grads, *gain) {
                for (r, gs) in g.chunks(n).enumerate() {
                    for j in 0..n {
                        dg[j] += gs[j] * xhat[r * n + j];
                    }
                }
            }
            if let Some(db) = acc(nodes, grads, *bias) {
                for gs in g.chunks(n) {
                    db.iter_mut().zip(gs).for_each(|(x, y)| *x += y);
                }
            }
            if let Some(da) = acc(nodes, grads, *a) {
                for (r, gs) in g.chunks(n).enumerate() {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        let dxh = gs[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        let dxh = gs[j] * gv[j];
                        da[r * n + j] += rstd[r] * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
        }
        &Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            if let Some(b) = bias {
                if let Some(db) = acc(nodes, grads, b) {
                    for (co, plane) in g.chunks(geom.ho * geom.wo).enumerate() {
                        db[co] += plane.iter().sum::<f64>();
                    }
                }
            }
            let iv = nodes[input].value.data();
            let kv = nodes[kernel].value.data();
            let need_i = nodes[input].requires_grad;
            let need_k = nodes[kernel].requires_grad;
            let mut di = need_i.then(|| grads[input].take().unwrap_or_else(|| vec![0.0; iv.len()]));
            let mut dk = need_k.then(|| grads[kernel].take().unwrap_or_else(|| vec![0.0; kv.len()]));
            conv2d_backward(&geom, iv, kv, g, di.as_deref_mut(), dk.as_deref_mut());
            if let Some(di) = di {
                grads[input] = Some(di);
            }
            if let Some(dk) = dk {
                grads[kernel] = Some(dk);
            }
        }
        &Op::Reshape { a } => {
            if let Some(da) = acc(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Gather { a, map } => {
            if let Some(da) = acc(nodes, grads, *a) {
                for (gi, &src) in g.iter().zip(map) {
                    da[src] += gi;
                }
            }
        }
        Op::Concat { parts } => {
            let widths: Vec<usize> = parts
                .iter()
                .map(|&p| *nodes[p].value.shape().last().unwrap())
                .collect();
            let total: usize = widths.iter().sum();
            let rows = g.len() / total.max(1);
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                if let Some(dp) = acc(nodes, grads, p) {
                    for r in 0..rows {
                        for j in 0..w {
                            dp[r * w + j] += g[r * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        &Op::Sum { a } => {
            if let Some(da) = acc(nodes, grads, a) {
                da.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Dot { a, weights } => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(weights).for_each(|(x, w)| *x += g[0] * w);
            }
        }
        Op::MaskRenorm { a, mask, n } => {
            let n = *n;
            let av = nodes[*a].value.data();
            let y = out.data();
            if let Some(da) = acc(nodes, grads, *a) {
                for i in 0..n {
                    let s: f64 = (0..n).map(|j| av[i * n + j] * mask[i * n + j]).sum();
                    let dot: f64 = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                    for j in 0..n {
                        da[i * n + j] += mask[i * n + j] * (g[i * n + j] - dot) / s;
                    }
                }
            }
        }
        Op::ScalarWithGrad { a, grad } => {
            if let Some(da) = acc(nodes, grads, *a) {
                da.iter_mut().zip(grad).for_each(|(x, d)| *x += g[0] * d);
            }
        }
    }
}
