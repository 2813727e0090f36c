//! Parameterised building blocks shared by the encoder and decoder.

use crate::error::{Error, Result};
use crate::tensor::{uniform_init, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Value of a large negative logit used to mask attention scores.
pub(crate) const MASKED: f64 = -1e30;

/// `y = x·W + b` over the last axis, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), uniform_init(&[input, output], input, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[output]))?,
            input,
            output,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        if shape.len() == 1 {
            return x.reshape(&[1, shape[0]])?.matmul(&w)?.add(&b)?.reshape(&[self.output]);
        }
        x.matmul(&w)?.add(&b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&tape.param(store, self.gain), &tape.param(store, self.bias))
    }
}

/// Position-wise `d → ff → d` network with a ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, ff, rng)?,
            down: Linear::new(store, &format!("{name}.down"), ff, d, rng)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.up.forward(tape, store, x)?.relu()?;
        self.down.forward(tape, store, &h)
    }
}

/// Scaled dot-product attention with `heads` heads of width `d / heads`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.wq"), d_model, d_model, rng)?,
            k: Linear::new(store, &format!("{name}.wk"), d_model, d_model, rng)?,
            v: Linear::new(store, &format!("{name}.wv"), d_model, d_model, rng)?,
            out: Linear::new(store, &format!("{name}.wo"), d_model, d_model, rng)?,
            heads,
            d_model,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    fn split<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (b, t) = (s[0], s[1]);
        if self.heads == 1 {
            return Ok(*x);
        }
        x.reshape(&[b, t, self.heads, self.d_k()])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * self.heads, t, self.d_k()])
    }

    fn merge<'t>(&self, x: &Var<'t>, b: usize) -> Result<Var<'t>> {
        if self.heads == 1 {
            return Ok(*x);
        }
        let t = x.shape()[1];
        x.reshape(&[b, self.heads, t, self.d_k()])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, self.d_model])
    }

    /// Queries from `q_in: [B, Tq, d]`, keys and values from `kv_in: [B, Tk, d]`.
    /// `mask`, when given, is an additive `[Tq, Tk]` score offset.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        q_in: &Var<'t>,
        kv_in: &Var<'t>,
        mask: Option<&Var<'t>>,
    ) -> Result<Var<'t>> {
        let qs = q_in.shape();
        let ks = kv_in.shape();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.d_model || ks[2] != self.d_model {
            return Err(Error::Shape {
                op: "attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let b = qs[0];
        let q = self.split(&self.q.forward(tape, store, q_in)?)?;
        let k = self.split(&self.k.forward(tape, store, kv_in)?)?;
        let v = self.split(&self.v.forward(tape, store, kv_in)?)?;
        let mut scores = q.matmul_t(&k)?.scale(1.0 / (self.d_k() as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let ctx = scores.softmax()?.matmul(&v)?;
        self.out.forward(tape, store, &self.merge(&ctx, b)?)
    }
}

/// Additive causal mask: position `i` may attend to `j <= i`.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.set(&[i, j], MASKED);
        }
    }
    m
}

/// Sinusoidal position table `[len, d]`: `sin(t / 10000^(2i/d))` in even
/// columns and the matching cosine in odd columns.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, d]);
    for t in 0..len {
        for j in 0..d {
            let i2 = (j / 2 * 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / d as f64);
            pe.set(&[t, j], if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}
