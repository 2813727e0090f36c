//! Per-speaker transformer decoder.
//!
//! Token ids `1..=V` are alphabet tokens. Id 0 doubles as the start and end
//! marker on the decoder side; on the CTC side it is the blank.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::layers::{causal_mask, sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{uniform_init, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Start-of-sequence and end-of-sequence id.
pub const BOUNDARY: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Alphabet size `V`; the output layer has `V + 1` classes.
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
    pub layers: usize,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    embed: ParamId,
    blocks: Vec<DecoderBlock>,
    final_norm: LayerNorm,
    out: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, config: DecoderConfig, rng: &mut Rng) -> Result<Self> {
        if config.vocab == 0 {
            return Err(invalid("decoder vocabulary must be non-empty"));
        }
        let d = config.d_model;
        let embed = store.add(format!("{name}.embed"), uniform_init(&[config.vocab + 1, d], 1, rng))?;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{name}.block{i}");
            blocks.push(DecoderBlock {
                self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), d)?,
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, config.heads, rng)?,
                cross_norm: LayerNorm::new(store, &format!("{p}.cross_norm"), d)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, config.heads, rng)?,
                ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, config.ff, rng)?,
            });
        }
        Ok(Self {
            config,
            embed,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d)?,
            out: Linear::new(store, &format!("{name}.out"), d, config.vocab + 1, rng)?,
            blocks,
        })
    }

    /// Logits `[L + 1, V + 1]` for the input `[start, y_1 … y_L]` attending to `enc: [T', d]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, enc: &Var<'t>, targets: &[u32]) -> Result<Var<'t>> {
        let es = enc.shape();
        if es.len() != 2 || es[0] == 0 || es[1] != self.config.d_model {
            return Err(invalid(format!(
                "decoder expects a non-empty [T', {}] encoder sequence, got {es:?}",
                self.config.d_model
            )));
        }
        let mut input = Vec::with_capacity(targets.len() + 1);
        input.push(BOUNDARY as usize);
        for &t in targets {
            if t == BOUNDARY || t as usize > self.config.vocab {
                return Err(invalid(format!("token {t} outside 1..={}", self.config.vocab)));
            }
            input.push(t as usize);
        }
        let len = input.len();
        let d = self.config.d_model;
        let pos = tape.constant(sinusoidal_positions(len, d));
        let mut h = tape
            .param(store, self.embed)
            .index_select(&input)?
            .add(&pos)?
            .dropout()?
            .reshape(&[1, len, d])?;
        let mem = enc.reshape(&[1, es[0], d])?;
        let mask = tape.constant(causal_mask(len));
        for b in &self.blocks {
            let n = b.self_norm.forward(tape, store, &h)?;
            h = h.add(&b.self_attn.forward(tape, store, &n, &n, Some(&mask))?.dropout()?)?;
            let n = b.cross_norm.forward(tape, store, &h)?;
            h = h.add(&b.cross_attn.forward(tape, store, &n, &mem, None)?.dropout()?)?;
            let n = b.ffn_norm.forward(tape, store, &h)?;
            h = h.add(&b.ffn.forward(tape, store, &n)?.dropout()?)?;
        }
        let h = self.final_norm.forward(tape, store, &h)?.reshape(&[len, d])?;
        self.out.forward(tape, store, &h)
    }

    /// Autoregressive argmax decoding until the end marker or `max_len` tokens.
    pub fn greedy_decode(&self, store: &ParamStore, enc: &Tensor, max_len: usize) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        while out.len() < max_len {
            let tape = Tape::new();
            let logits = self.forward(&tape, store, &tape.constant(enc.clone()), &out)?;
            let v = logits.value();
            let width = self.config.vocab + 1;
            let last = &v.data()[out.len() * width..(out.len() + 1) * width];
            let next = argmax(last) as u32;
            if next == BOUNDARY {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest entry; the first one on ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
