//! Encoder attention: intra-channel self-attention, the inter-channel
//! similarity matrix, similarity-gated cross-channel attention, the
//! learned-weight cross-channel baseline and per-speaker channel averaging.

use crate::cf::ChannelAssignment;
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::signal::{ChannelAxis, FeatureStack};
use crate::tensor::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Row-stochastic `C'×C'` channel similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    /// Accepts a square tensor whose rows are non-negative and sum to 1 ± 1e-10.
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::InvalidArgument(format!("similarity must be square, got {s:?}")));
        }
        let n = s[0];
        let data = t.into_data();
        for (i, row) in data.chunks(n.max(1)).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| *v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidArgument(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Self { n, data })
    }

    /// Normalises each row of a non-negative affinity matrix.
    pub fn from_affinity(rows: &[Vec<f64>]) -> Result<Self> {
        let mut normed = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let s: f64 = r.iter().sum();
            if s <= 0.0 {
                return Err(Error::InvalidArgument(format!("row {i} has no mass")));
            }
            normed.push(r.iter().map(|v| v / s).collect());
        }
        Self::new(Tensor::from_rows(&normed)?)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.data.clone()).expect("square")
    }
}

/// Which channel pairs may exchange information in cross-channel attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    n: usize,
    allowed: Vec<bool>,
}

impl ChannelMask {
    pub fn all(n: usize) -> Self {
        Self {
            n,
            allowed: vec![true; n * n],
        }
    }

    /// Symmetric mask with a true diagonal.
    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(Error::InvalidArgument("mask must be n×n".into()));
        }
        for i in 0..n {
            if !allowed[i * n + i] {
                return Err(Error::InvalidArgument(format!("mask diagonal {i} is false")));
            }
            for j in 0..i {
                if allowed[i * n + j] != allowed[j * n + i] {
                    return Err(Error::InvalidArgument(format!("mask not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, allowed })
    }

    /// Channels may attend across each other only when they share a kept label.
    pub fn from_assignment(a: &ChannelAssignment) -> Self {
        let n = a.labels.len();
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[i * n + j] = i == j || (a.labels[i] == a.labels[j] && a.kept.contains(&a.labels[i]));
            }
        }
        Self { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Same mask under a relabelling `perm` where new channel `i` is old channel `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[i * n + j] = self.allowed[perm[i] * n + perm[j]];
            }
        }
        Self { n, allowed }
    }
}

/// Row-softmaxed frame-averaged Gram matrix of `x: [C, T, d]`, scaled by `1/√d_k`.
pub fn similarity_var<'t>(x: &Var<'t>, d_k: usize) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("similarity expects [C, T, d], got {s:?}")));
    }
    let (c, t, d) = (s[0], s[1], s[2]);
    let flat = x.reshape(&[c, t * d])?;
    flat.matmul_t(&flat)?
        .scale(1.0 / (t as f64 * (d_k as f64).sqrt()))?
        .softmax()
}

/// Inter-channel similarity of a decoupled feature stack.
pub fn similarity_matrix(x: &FeatureStack, d_k: usize) -> Result<SimilarityMatrix> {
    if x.axis != ChannelAxis::Decoupled {
        return Err(Error::InvalidArgument("similarity expects decoupled channels".into()));
    }
    similarity_of(&x.data, d_k)
}

pub(crate) fn similarity_of(x: &Tensor, d_k: usize) -> Result<SimilarityMatrix> {
    if x.shape().first().is_none_or(|&c| c < 2) {
        return Err(Error::InvalidArgument("similarity needs at least two channels".into()));
    }
    let tape = Tape::new();
    let z = similarity_var(&tape.constant(x.clone()), d_k)?;
    let t = z.value().clone();
    SimilarityMatrix::new(t)
}

/// Pre-norm attention followed by a pre-norm feed-forward, both residual.
#[derive(Clone, Debug)]
pub struct AttentionSublayer {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl AttentionSublayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ff: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d_model)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, ff, rng)?,
        })
    }

    fn finish<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>, attended: &Var<'t>) -> Result<Var<'t>> {
        let x1 = x.add(&attended.dropout()?)?;
        let h = self.ffn.forward(tape, store, &self.ffn_norm.forward(tape, store, &x1)?)?;
        x1.add(&h.dropout()?)
    }
}

/// Self-attention over frames within every channel independently.
pub fn intra_attention<'t>(tape: &'t Tape, store: &ParamStore, layer: &AttentionSublayer, x: &Var<'t>) -> Result<Var<'t>> {
    let xn = layer.norm.forward(tape, store, x)?;
    let a = layer.attn.forward(tape, store, &xn, &xn, None)?;
    layer.finish(tape, store, x, &a)
}

fn mix_channels<'t>(weights: &Var<'t>, xn: &Var<'t>) -> Result<Var<'t>> {
    let s = xn.shape();
    weights.matmul(&xn.reshape(&[s[0], s[1] * s[2]])?)?.reshape(&s)
}

/// Similarity-gated cross-channel attention.
///
/// Queries come from each channel itself; keys and values from the mixture
/// `Σ_i z_ci · X_i`, with `Z` computed from this sublayer's normalised input.
/// With a mask, disallowed entries of `Z` are zeroed and rows renormalised.
pub fn cross_attention<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    layer: &AttentionSublayer,
    x: &Var<'t>,
    mask: Option<&ChannelMask>,
) -> Result<Var<'t>> {
    let xn = layer.norm.forward(tape, store, x)?;
    let c = xn.shape()[0];
    let mut z = similarity_var(&xn, layer.attn.d_k())?;
    if let Some(m) = mask {
        if m.len() != c {
            return Err(Error::Shape {
                op: "cross_attention mask",
                lhs: vec![m.len()],
                rhs: vec![c],
            });
        }
        z = z.mask_renorm(m.as_slice())?;
    }
    let mixed = mix_channels(&z, &xn)?;
    let a = layer.attn.forward(tape, store, &xn, &mixed, None)?;
    layer.finish(tape, store, x, &a)
}

/// Cross-channel attention whose mixture weights are learned logits `P`,
/// row-softmaxed at use time.
pub fn mct_cross_attention<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    layer: &AttentionSublayer,
    mix_logits: ParamId,
    x: &Var<'t>,
) -> Result<Var<'t>> {
    let p = tape.param(store, mix_logits);
    let c = x.shape()[0];
    if p.shape() != [c, c] {
        return Err(Error::Shape {
            op: "mct_cross_attention",
            lhs: p.shape(),
            rhs: vec![c, c],
        });
    }
    let xn = layer.norm.forward(tape, store, x)?;
    let mixed = mix_channels(&p.softmax()?, &xn)?;
    let a = layer.attn.forward(tape, store, &xn, &mixed, None)?;
    layer.finish(tape, store, x, &a)
}

/// Cross-channel variant of an encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossVariant {
    /// Similarity-gated mixing.
    M2a,
    /// Learned fixed mixing weights.
    Mct,
    /// No cross-channel layer.
    None,
}

#[derive(Clone, Debug)]
pub enum CrossLayer {
    M2a(AttentionSublayer),
    Mct { layer: AttentionSublayer, mix_logits: ParamId },
}

/// Intra-channel sublayer followed by an optional cross-channel sublayer.
#[derive(Clone, Debug)]
pub struct M2ABlock {
    pub intra: AttentionSublayer,
    pub cross: Option<CrossLayer>,
}

impl M2ABlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ff: usize,
        variant: CrossVariant,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let intra = AttentionSublayer::new(store, &format!("{name}.intra"), d_model, heads, ff, rng)?;
        let cross = match variant {
            CrossVariant::None => None,
            CrossVariant::M2a => Some(CrossLayer::M2a(AttentionSublayer::new(
                store,
                &format!("{name}.cross"),
                d_model,
                heads,
                ff,
                rng,
            )?)),
            CrossVariant::Mct => {
                let layer = AttentionSublayer::new(store, &format!("{name}.cross"), d_model, heads, ff, rng)?;
                let mix_logits = store.add(format!("{name}.cross.mix"), Tensor::zeros(&[channels, channels]))?;
                Some(CrossLayer::Mct { layer, mix_logits })
            }
        };
        Ok(Self { intra, cross })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: &Var<'t>,
        mask: Option<&ChannelMask>,
    ) -> Result<Var<'t>> {
        let h = intra_attention(tape, store, &self.intra, x)?;
        match &self.cross {
            None => Ok(h),
            Some(CrossLayer::M2a(layer)) => cross_attention(tape, store, layer, &h, mask),
            Some(CrossLayer::Mct { layer, mix_logits }) => {
                if mask.is_some() {
                    return Err(Error::InvalidArgument(
                        "learned-weight cross attention cannot follow clustering".into(),
                    ));
                }
                mct_cross_attention(tape, store, layer, *mix_logits, &h)
            }
        }
    }
}

/// Runs blocks in sequence.
pub fn run_blocks<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    blocks: &[M2ABlock],
    x: &Var<'t>,
    mask: Option<&ChannelMask>,
) -> Result<Var<'t>> {
    let mut h = *x;
    for b in blocks {
        h = b.forward(tape, store, &h, mask)?;
    }
    Ok(h)
}

/// Averages `x: [C', T, d]` over the channels of each kept label, in the
/// assignment's kept order, giving one `[T, d]` stream per speaker.
pub fn speaker_average<'t>(x: &Var<'t>, assignment: &ChannelAssignment) -> Result<Vec<Var<'t>>> {
    let s = x.shape();
    if s.len() != 3 || s[0] != assignment.labels.len() {
        return Err(Error::Shape {
            op: "speaker_average",
            lhs: s,
            rhs: vec![assignment.labels.len()],
        });
    }
    let (c, t, d) = (s[0], s[1], s[2]);
    let n = assignment.kept.len();
    let mut avg = Tensor::zeros(&[n, c]);
    for (row, &label) in assignment.kept.iter().enumerate() {
        let members: Vec<usize> = (0..c).filter(|&i| assignment.labels[i] == label).collect();
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!("kept label {label} has no channels")));
        }
        for &i in &members {
            avg.set(&[row, i], 1.0 / members.len() as f64);
        }
    }
    let tape = x.tape();
    let pooled = tape.constant(avg).matmul(&x.reshape(&[c, t * d])?)?;
    (0..n)
        .map(|i| pooled.index_select(&[i])?.reshape(&[t, d]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn two_channel_closed_form() {
        // Channels [1, 2] and [3, 0] with one frame: Gram = [[5, 3], [3, 9]].
        let x = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let z = similarity_of(&x, 4).unwrap();
        let p = 1.0 / (1.0 + ((3.0 - 5.0) / 2.0f64).exp());
        assert!((z.get(0, 0) - p).abs() < 1e-15);
        let q = 1.0 / (1.0 + ((3.0 - 9.0) / 2.0f64).exp());
        assert!((z.get(1, 1) - q).abs() < 1e-15);
    }

    #[test]
    fn similarity_rejects_bad_rows() {
        assert!(SimilarityMatrix::new(Tensor::from_rows(&[vec![0.5, 0.6], vec![0.5, 0.5]]).unwrap()).is_err());
        assert!(SimilarityMatrix::new(Tensor::zeros(&[2, 3])).is_err());
        assert!(similarity_of(&Tensor::zeros(&[1, 2, 2]), 1).is_err());
    }

    #[test]
    fn mask_from_assignment() {
        let a = ChannelAssignment {
            labels: vec![0, 1, 0, 2],
            label_scores: vec![1.0, 0.0, -5.0],
            kept: vec![0, 1],
            n_speakers: 2,
        };
        let m = ChannelMask::from_assignment(&a);
        assert!(m.is_allowed(0, 2) && m.is_allowed(2, 0));
        assert!(!m.is_allowed(0, 1) && !m.is_allowed(3, 0));
        assert!(m.is_allowed(3, 3));
        assert!(ChannelMask::new(2, vec![true, true, false, true]).is_err());
        assert!(ChannelMask::new(2, vec![false, false, false, true]).is_err());
    }

    #[test]
    fn speaker_average_orders_by_kept() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 1, 2], vec![1.0, 1.0, 3.0, 5.0, 10.0, 20.0]).unwrap());
        let a = ChannelAssignment {
            labels: vec![0, 0, 1],
            label_scores: vec![-1.0, 2.0],
            kept: vec![1, 0],
            n_speakers: 2,
        };
        let out = speaker_average(&x, &a).unwrap();
        assert_eq!(out[0].value().data(), &[10.0, 20.0]);
        assert_eq!(out[1].value().data(), &[2.0, 3.0]);
    }

    #[test]
    fn mct_starts_uniform_and_rejects_masks() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let block = M2ABlock::new(&mut store, "b", 4, 2, 8, CrossVariant::Mct, 3, &mut rng).unwrap();
        let Some(CrossLayer::Mct { mix_logits, .. }) = &block.cross else {
            panic!("expected learned mixing")
        };
        let tape = Tape::new();
        let p = tape.param(&store, *mix_logits).softmax().unwrap();
        assert!(p.value().data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let x = tape.constant(Tensor::zeros(&[3, 2, 4]));
        assert!(block.forward(&tape, &store, &x, Some(&ChannelMask::all(3))).is_err());
        assert_eq!(block.forward(&tape, &store, &x, None).unwrap().shape(), vec![3, 2, 4]);
    }
}
