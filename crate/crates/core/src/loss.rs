//! CTC, label-smoothed attention loss and permutation-invariant assembly.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, BOUNDARY};
use crate::error::{invalid, Error, Result};
use crate::layers::Linear;
use crate::tensor::tape::log_sum_exp;
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the CTC term; the attention term gets `1 − lambda`.
    pub lambda: f64,
    pub smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            smoothing: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(invalid(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        Ok(())
    }
}

/// Frames needed to emit `target`: one per token plus a blank between repeats.
pub fn ctc_min_frames(target: &[u32]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-probability of `target` summed over all CTC alignments of
/// `logits: [T, V + 1]`, with class 0 the blank.
pub fn ctc_loss<'t>(logits: &Var<'t>, target: &[u32]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(invalid(format!("ctc expects [T, V + 1] logits, got {s:?}")));
    }
    let (frames, classes) = (s[0], s[1]);
    if let Some(&bad) = target.iter().find(|&&t| t == 0 || t as usize >= classes) {
        return Err(invalid(format!("ctc target token {bad} outside 1..{classes}")));
    }
    let required = ctc_min_frames(target);
    if frames < required.max(1) {
        return Err(Error::TargetTooLong {
            target_len: target.len(),
            required,
            frames,
        });
    }
    let logp = logits.log_softmax()?;
    let (value, grad) = {
        let lp = logp.value();
        ctc_forward_backward(lp.data(), frames, classes, target)
    };
    logits.tape().scalar_with_grad(&logp, value, grad)
}

/// Loss and its gradient with respect to the log-probabilities.
fn ctc_forward_backward(lp: &[f64], frames: usize, classes: usize, target: &[u32]) -> (f64, Vec<f64>) {
    let ninf = f64::NEG_INFINITY;
    // Extended label sequence: blank, y1, blank, y2, …, blank.
    let ext: Vec<usize> = std::iter::once(0)
        .chain(target.iter().flat_map(|&t| [t as usize, 0]))
        .collect();
    let n = ext.len();
    let at = |t: usize, k: usize| lp[t * classes + k];
    let skip = |s: usize| s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * n];
    alpha[0] = at(0, ext[0]);
    if n > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..n {
            let mut terms = [alpha[(t - 1) * n + s], ninf, ninf];
            if s >= 1 {
                terms[1] = alpha[(t - 1) * n + s - 1];
            }
            if skip(s) {
                terms[2] = alpha[(t - 1) * n + s - 2];
            }
            alpha[t * n + s] = log_sum_exp(&terms) + at(t, ext[s]);
        }
    }
    let mut beta = vec![ninf; frames * n];
    let last = frames - 1;
    beta[last * n + n - 1] = at(last, ext[n - 1]);
    if n > 1 {
        beta[last * n + n - 2] = at(last, ext[n - 2]);
    }
    for t in (0..last).rev() {
        for s in 0..n {
            let mut terms = [beta[(t + 1) * n + s], ninf, ninf];
            if s + 1 < n {
                terms[1] = beta[(t + 1) * n + s + 1];
            }
            if s + 2 < n && skip(s + 2) {
                terms[2] = beta[(t + 1) * n + s + 2];
            }
            beta[t * n + s] = log_sum_exp(&terms) + at(t, ext[s]);
        }
    }
    let tail = if n > 1 {
        [alpha[last * n + n - 1], alpha[last * n + n - 2]]
    } else {
        [alpha[last * n], ninf]
    };
    let log_p = log_sum_exp(&tail);
    // d(−log p)/d lp[t,k] = −Σ_{s: ext[s]=k} α_t(s)β_t(s) / (p · y_t(k)), in log space.
    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..n {
            let ab = alpha[t * n + s] + beta[t * n + s];
            if ab > ninf {
                grad[t * classes + ext[s]] -= (ab - at(t, ext[s]) - log_p).exp();
            }
        }
    }
    (-log_p, grad)
}

/// Label-smoothed cross-entropy of decoder `logits: [L + 1, V + 1]` against
/// `target` followed by the end marker, averaged over positions.
pub fn attention_loss<'t>(logits: &Var<'t>, target: &[u32], smoothing: f64) -> Result<Var<'t>> {
    let s = logits.shape();
    let len = target.len() + 1;
    if s.len() != 2 || s[0] != len {
        return Err(Error::Shape {
            op: "attention_loss",
            lhs: s,
            rhs: vec![len],
        });
    }
    let classes = s[1];
    let off = smoothing / classes as f64;
    let mut weights = vec![-off / len as f64; len * classes];
    for (pos, &tok) in target.iter().chain(std::iter::once(&BOUNDARY)).enumerate() {
        if tok as usize >= classes {
            return Err(invalid(format!("target token {tok} outside vocabulary")));
        }
        weights[pos * classes + tok as usize] -= (1.0 - smoothing) / len as f64;
    }
    logits.log_softmax()?.dot_const(weights)
}

/// Outcome of permutation-invariant loss assembly.
#[derive(Debug)]
pub struct PitResult<'t> {
    /// `permutation[i]` is the reference assigned to output stream `i`.
    pub permutation: Vec<usize>,
    /// CTC loss of output `i` against reference `j`.
    pub per_pair_ctc: Vec<Vec<f64>>,
    pub total: Var<'t>,
    /// Unweighted CTC and attention sums under the chosen permutation.
    pub ctc: f64,
    pub att: f64,
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Lexicographically first permutation minimising `Σ_i cost[i][π(i)]`.
pub fn best_permutation(cost: &[Vec<f64>]) -> Vec<usize> {
    let mut best = None::<(f64, Vec<usize>)>;
    for p in permutations(cost.len()) {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, p));
        }
    }
    best.map(|(_, p)| p).unwrap_or_default()
}

/// Picks the output-to-reference assignment by CTC alone, then adds the
/// weighted attention loss for that assignment.
pub fn pit_loss<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    ctc_head: &Linear,
    decoder: &Decoder,
    enc_outputs: &[Var<'t>],
    refs: &[Vec<u32>],
    cfg: &LossConfig,
) -> Result<PitResult<'t>> {
    cfg.validate()?;
    let n = enc_outputs.len();
    if n != refs.len() || n == 0 {
        return Err(invalid(format!("{n} output streams for {} references", refs.len())));
    }
    if n > 4 {
        return Err(invalid("permutation search is limited to 4 speakers"));
    }
    let mut ctc = Vec::with_capacity(n);
    for enc in enc_outputs {
        let logits = ctc_head.forward(tape, store, enc)?;
        let row = refs.iter().map(|r| ctc_loss(&logits, r)).collect::<Result<Vec<_>>>()?;
        ctc.push(row);
    }
    let per_pair_ctc: Vec<Vec<f64>> = ctc.iter().map(|r| r.iter().map(|v| v.item()).collect()).collect();
    let permutation = best_permutation(&per_pair_ctc);
    let mut terms = Vec::with_capacity(n);
    let (mut ctc_sum, mut att_sum) = (0.0, 0.0);
    for (i, &j) in permutation.iter().enumerate() {
        let logits = decoder.forward(tape, store, &enc_outputs[i], &refs[j])?;
        let att = attention_loss(&logits, &refs[j], cfg.smoothing)?;
        ctc_sum += per_pair_ctc[i][j];
        att_sum += att.item();
        terms.push(ctc[i][j].scale(cfg.lambda)?.add(&att.scale(1.0 - cfg.lambda)?)?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    Ok(PitResult {
        permutation,
        per_pair_ctc,
        total,
        ctc: ctc_sum,
        att: att_sum,
    })
}

/// Levenshtein distance between token sequences.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_frame_single_path() {
        let tape = Tape::new();
        let l = tape.leaf(logits(&[vec![0.3, -0.2]]));
        let loss = ctc_loss(&l, &[1]).unwrap().item();
        let p1 = (-0.2f64).exp() / (0.3f64.exp() + (-0.2f64).exp());
        assert!((loss + p1.ln()).abs() < 1e-14);
    }

    #[test]
    fn two_frames_three_paths() {
        let tape = Tape::new();
        let rows = vec![vec![0.1, 0.7], vec![-0.4, 0.2]];
        let l = tape.leaf(logits(&rows));
        let loss = ctc_loss(&l, &[1]).unwrap().item();
        let p = |r: &Vec<f64>| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            (r[0].exp() / z, r[1].exp() / z)
        };
        let ((b1, a1), (b2, a2)) = (p(&rows[0]), p(&rows[1]));
        assert!((loss + (a1 * a2 + a1 * b2 + b1 * a2).ln()).abs() < 1e-14);
    }

    #[test]
    fn too_long_is_typed_error() {
        let tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            ctc_loss(&l, &[1, 1]),
            Err(Error::TargetTooLong {
                required: 3,
                frames: 2,
                ..
            })
        ));
        assert!(ctc_loss(&l, &[3]).is_err());
    }

    #[test]
    fn attention_loss_limits() {
        let tape = Tape::new();
        let uniform = tape.leaf(Tensor::zeros(&[2, 4]));
        let l = attention_loss(&uniform, &[2], 0.0).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-14);
        let mut sharp = Tensor::zeros(&[2, 4]);
        sharp.set(&[0, 2], 60.0);
        sharp.set(&[1, 0], 60.0);
        let l = attention_loss(&tape.leaf(sharp), &[2], 0.0).unwrap().item();
        assert!(l.abs() < 1e-20);
    }

    #[test]
    fn smoothed_hand_case() {
        // Two classes, one target token then the end marker, smoothing 0.1.
        let tape = Tape::new();
        let rows = vec![vec![0.0, 1.0], vec![2.0, 0.0]];
        let got = attention_loss(&tape.leaf(logits(&rows)), &[1], 0.1).unwrap().item();
        let lsm = |r: &Vec<f64>, k: usize| r[k] - (r[0].exp() + r[1].exp()).ln();
        let pos0 = -(0.95 * lsm(&rows[0], 1) + 0.05 * lsm(&rows[0], 0));
        let pos1 = -(0.95 * lsm(&rows[1], 0) + 0.05 * lsm(&rows[1], 1));
        assert!((got - (pos0 + pos1) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn permutation_order_and_ties() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(3)[1], vec![0, 2, 1]);
        assert_eq!(best_permutation(&[vec![1.0, 1.0], vec![1.0, 1.0]]), vec![0, 1]);
        assert_eq!(best_permutation(&[vec![5.0, 1.0], vec![1.0, 5.0]]), vec![1, 0]);
    }

    #[test]
    fn levenshtein() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[4, 4]), 2);
        assert_eq!(edit_distance(&[1, 2], &[2, 1]), 2);
    }

    #[test]
    fn config_bounds() {
        assert!(LossConfig { lambda: 1.2, smoothing: 0.1 }.validate().is_err());
        assert!(LossConfig { lambda: 0.3, smoothing: 1.0 }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
