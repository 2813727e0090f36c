use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::train::{load_utterances, Utterance};
use crate::error::Result;
use crate::loss::{best_permutation, edit_distance};
use crate::model::{M2Former, Transcription};
use crate::tensor::ParamStore;

/// Scoring of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    /// `permutation[i]` is the reference slot matched to hypothesis slot `i`;
    /// missing hypotheses or references count as empty sequences.
    pub permutation: Vec<usize>,
    /// Edit distance of each hypothesis slot against its matched reference.
    pub edit_distances: Vec<usize>,
    pub hypotheses: Vec<Vec<u32>>,
    pub references: Vec<Vec<u32>>,
    pub estimated_speakers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Total edits over total reference tokens, attention decoding.
    pub token_error_rate: f64,
    /// `max(0, 1 − token_error_rate)`.
    pub token_accuracy: f64,
    /// Same with greedy CTC decoding.
    pub ctc_token_error_rate: f64,
    pub known_count: bool,
    /// Fraction of utterances whose estimated speaker count is right; only
    /// reported when the count is estimated.
    pub speaker_count_accuracy: Option<f64>,
    pub per_utterance: Vec<UtteranceScore>,
}

/// Matches hypotheses to references by minimum total edit distance.
/// Returns the permutation and the per-slot distances.
pub fn score_utterance(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> (Vec<usize>, Vec<usize>) {
    let n = hyps.len().max(refs.len());
    let empty = Vec::new();
    let slot = |v: &[Vec<u32>], i: usize| v.get(i).unwrap_or(&empty).clone();
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| edit_distance(&slot(hyps, i), &slot(refs, j)) as f64).collect())
        .collect();
    let perm = best_permutation(&cost);
    let dists = perm.iter().enumerate().map(|(i, &j)| cost[i][j] as usize).collect();
    (perm, dists)
}

pub fn evaluate_model(
    model: &M2Former,
    store: &ParamStore,
    cfg: &ExperimentConfig,
    data: &[Utterance],
    known_count: bool,
) -> Result<EvalReport> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let transcripts = transcribe_all(model, store, cfg, data, known_count, workers)?;
    let (mut errors, mut ctc_errors, mut ref_tokens, mut right_count) = (0usize, 0usize, 0usize, 0usize);
    let mut per_utterance = Vec::with_capacity(data.len());
    for (u, tr) in data.iter().zip(transcripts) {
        let (permutation, edit_distances) = score_utterance(&tr.attention, &u.refs);
        let (_, ctc_d) = score_utterance(&tr.ctc, &u.refs);
        errors += edit_distances.iter().sum::<usize>();
        ctc_errors += ctc_d.iter().sum::<usize>();
        ref_tokens += u.refs.iter().map(Vec::len).sum::<usize>();
        right_count += usize::from(tr.speakers == u.refs.len());
        per_utterance.push(UtteranceScore {
            id: u.id.clone(),
            permutation,
            edit_distances,
            hypotheses: tr.attention,
            references: u.refs.clone(),
            estimated_speakers: tr.speakers,
        });
    }
    let denom = ref_tokens.max(1) as f64;
    let ter = errors as f64 / denom;
    Ok(EvalReport {
        token_error_rate: ter,
        token_accuracy: (1.0 - ter).max(0.0),
        ctc_token_error_rate: ctc_errors as f64 / denom,
        known_count,
        speaker_count_accuracy: (!known_count).then(|| right_count as f64 / data.len().max(1) as f64),
        per_utterance,
    })
}

/// Decodes utterances on scoped threads, one contiguous chunk each; results keep input order.
fn transcribe_all(
    model: &M2Former,
    store: &ParamStore,
    cfg: &ExperimentConfig,
    data: &[Utterance],
    known_count: bool,
    workers: usize,
) -> Result<Vec<Transcription>> {
    let one = |u: &Utterance| model.transcribe(store, &u.feats, known_count.then_some(u.refs.len()), cfg.max_decode_len);
    let workers = workers.min(data.len());
    if workers <= 1 {
        return data.iter().map(one).collect();
    }
    let chunk = data.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(data.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Loads a checkpoint and scores it on the split in `data_dir`.
pub fn evaluate(ckpt: &Path, data_dir: &Path, known_count: bool) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    let (model, store) = ck.restore()?;
    let data = load_utterances(&ck.config, data_dir)?;
    evaluate_model(&model, &store, &ck.config, &data, known_count)
}
