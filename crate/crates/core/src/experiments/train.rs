use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::M2Former;
use crate::signal::{load_split, stft_features, synth_mixture, Split, StftConfig};
use crate::tensor::{seeded_rng, ParamStore, Rng, Tape, Tensor};

/// Features and references of one mixture.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    /// `[C, T, 3F]`.
    pub feats: Tensor,
    pub refs: Vec<Vec<u32>>,
}

pub fn featurize(split: &Split, stft: &StftConfig) -> Result<Vec<Utterance>> {
    split
        .manifest
        .utterances
        .iter()
        .zip(&split.recordings)
        .map(|(entry, rec)| {
            Ok(Utterance {
                id: entry.id.clone(),
                feats: stft_features(rec, stft)?.data,
                refs: rec.transcripts.clone(),
            })
        })
        .collect()
}

/// Generates `count` utterances in memory with seeds `seed_base + i`, the
/// same mixtures `gen-data` writes for that base seed.
pub fn synth_utterances(cfg: &ExperimentConfig, seed_base: u64, count: usize) -> Result<Vec<Utterance>> {
    let stft = cfg.stft();
    (0..count)
        .map(|i| {
            let rec = synth_mixture(&cfg.synth(seed_base.wrapping_add(i as u64)))?;
            Ok(Utterance {
                id: format!("{i:05}"),
                feats: stft_features(&rec, &stft)?.data,
                refs: rec.transcripts,
            })
        })
        .collect()
}

/// Loads a split written by `gen-data` and checks it fits the config.
pub fn load_utterances(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<Utterance>> {
    let split = load_split(dir)?;
    let s = &split.manifest.synth;
    if s.n_mics != cfg.mics || s.vocab_size > cfg.vocab || s.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "data has {} mics, vocabulary {} at {} Hz; config expects {} mics, vocabulary {} at {} Hz",
            s.n_mics, s.vocab_size, s.sample_rate, cfg.mics, cfg.vocab, cfg.sample_rate
        )));
    }
    featurize(&split, &cfg.stft())
}

/// One row of `loss.csv`; losses are means over the batch's utterances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub ctc: f64,
    pub att: f64,
}

pub struct TrainOutcome {
    pub model: M2Former,
    pub store: ParamStore,
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

/// Peak rate times `min(step / warmup, sqrt(warmup / step))`, steps counted from 1.
pub fn learning_rate(cfg: &ExperimentConfig, step: usize) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.learning_rate;
    }
    let (s, w) = (step.max(1) as f64, cfg.warmup_steps as f64);
    cfg.learning_rate * (s / w).min((w / s).sqrt())
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, cfg: &ExperimentConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.0] else { continue };
            // Biases and norm gains are vectors; only matrices and kernels decay.
            let decay = if store.value(id).shape().len() >= 2 { lr * cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((w, g), m), v) in store.data_mut(id).iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps) + decay * *w;
            }
        }
    }
}

/// Adam with warmup and global-norm clipping on mini-batches drawn from a
/// per-epoch shuffle.
pub fn train_model(cfg: &ExperimentConfig, data: &[Utterance]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("no training utterances".into()));
    }
    let (model, mut store) = M2Former::new(cfg.model(), cfg.seed)?;
    let mut rng: Rng = seeded_rng(cfg.seed ^ 0x7472_6169_6e);
    let mut adam = Adam::new(&store);
    let loss_cfg = cfg.loss();
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled"));
        }
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged(step),
            other => other,
        };
        let tape = Tape::with_dropout(cfg.dropout, cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(step as u64))?;
        let scale = 1.0 / batch.len() as f64;
        let mut total: Option<crate::tensor::Var<'_>> = None;
        let (mut ctc, mut att) = (0.0, 0.0);
        for &i in &batch {
            let u = &data[i];
            let pit = model.loss(&tape, &store, &u.feats, &u.refs, &loss_cfg).map_err(diverged)?;
            ctc += pit.ctc * scale;
            att += pit.att * scale;
            let term = pit.total.scale(scale).map_err(diverged)?;
            total = Some(match total {
                None => term,
                Some(t) => t.add(&term).map_err(diverged)?,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = total.item();
        if !loss.is_finite() {
            return Err(Error::Diverged(step));
        }
        let grads = total.backward().map_err(diverged)?;
        let mut dense: Vec<Option<Tensor>> = vec![None; store.len()];
        for (id, g) in grads.param_grads() {
            dense[id.0] = Some(g.clone());
        }
        let norm = dense.iter().flatten().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged(step));
        }
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            for g in dense.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        adam.step(&mut store, &dense, learning_rate(cfg, step), cfg);
        log.push(StepLog { step, loss, ctc, att });
    }
    let checkpoint = Checkpoint::capture(cfg, cfg.steps as u64, &rng, &store);
    Ok(TrainOutcome {
        model,
        store,
        checkpoint,
        log,
    })
}

pub fn loss_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,loss,ctc,att\n");
    for r in log {
        writeln!(s, "{},{},{},{}", r.step, r.loss, r.ctc, r.att).expect("write to string");
    }
    s
}

/// Trains on the split in `data_dir`, writing `model.ckpt` and `loss.csv` to `out_dir`.
pub fn train(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let data = load_utterances(cfg, data_dir)?;
    let outcome = train_model(cfg, &data)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("loss.csv"), loss_csv(&outcome.log))?;
    outcome.checkpoint.save(&out_dir.join("model.ckpt"))?;
    Ok(outcome)
}
