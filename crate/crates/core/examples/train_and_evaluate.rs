//! Trains the micro model on synthetic two-speaker mixtures and scores it on a
//! held-out split with known and estimated speaker counts.
//!
//! `cargo run --release --example train_and_evaluate -- [steps] [seed] [config.toml]`

use std::time::Instant;

use m2former::experiments::{evaluate_model, synth_utterances, train_model, ExperimentConfig};

fn main() -> m2former::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::micro();
    if let Some(steps) = args.next() {
        cfg.steps = steps.parse().expect("steps must be an integer");
    }
    if let Some(seed) = args.next() {
        cfg.seed = seed.parse().expect("seed must be an integer");
        cfg.data_seed = cfg.seed;
    }
    if let Some(path) = args.next() {
        let (steps, seed) = (cfg.steps, cfg.seed);
        cfg = ExperimentConfig::load(std::path::Path::new(&path))?;
        cfg.steps = steps;
        cfg.seed = seed;
        cfg.data_seed = seed;
    }
    let train = synth_utterances(&cfg, cfg.train_seed_base(), cfg.train_utts)?;
    let test = synth_utterances(&cfg, cfg.test_seed_base(), cfg.test_utts)?;
    println!("frames per utterance: {}", train[0].feats.shape()[1]);

    let start = Instant::now();
    let out = train_model(&cfg, &train)?;
    println!("trained {} steps in {:.1}s", cfg.steps, start.elapsed().as_secs_f64());
    for chunk in out.log.chunks((cfg.steps / 10).max(1)) {
        let mean = chunk.iter().map(|l| l.loss).sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}..{:<5} mean loss {mean:.4}", chunk[0].step, chunk[chunk.len() - 1].step);
    }

    let known = evaluate_model(&out.model, &out.store, &cfg, &test, true)?;
    let unknown = evaluate_model(&out.model, &out.store, &cfg, &test, false)?;
    println!(
        "known count:   TER {:.3} (CTC {:.3}), accuracy {:.3}",
        known.token_error_rate, known.ctc_token_error_rate, known.token_accuracy
    );
    println!(
        "unknown count: TER {:.3}, speaker-count accuracy {:.3}",
        unknown.token_error_rate,
        unknown.speaker_count_accuracy.unwrap_or(f64::NAN)
    );
    for u in known.per_utterance.iter().take(3) {
        println!("{}: refs {:?} hyps {:?}", u.id, u.references, u.hypotheses);
    }
    Ok(())
}
