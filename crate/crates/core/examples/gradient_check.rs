//! Compares tape gradients of the full joint loss against central differences
//! for every parameter tensor of a freshly initialised micro model.
//!
//! `cargo run --release --example gradient_check -- [samples_per_tensor]`

use m2former::experiments::{synth_utterances, ExperimentConfig};
use m2former::model::M2Former;
use m2former::tensor::{grad_check, GradCheckOptions};

fn main() -> m2former::Result<()> {
    let samples: usize = std::env::args().nth(1).map_or(4, |s| s.parse().expect("samples must be an integer"));
    let cfg = ExperimentConfig {
        min_tokens: 2,
        max_tokens: 2,
        ..ExperimentConfig::micro()
    };
    let utt = synth_utterances(&cfg, 3, 1)?.remove(0);
    let (model, store) = M2Former::new(cfg.model(), 1)?;
    let loss = cfg.loss();
    let opts = GradCheckOptions {
        samples_per_param: Some(samples),
        ..GradCheckOptions::default()
    };
    let report = grad_check(&store, |tape, s| Ok(model.loss(tape, s, &utt.feats, &utt.refs, &loss)?.total), &opts)?;
    for p in &report.params {
        println!("{:<40} {:>3} checked  max rel err {:.2e}", p.name, p.checked, p.max_rel_err);
    }
    println!(
        "{} entries, worst {:.2e}, {}",
        report.total_checked(),
        report.max_rel_err(),
        if report.passed() { "passed" } else { "FAILED" }
    );
    Ok(())
}
