//! Loads a checkpoint and shows how the clustering layer groups the decoupled
//! channels of a few mixtures: labels, per-label scores, kept labels and the
//! Laplacian spectrum used for speaker counting.
//!
//! `cargo run --release --example inspect_clustering -- model.ckpt data_dir [count]`

use std::path::Path;

use m2former::cf::laplacian_eigenvalues;
use m2former::experiments::{load_utterances, Checkpoint};
use m2former::tensor::Tape;

fn main() -> m2former::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [ckpt, data, rest @ ..] = args.as_slice() else {
        eprintln!("usage: inspect_clustering <model.ckpt> <data_dir> [count]");
        std::process::exit(2);
    };
    let count: usize = rest.first().map_or(5, |c| c.parse().expect("count must be an integer"));
    let ck = Checkpoint::load(Path::new(ckpt))?;
    let (model, store) = ck.restore()?;
    let utts = load_utterances(&ck.config, Path::new(data))?;
    for u in utts.iter().take(count) {
        let tape = Tape::new();
        let known = model.encode(&tape, &store, &u.feats, Some(u.refs.len()))?;
        let unknown = model.encode(&tape, &store, &u.feats, None)?;
        let a = &known.cf.assignment;
        let eig = laplacian_eigenvalues(&known.cf.similarity)?;
        println!("utterance {}", u.id);
        println!("  labels {:?} kept {:?}", a.labels, a.kept);
        println!("  label scores {:.3?}", a.label_scores);
        println!("  eigenvalues {:.3?}", eig);
        println!(
            "  estimated clusters {:?} -> {} speakers",
            unknown.cf.estimated_clusters,
            unknown.streams.len()
        );
    }
    Ok(())
}
