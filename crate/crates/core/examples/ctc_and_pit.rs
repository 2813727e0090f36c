//! CTC losses of one set of frame scores against several targets, then a
//! two-speaker permutation-invariant loss with the references in both orders.
//!
//! `cargo run --release --example ctc_and_pit`

use m2former::decoder::{Decoder, DecoderConfig};
use m2former::layers::Linear;
use m2former::loss::{ctc_loss, pit_loss, LossConfig};
use m2former::tensor::{seeded_rng, ParamStore, Tape, Tensor};
use rand::Rng as _;

fn main() -> m2former::Result<()> {
    // Frames favour blank, 1, 1, blank, 2.
    let logits = Tensor::from_rows(&[
        vec![3.0, 0.0, 0.0],
        vec![0.0, 3.0, 0.0],
        vec![0.0, 3.0, 0.0],
        vec![3.0, 0.0, 0.0],
        vec![0.0, 0.0, 3.0],
    ])?;
    for target in [vec![1, 2], vec![1, 1, 2], vec![2, 1], vec![2]] {
        let tape = Tape::new();
        let loss = ctc_loss(&tape.constant(logits.clone()), &target)?.item();
        println!("ctc {target:?}: {loss:.4}");
    }

    let mut rng = seeded_rng(2);
    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, "ctc", 4, 4, &mut rng)?;
    let decoder = Decoder::new(
        &mut store,
        "dec",
        DecoderConfig {
            vocab: 3,
            d_model: 4,
            heads: 2,
            ff: 8,
            layers: 1,
        },
        &mut rng,
    )?;
    let streams: Vec<Tensor> = (0..2)
        .map(|_| Tensor::new(vec![6, 4], (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()))
        .collect::<m2former::Result<_>>()?;
    for refs in [vec![vec![1, 2], vec![3]], vec![vec![3], vec![1, 2]]] {
        let tape = Tape::new();
        let enc: Vec<_> = streams.iter().map(|s| tape.constant(s.clone())).collect();
        let r = pit_loss(&tape, &store, &head, &decoder, &enc, &refs, &LossConfig::default())?;
        println!(
            "refs {refs:?}: permutation {:?}, pair ctc {:?}, total {:.4}",
            r.permutation,
            r.per_pair_ctc.iter().map(|row| row.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()).collect::<Vec<_>>(),
            r.total.item()
        );
    }
    Ok(())
}
