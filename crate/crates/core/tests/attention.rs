use m2former::cf::ChannelAssignment;
use m2former::m2a::{
    cross_attention, intra_attention, mct_cross_attention, run_blocks, similarity_matrix, similarity_var,
    speaker_average, AttentionSublayer, ChannelMask, CrossLayer, CrossVariant, M2ABlock,
};
use m2former::signal::{ChannelAxis, FeatureStack};
use m2former::tensor::{grad_check, seeded_rng, GradCheckOptions, ParamStore, Rng, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

const D: usize = 8;
const HEADS: usize = 2;
const FF: usize = 12;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn sublayer(seed: u64) -> (ParamStore, AttentionSublayer) {
    let mut store = ParamStore::new();
    let layer = AttentionSublayer::new(&mut store, "x", D, HEADS, FF, &mut seeded_rng(seed)).unwrap();
    (store, layer)
}

/// Residual attention output followed by the residual feed-forward.
fn finish<'t>(tape: &'t Tape, store: &ParamStore, layer: &AttentionSublayer, x: &Var<'t>, attended: &Var<'t>) -> Var<'t> {
    let x1 = x.add(attended).unwrap();
    let h = layer.ffn.forward(tape, store, &layer.ffn_norm.forward(tape, store, &x1).unwrap()).unwrap();
    x1.add(&h).unwrap()
}

/// The sublayer with every channel attending to its own normalised frames.
fn self_path(store: &ParamStore, layer: &AttentionSublayer, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let xn = layer.norm.forward(&tape, store, &xv).unwrap();
    let a = layer.attn.forward(&tape, store, &xn, &xn, None).unwrap();
    let out = finish(&tape, store, layer, &xv, &a).value().clone();
    out
}

fn permute_channels(x: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::stack(&perm.iter().map(|&i| x.index0(i)).collect::<Vec<_>>()).unwrap()
}

fn z_of(x: &Tensor, d_k: usize) -> Tensor {
    let tape = Tape::new();
    let z = similarity_var(&tape.constant(x.clone()), d_k).unwrap();
    let out = z.value().clone();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_rows_are_distributions(seed in 0u64..100_000, c in 2usize..7, t in 1usize..6, d in 1usize..6) {
        let mut rng = seeded_rng(seed);
        let x = random(&[c, t, d], &mut rng);
        let z = z_of(&x, 4);
        for i in 0..c {
            let row: f64 = (0..c).map(|j| z.get(&[i, j])).sum();
            prop_assert!((row - 1.0).abs() < 1e-10);
            prop_assert!((0..c).all(|j| z.get(&[i, j]) > 0.0));
        }
        prop_assert_eq!(z, z_of(&x, 4));
    }

    #[test]
    fn block_stack_is_channel_permutation_equivariant(seed in 0u64..100_000) {
        let mut rng = seeded_rng(seed);
        let c = 5;
        let mut store = ParamStore::new();
        let blocks: Vec<M2ABlock> = (0..2)
            .map(|i| M2ABlock::new(&mut store, &format!("b{i}"), D, HEADS, FF, CrossVariant::M2a, c, &mut rng).unwrap())
            .collect();
        let x = random(&[c, 4, D], &mut rng);
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let mask = ChannelMask::new(c, (0..c * c).map(|k| {
            let (i, j) = (k / c, k % c);
            i == j || (i < 3) == (j < 3)
        }).collect()).unwrap();
        for m in [None, Some(&mask)] {
            let run = |x: &Tensor, m: Option<&ChannelMask>| {
                let tape = Tape::new();
                let y = run_blocks(&tape, &store, &blocks, &tape.constant(x.clone()), m).unwrap();
                let out = y.value().clone();
                out
            };
            let direct = permute_channels(&run(&x, m), &perm);
            let pm = m.map(|m| m.permuted(&perm));
            let permuted = run(&permute_channels(&x, &perm), pm.as_ref());
            prop_assert!(direct.max_abs_diff(&permuted) <= 1e-10);
        }
    }
}

#[test]
fn two_channel_single_frame_by_hand() {
    let x = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap();
    // Gram [[1, 0.5], [0.5, 0.5]] over T·√d_k = 1·√4.
    let e = |v: f64| (v / 2.0).exp();
    let z00 = e(1.0) / (e(1.0) + e(0.5));
    let z11 = e(0.5) / (e(0.5) + e(0.5));
    let z = z_of(&x, 4);
    assert!((z.get(&[0, 0]) - z00).abs() < 1e-15);
    assert!((z.get(&[0, 1]) - (1.0 - z00)).abs() < 1e-15);
    assert!((z.get(&[1, 1]) - z11).abs() < 1e-15);
    let stack = FeatureStack {
        data: x,
        axis: ChannelAxis::Decoupled,
        frame_rate: 25.0,
    };
    let s = similarity_matrix(&stack, 4).unwrap();
    assert!((s.get(1, 0) - 0.5).abs() < 1e-15);
    let mics = FeatureStack {
        axis: ChannelAxis::Microphones,
        ..stack
    };
    assert!(similarity_matrix(&mics, 4).is_err());
}

#[test]
fn two_channel_gram_is_frame_averaged() {
    // Channel 1 is channel 0 negated over two frames: logits ±(|a|²+|b|²)/2.
    let x = Tensor::new(vec![2, 2, 1], vec![1.0, 3.0, -1.0, -3.0]).unwrap();
    let z = z_of(&x, 1);
    let want = 1.0 / (1.0 + (-10.0f64).exp());
    assert!((z.get(&[0, 0]) - want).abs() < 1e-15);
    assert!((z.get(&[1, 0]) - (1.0 - want)).abs() < 1e-15);
}

#[test]
fn identical_channels_reduce_to_self_attention() {
    let mut rng = seeded_rng(1);
    let (store, layer) = sublayer(2);
    let one = random(&[1, 5, D], &mut rng);
    let x = Tensor::stack(&vec![one.index0(0); 4]).unwrap();
    let tape = Tape::new();
    let got = cross_attention(&tape, &store, &layer, &tape.constant(x.clone()), None).unwrap();
    let want = self_path(&store, &layer, &x);
    assert!(got.value().max_abs_diff(&want) <= 1e-10);
}

#[test]
fn masked_out_channels_do_not_leak() {
    let mut rng = seeded_rng(3);
    let (store, layer) = sublayer(4);
    let c = 6;
    let groups = [0, 0, 1, 1, 1, 2];
    let assignment = ChannelAssignment {
        labels: groups.to_vec(),
        label_scores: vec![1.0, 0.5, -3.0],
        kept: vec![0, 1],
        n_speakers: 2,
    };
    let mask = ChannelMask::from_assignment(&assignment);
    let x = random(&[c, 5, D], &mut rng);
    let run = |x: &Tensor| {
        let tape = Tape::new();
        let y = cross_attention(&tape, &store, &layer, &tape.constant(x.clone()), Some(&mask)).unwrap();
        let out = y.value().clone();
        out
    };
    let base = run(&x);
    for _ in 0..5 {
        let mut y = x.clone();
        let noise = random(&[c, 5, D], &mut rng);
        for (i, &g) in groups.iter().enumerate() {
            if g != 0 {
                for k in 0..5 * D {
                    y.data_mut()[i * 5 * D + k] += 10.0 * noise.data()[i * 5 * D + k];
                }
            }
        }
        let out = run(&y);
        for i in (0..c).filter(|&i| groups[i] == 0) {
            assert!(out.index0(i).max_abs_diff(&base.index0(i)) <= 1e-12);
        }
    }
}

#[test]
fn uniform_mixing_uses_the_channel_mean() {
    let mut rng = seeded_rng(5);
    let mut store = ParamStore::new();
    let c = 3;
    let block = M2ABlock::new(&mut store, "b", D, HEADS, FF, CrossVariant::Mct, c, &mut rng).unwrap();
    let Some(CrossLayer::Mct { layer, mix_logits }) = &block.cross else {
        panic!("expected learned mixing");
    };
    assert!(store.value(*mix_logits).data().iter().all(|&v| v == 0.0));
    let x = random(&[c, 4, D], &mut rng);

    let tape = Tape::new();
    let got = mct_cross_attention(&tape, &store, layer, *mix_logits, &tape.constant(x.clone())).unwrap();

    let t2 = Tape::new();
    let xv = t2.constant(x.clone());
    let xn = layer.norm.forward(&t2, &store, &xv).unwrap();
    let xn_val = xn.value().clone();
    let mut mean = Tensor::zeros(&[4, D]);
    for i in 0..c {
        for (m, v) in mean.data_mut().iter_mut().zip(xn_val.index0(i).data()) {
            *m += v / c as f64;
        }
    }
    let mixed = t2.constant(Tensor::stack(&vec![mean; c]).unwrap());
    let a = layer.attn.forward(&t2, &store, &xn, &mixed, None).unwrap();
    let want = finish(&t2, &store, layer, &xv, &a);
    assert!(got.value().max_abs_diff(&want.value()) <= 1e-12);
}

#[test]
fn saturated_diagonal_mixing_is_self_attention() {
    let mut rng = seeded_rng(6);
    let mut store = ParamStore::new();
    let c = 3;
    let block = M2ABlock::new(&mut store, "b", D, HEADS, FF, CrossVariant::Mct, c, &mut rng).unwrap();
    let Some(CrossLayer::Mct { layer, mix_logits }) = &block.cross else {
        panic!("expected learned mixing");
    };
    store.set_value(*mix_logits, Tensor::eye(c)).unwrap();
    store.data_mut(*mix_logits).iter_mut().for_each(|v| *v *= 40.0);
    let x = random(&[c, 4, D], &mut rng);
    let tape = Tape::new();
    let got = mct_cross_attention(&tape, &store, layer, *mix_logits, &tape.constant(x.clone())).unwrap();
    assert!(got.value().max_abs_diff(&self_path(&store, layer, &x)) <= 1e-6);

    // Unlike similarity gating, learned mixing is tied to channel positions.
    store.set_value(*mix_logits, random(&[c, c], &mut rng)).unwrap();
    let run = |x: &Tensor| {
        let tape = Tape::new();
        let y = block.forward(&tape, &store, &tape.constant(x.clone()), None).unwrap();
        let out = y.value().clone();
        out
    };
    let perm = [2, 0, 1];
    let diff = permute_channels(&run(&x), &perm).max_abs_diff(&run(&permute_channels(&x, &perm)));
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn intra_attention_keeps_channels_apart() {
    let mut rng = seeded_rng(7);
    let (store, layer) = sublayer(8);
    let x = random(&[3, 4, D], &mut rng);
    let tape = Tape::new();
    let all = intra_attention(&tape, &store, &layer, &tape.constant(x.clone())).unwrap();
    let one = intra_attention(&tape, &store, &layer, &tape.constant(random(&[1, 4, D], &mut rng))).unwrap();
    let alone = intra_attention(&tape, &store, &layer, &tape.constant(Tensor::stack(&[x.index0(1)]).unwrap())).unwrap();
    assert_eq!(one.shape(), vec![1, 4, D]);
    assert!(all.value().index0(1).max_abs_diff(&alone.value().index0(0)) <= 1e-12);
}

#[test]
fn speaker_average_means_each_kept_label() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0]).unwrap());
    let assignment = ChannelAssignment {
        labels: vec![0, 1, 0],
        label_scores: vec![-1.0, 0.0],
        kept: vec![1, 0],
        n_speakers: 2,
    };
    let out = speaker_average(&x, &assignment).unwrap();
    assert_eq!(out[0].value().data(), &[3.0, 4.0]);
    assert_eq!(out[1].value().data(), &[5.5, 11.0]);
}

fn check(store: &ParamStore, f: impl for<'t> Fn(&'t Tape, &ParamStore) -> m2former::Result<Var<'t>>) {
    let opts = GradCheckOptions {
        samples_per_param: Some(6),
        seed: 3,
        ..GradCheckOptions::default()
    };
    let report = grad_check(store, f, &opts).unwrap();
    let failures: Vec<_> = report.failures().collect();
    assert!(report.passed(), "{failures:#?}");
}

#[test]
fn gradients_of_a_masked_two_block_encoder() {
    let mut rng = seeded_rng(10);
    let c = 4;
    let mut store = ParamStore::new();
    let blocks: Vec<M2ABlock> = (0..2)
        .map(|i| M2ABlock::new(&mut store, &format!("b{i}"), D, HEADS, FF, CrossVariant::M2a, c, &mut rng).unwrap())
        .collect();
    let x = random(&[c, 3, D], &mut rng);
    let mask = ChannelMask::new(c, (0..16).map(|k| k / 4 == k % 4 || (k / 4 < 2) == (k % 4 < 2)).collect()).unwrap();
    let weights: Vec<f64> = (0..c * 3 * D).map(|_| rng.random_range(-1.0..1.0)).collect();
    check(&store, |tape, store| {
        let h = run_blocks(tape, store, &blocks[..1], &tape.constant(x.clone()), None)?;
        run_blocks(tape, store, &blocks[1..], &h, Some(&mask))?.dot_const(weights.clone())
    });
}

#[test]
fn gradients_through_learned_mixing_weights() {
    let mut rng = seeded_rng(11);
    let c = 3;
    let mut store = ParamStore::new();
    let block = M2ABlock::new(&mut store, "b", D, HEADS, FF, CrossVariant::Mct, c, &mut rng).unwrap();
    if let Some(CrossLayer::Mct { mix_logits, .. }) = &block.cross {
        store.set_value(*mix_logits, random(&[c, c], &mut rng)).unwrap();
    }
    let x = random(&[c, 3, D], &mut rng);
    let weights: Vec<f64> = (0..c * 3 * D).map(|_| rng.random_range(-1.0..1.0)).collect();
    check(&store, |tape, store| block.forward(tape, store, &tape.constant(x.clone()), None)?.dot_const(weights.clone()));
}
