use m2former::cf::{
    canonical_labels, cluster_channels, eigengap_count, filter_labels, ifsd, laplacian_eigenvalues, spectral_cluster,
    CfConfig, CountConvention, IfsdConfig,
};
use m2former::m2a::SimilarityMatrix;
use m2former::tensor::{seeded_rng, Rng, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Every set partition of `0..n` as a restricted growth string, blocks of at least two.
fn partitions_without_singletons(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            let blocks = prefix.iter().max().unwrap() + 1;
            if (0..blocks).all(|b| prefix.iter().filter(|&&l| l == b).count() >= 2) {
                out.push(prefix.clone());
            }
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for l in 0..=next {
            prefix.push(l);
            rec(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), n, &mut out);
    out
}

/// Row-normalised affinity with random positive weights inside blocks and zeros across.
fn planted(labels: &[usize], rng: &mut Rng, leak: f64) -> SimilarityMatrix {
    let n = labels.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if labels[i] == labels[j] { rng.random_range(0.5..1.5) } else { leak })
                .collect()
        })
        .collect();
    SimilarityMatrix::from_affinity(&rows).unwrap()
}

#[test]
fn spectral_clustering_recovers_every_planted_partition() {
    let mut rng = seeded_rng(5);
    let mut total = 0;
    for n in 2..=12 {
        for labels in partitions_without_singletons(n) {
            let k = labels.iter().max().unwrap() + 1;
            let z = planted(&labels, &mut rng, 0.0);
            let got = spectral_cluster(&z, k).unwrap();
            assert_eq!(got, labels, "n={n} k={k}");
            total += 1;
        }
    }
    // Number of singleton-free partitions of 2..=12 elements.
    assert_eq!(total, 1 + 1 + 4 + 11 + 41 + 162 + 715 + 3425 + 17722 + 98253 + 580317);
}

#[test]
fn channel_permutation_relabels_consistently() {
    let mut rng = seeded_rng(9);
    let labels = vec![0, 0, 1, 1, 1, 2, 2, 0];
    let z = planted(&labels, &mut rng, 0.01);
    let base = spectral_cluster(&z, 3).unwrap();
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| z.get(i, j)).collect()).collect();
        let zp = SimilarityMatrix::from_affinity(&rows).unwrap();
        let got = spectral_cluster(&zp, 3).unwrap();
        let expect: Vec<usize> = canonical_labels(&perm.iter().map(|&i| base[i]).collect::<Vec<_>>());
        assert_eq!(got, expect);
    }
}

fn blocks_of(sizes: &[usize]) -> Vec<usize> {
    sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat_n(b, s)).collect()
}

#[test]
fn eigengap_counts_exact_blocks() {
    let mut rng = seeded_rng(2);
    let layouts: [&[usize]; 5] = [&[10], &[5, 5], &[3, 3, 4], &[2, 3, 2, 3], &[2, 2, 2, 2, 2]];
    for (k, sizes) in (1..=5).zip(layouts) {
        let z = planted(&blocks_of(sizes), &mut rng, 0.0);
        assert_eq!(eigengap_count(&z, 5).unwrap(), k, "{sizes:?}");
        let values = laplacian_eigenvalues(&z).unwrap();
        assert!(values[..k].iter().all(|v| v.abs() < 1e-10), "{values:?}");
    }
}

/// Cyclic Jacobi rotations on a dense symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut v: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn laplacian_by_hand(z: &SimilarityMatrix) -> Vec<Vec<f64>> {
    let n = z.len();
    let a = |i: usize, j: usize| if i == j { 0.0 } else { 0.5 * (z.get(i, j) + z.get(j, i)) };
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a(i, j)).sum()).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| f64::from(u8::from(i == j)) - a(i, j) / (deg[i] * deg[j]).sqrt())
                .collect()
        })
        .collect()
}

#[test]
fn perturbed_two_blocks_match_independent_eigensolve() {
    let mut rng = seeded_rng(4);
    for _ in 0..10 {
        let z = planted(&blocks_of(&[4, 6]), &mut rng, 1e-3);
        let oracle = jacobi_eigenvalues(laplacian_by_hand(&z));
        let got = laplacian_eigenvalues(&z).unwrap();
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{got:?} vs {oracle:?}");
        }
        let gaps: Vec<f64> = oracle.windows(2).take(5).map(|w| w[1] - w[0]).collect();
        let oracle_k = 1 + (0..gaps.len()).fold(0, |b, i| if gaps[i] > gaps[b] { i } else { b });
        assert_eq!(oracle_k, 2);
        assert_eq!(eigengap_count(&z, 5).unwrap(), 2);
    }
}

#[test]
fn uniform_similarity_is_one_cluster() {
    let z = SimilarityMatrix::from_affinity(&vec![vec![1.0; 6]; 6]).unwrap();
    assert_eq!(eigengap_count(&z, 5).unwrap(), 1);
}

fn frames(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn ifsd_analytic_cases() {
    let cfg = IfsdConfig { alpha: 5.3, tau: 3 };
    let constant = frames(&vec![vec![0.3, -1.2, 2.0]; 9]);
    assert!((ifsd(&constant, &cfg).unwrap() - (1.0 - 5.3)).abs() < 1e-12);

    let alt = IfsdConfig { alpha: 5.3, tau: 2 };
    let (u, v) = (vec![2.0, 0.0, 0.0], vec![0.0, 0.0, -0.5]);
    let rows: Vec<Vec<f64>> = (0..10).map(|t| if t % 2 == 0 { u.clone() } else { v.clone() }).collect();
    assert!((ifsd(&frames(&rows), &alt).unwrap() + 5.3).abs() < 1e-12);

    assert!(ifsd(&frames(&vec![vec![1.0]; 3]), &cfg).is_err());
    assert!(ifsd(&constant, &IfsdConfig { alpha: 5.3, tau: 1 }).is_err());
}

#[test]
fn zero_frames_contribute_nothing() {
    let cfg = IfsdConfig { alpha: 2.0, tau: 2 };
    let x = frames(&vec![vec![0.0, 0.0]; 5]);
    assert_eq!(ifsd(&x, &cfg).unwrap(), 0.0);
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[test]
fn sinusoidal_tracks_outscore_white_noise() {
    let cfg = IfsdConfig { alpha: 5.3, tau: 3 };
    let (t_len, d) = (60, 16);
    let omega = std::f64::consts::PI / (2.0 * cfg.tau as f64);
    let mut wins = 0;
    for seed in 0..100 {
        let mut rng = seeded_rng(seed);
        let phases: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let track: Vec<Vec<f64>> = (0..t_len)
            .map(|t| phases.iter().map(|p| (omega * t as f64 + p).sin() + 0.1 * gaussian(&mut rng)).collect())
            .collect();
        let noise: Vec<Vec<f64>> = (0..t_len).map(|_| (0..d).map(|_| gaussian(&mut rng)).collect()).collect();
        if ifsd(&frames(&track), &cfg).unwrap() > ifsd(&frames(&noise), &cfg).unwrap() {
            wins += 1;
        }
    }
    assert!(wins >= 95, "{wins}/100");
}

proptest! {
    #[test]
    fn ifsd_ignores_positive_frame_scaling(
        seed in 0u64..10_000,
        scales in prop::collection::vec(0.01f64..100.0, 12),
    ) {
        let mut rng = seeded_rng(seed);
        let rows: Vec<Vec<f64>> = (0..12).map(|_| (0..5).map(|_| gaussian(&mut rng)).collect()).collect();
        let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
        let cfg = IfsdConfig { alpha: 5.3, tau: 4 };
        let a = ifsd(&frames(&rows), &cfg).unwrap();
        let b = ifsd(&frames(&scaled), &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn filter_keeps_top_scoring_labels(
        labels in prop::collection::vec(0usize..4, 4..12),
        scores in prop::collection::vec(prop::sample::select(vec![-3.0, -1.0, 0.0, 0.5]), 12),
        n in 1usize..=3,
    ) {
        let labels = canonical_labels(&labels);
        let num = labels.iter().max().unwrap() + 1;
        prop_assume!(num >= n);
        let scores = &scores[..labels.len()];
        let a = filter_labels(&labels, scores, n).unwrap();
        prop_assert_eq!(&a, &filter_labels(&labels, scores, n).unwrap());
        prop_assert_eq!(a.kept.len(), n);
        for l in 0..num {
            let members: Vec<f64> = labels.iter().zip(scores).filter(|(&x, _)| x == l).map(|(_, &s)| s).collect();
            prop_assert!((a.label_scores[l] - members.iter().sum::<f64>() / members.len() as f64).abs() < 1e-12);
        }
        // Every kept label beats or ties every dropped one, and ties favour the lower id.
        for &k in &a.kept {
            for d in (0..num).filter(|d| !a.kept.contains(d)) {
                let (sk, sd) = (a.label_scores[k], a.label_scores[d]);
                prop_assert!(sk > sd || (sk == sd && k < d));
            }
        }
    }
}

#[test]
fn filter_examples_and_ties() {
    let a = filter_labels(&[0, 1], &[-0.5, -4.0], 1).unwrap();
    assert_eq!(a.kept, vec![0]);
    let a = filter_labels(&[0, 1, 2], &[-1.0, -1.0, -9.0], 2).unwrap();
    assert_eq!(a.kept, vec![0, 1]);
    let a = filter_labels(&[0, 1, 2], &[-9.0, -1.0, -1.0], 1).unwrap();
    assert_eq!(a.kept, vec![1]);
    assert!(filter_labels(&[0, 0], &[1.0, 1.0], 2).is_err());
}

/// Channels built from two orthogonal speech-like tracks plus one group
/// sharing a white-noise track.
fn two_speakers_and_noise(rng: &mut Rng) -> (Tensor, Vec<usize>) {
    let (t_len, d) = (24, 8);
    let noise: Vec<f64> = (0..t_len * d).map(|_| 2.0 * gaussian(rng)).collect();
    let mut data = Vec::new();
    let groups = [0usize, 0, 0, 1, 1, 1, 2, 2];
    let omega = std::f64::consts::PI / 6.0;
    for &g in &groups {
        for t in 0..t_len {
            for j in 0..d {
                let v = match g {
                    0 if j < 4 => 3.0 * (omega * t as f64 + j as f64).sin(),
                    1 if j >= 4 => 3.0 * (omega * t as f64 + j as f64).cos(),
                    2 => noise[t * d + j],
                    _ => 0.0,
                };
                data.push(v + 0.05 * gaussian(rng));
            }
        }
    }
    (Tensor::new(vec![groups.len(), t_len, d], data).unwrap(), groups.to_vec())
}

#[test]
fn noise_group_is_discarded() {
    let mut rng = seeded_rng(3);
    let (x, groups) = two_speakers_and_noise(&mut rng);
    let cfg = CfConfig {
        ifsd: IfsdConfig { alpha: 5.3, tau: 3 },
        d_k: 2,
        ..CfConfig::default()
    };
    let out = cluster_channels(&x, &cfg, Some(2), None).unwrap();
    let a = &out.assignment;
    assert_eq!(a.labels, canonical_labels(&groups));
    let dropped: Vec<usize> = (0..a.num_labels()).filter(|l| !a.kept.contains(l)).collect();
    assert_eq!(dropped, vec![2]);
    assert!(a.kept.iter().all(|&k| a.label_scores[k] > a.label_scores[2]));
    for i in 0..8 {
        for j in 0..8 {
            let same_kept = a.labels[i] == a.labels[j] && a.is_kept(i);
            assert_eq!(out.mask.is_allowed(i, j), same_kept || i == j, "({i}, {j})");
        }
    }

    // Three clusters; the noise-excluding count reads that as two speakers.
    let unknown = cluster_channels(&x, &cfg, None, None).unwrap();
    assert_eq!(unknown.estimated_clusters, Some(3));
    assert_eq!(unknown.assignment.kept.len(), 2);
    let counting = CfConfig {
        convention: CountConvention::IncludesNoise,
        ..cfg
    };
    assert_eq!(cluster_channels(&x, &counting, None, None).unwrap().assignment.kept.len(), 3);
}
