//! Clustering and filtering of decoupled channels.
//!
//! Channels are grouped by spectral clustering of their similarity matrix,
//! each group is scored by how speech-like its frames look over time, and
//! only the best-scoring groups are kept. Nothing here records on a tape:
//! the result only steers which channels later layers may mix.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::m2a::{similarity_of, ChannelMask, SimilarityMatrix};
use crate::signal::{ChannelAxis, FeatureStack};
use crate::tensor::{seeded_rng, Tensor};

const KMEANS_SEED: u64 = 0x6b6d_6561_6e73;
const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-8;

/// Per-channel labels and the subset of labels kept as speakers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAssignment {
    /// Cluster id per channel, canonical: ids appear in first-occurrence order.
    pub labels: Vec<usize>,
    /// Mean inter-frame score of each label's channels, indexed by label id.
    pub label_scores: Vec<f64>,
    /// Kept labels, best score first. Position `i` is speaker stream `i`.
    pub kept: Vec<usize>,
    pub n_speakers: usize,
}

impl ChannelAssignment {
    pub fn num_labels(&self) -> usize {
        self.label_scores.len()
    }

    /// Whether channel `c` belongs to a kept label.
    pub fn is_kept(&self, c: usize) -> bool {
        self.kept.contains(&self.labels[c])
    }
}

/// Inter-frame similarity difference parameters: `alpha` weighs the lag-`tau`
/// term against the adjacent-frame term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IfsdConfig {
    pub alpha: f64,
    pub tau: usize,
}

impl Default for IfsdConfig {
    fn default() -> Self {
        Self { alpha: 5.3, tau: 10 }
    }
}

impl IfsdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 2 {
            return Err(invalid(format!("ifsd tau must be at least 2, got {}", self.tau)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("ifsd alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Mean over `t` of `x̂_t·x̂_{t+1} − α·x̂_t·x̂_{t+τ}` for unit-normalised frames
/// of `x: [T, d]`. Zero frames stay zero.
pub fn ifsd(x: &Tensor, cfg: &IfsdConfig) -> Result<f64> {
    cfg.validate()?;
    let s = x.shape();
    if s.len() != 2 {
        return Err(invalid(format!("ifsd expects [T, d], got {s:?}")));
    }
    let (t, d) = (s[0], s[1]);
    if t <= cfg.tau {
        return Err(invalid(format!("ifsd needs more than {} frames, got {t}", cfg.tau)));
    }
    let mut unit = x.data().to_vec();
    for row in unit.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let frame = |i: usize| &unit[i * d..(i + 1) * d];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let span = t - cfg.tau;
    let total: f64 = (0..span)
        .map(|i| dot(frame(i), frame(i + 1)) - cfg.alpha * dot(frame(i), frame(i + cfg.tau)))
        .sum();
    Ok(total / span as f64)
}

/// `L = I − D^{-1/2} A D^{-1/2}` with `A` the symmetrised similarity, diagonal removed.
fn normalized_laplacian(z: &SimilarityMatrix) -> Result<DMatrix<f64>> {
    let n = z.len();
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 0.5 * (z.get(i, j) + z.get(j, i)) });
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let deg: f64 = a.row(i).sum();
        if deg <= 0.0 {
            return Err(invalid(format!("channel {i} has zero degree")));
        }
        inv_sqrt.push(1.0 / deg.sqrt());
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * a[(i, j)] * inv_sqrt[j]
    }))
}

/// Eigenpairs of the normalised Laplacian sorted by ascending eigenvalue.
fn sorted_spectrum(z: &SimilarityMatrix) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::new(normalized_laplacian(z)?);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Ascending eigenvalues of the normalised Laplacian of `z`.
pub fn laplacian_eigenvalues(z: &SimilarityMatrix) -> Result<Vec<f64>> {
    Ok(sorted_spectrum(z)?.0)
}

/// Spectral clustering of channels into `k` groups.
pub fn spectral_cluster(z: &SimilarityMatrix, k: usize) -> Result<Vec<usize>> {
    let n = z.len();
    if k == 0 || k > n {
        return Err(invalid(format!("cluster count {k} must be in 1..={n}")));
    }
    let (_, vectors) = sorted_spectrum(z)?;
    if k == 1 {
        return Ok(vec![0; n]);
    }
    let mut points: Vec<Vec<f64>> = (0..n).map(|r| (0..k).map(|c| vectors[(r, c)]).collect()).collect();
    for p in &mut points {
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            p.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(canonical_labels(&kmeans(&points, k)))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Lloyd's algorithm from a k-means++ seeding with a fixed seed.
fn kmeans(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut rng = seeded_rng(KMEANS_SEED);
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| chosen.iter().map(|&c| sq_dist(p, &points[c])).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
    }
    let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&mean, &centers[c]).sqrt());
            centers[c] = mean;
        }
        labels = points.iter().map(|p| nearest(p, &centers)).collect();
        if shift < KMEANS_TOL {
            break;
        }
    }
    labels
}

/// Relabels so that ids appear in order of first occurrence.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    labels
        .iter()
        .map(|l| match map.iter().find(|(old, _)| old == l) {
            Some(&(_, new)) => new,
            None => {
                let new = map.len();
                map.push((*l, new));
                new
            }
        })
        .collect()
}

/// Number of clusters suggested by the largest gap between consecutive
/// Laplacian eigenvalues among the first `k_max + 1`. Ties go to the smaller count.
pub fn eigengap_count(z: &SimilarityMatrix, k_max: usize) -> Result<usize> {
    let n = z.len();
    if k_max < 2 || k_max > n {
        return Err(invalid(format!("k_max {k_max} must be in 2..={n}")));
    }
    let values = laplacian_eigenvalues(z)?;
    let mut best = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for k in 1..=k_max.min(n - 1) {
        let gap = values[k] - values[k - 1];
        if gap > best_gap {
            best = k;
            best_gap = gap;
        }
    }
    Ok(best)
}

/// Keeps the `n_speakers` labels with the highest mean channel score.
/// `labels` must use every id in `0..L` for some `L`. Equal scores favour the lower id.
pub fn filter_labels(labels: &[usize], per_channel: &[f64], n_speakers: usize) -> Result<ChannelAssignment> {
    if labels.len() != per_channel.len() {
        return Err(invalid("one score per channel is required"));
    }
    let num = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; num];
    let mut counts = vec![0usize; num];
    for (&l, &s) in labels.iter().zip(per_channel) {
        sums[l] += s;
        counts[l] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(invalid(format!("label {missing} is unused")));
    }
    if num < n_speakers {
        return Err(invalid(format!("{num} labels cannot cover {n_speakers} speakers")));
    }
    let label_scores: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let mut order: Vec<usize> = (0..num).collect();
    order.sort_by(|&a, &b| label_scores[b].total_cmp(&label_scores[a]).then(a.cmp(&b)));
    order.truncate(n_speakers);
    Ok(ChannelAssignment {
        labels: labels.to_vec(),
        label_scores,
        kept: order,
        n_speakers,
    })
}

/// How an estimated cluster count maps to a speaker count when filtering is on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountConvention {
    /// One of the clusters is noise: speakers = clusters − 1.
    #[default]
    ExcludesNoise,
    /// Every cluster is a speaker; one extra noise cluster is added for clustering.
    IncludesNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfConfig {
    pub ifsd: IfsdConfig,
    /// Key width used to scale the similarity logits.
    pub d_k: usize,
    /// Discard the lowest-scoring label. Off means cluster into `n` groups and keep all.
    pub filtering: bool,
    /// Largest cluster count the eigengap estimate may return.
    pub k_max: usize,
    pub convention: CountConvention,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            ifsd: IfsdConfig::default(),
            d_k: 64,
            filtering: true,
            k_max: 5,
            convention: CountConvention::ExcludesNoise,
        }
    }
}

/// Result of clustering and filtering one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct CfOutput {
    pub assignment: ChannelAssignment,
    pub mask: ChannelMask,
    pub similarity: SimilarityMatrix,
    /// Eigengap cluster count, when the speaker count was not given.
    pub estimated_clusters: Option<usize>,
}

/// Clusters the channels of a decoupled feature stack and keeps the speech-like groups.
pub fn cf_layer(x: &FeatureStack, cfg: &CfConfig, n_speakers: Option<usize>, k: Option<usize>) -> Result<CfOutput> {
    if x.axis != ChannelAxis::Decoupled {
        return Err(invalid("clustering expects decoupled channels"));
    }
    cluster_channels(&x.data, cfg, n_speakers, k)
}

/// [`cf_layer`] on a raw `[C', T', d]` value.
pub fn cluster_channels(x: &Tensor, cfg: &CfConfig, n_speakers: Option<usize>, k: Option<usize>) -> Result<CfOutput> {
    cfg.ifsd.validate()?;
    let s = x.shape();
    if s.len() != 3 {
        return Err(invalid(format!("clustering expects [C', T', d], got {s:?}")));
    }
    let c = s[0];
    let similarity = similarity_of(x, cfg.d_k)?;
    let mut estimated_clusters = None;
    let n = match n_speakers {
        Some(0) => return Err(invalid("speaker count must be positive")),
        Some(n) => n,
        None => {
            let est = eigengap_count(&similarity, cfg.k_max.clamp(2, c))?;
            estimated_clusters = Some(est);
            match (cfg.filtering, cfg.convention) {
                (true, CountConvention::ExcludesNoise) => est.saturating_sub(1).max(1),
                _ => est,
            }
        }
    };
    let first_k = k.unwrap_or(if cfg.filtering { n + 1 } else { n });
    if first_k < n || first_k > c {
        return Err(invalid(format!("cluster count {first_k} must be in {n}..={c}")));
    }
    let scores: Vec<f64> = (0..c)
        .map(|i| ifsd(&x.index0(i), &cfg.ifsd))
        .collect::<Result<_>>()?;
    // k-means may leave a cluster empty; retry with more clusters before giving up.
    let mut last_err = None;
    for kk in first_k..=c {
        let labels = spectral_cluster(&similarity, kk)?;
        let num = labels.iter().max().map_or(0, |m| m + 1);
        if num < n {
            last_err = Some(invalid(format!("{num} clusters cannot cover {n} speakers")));
            continue;
        }
        let keep = if cfg.filtering { n } else { num };
        let assignment = filter_labels(&labels, &scores, keep)?;
        let mask = ChannelMask::from_assignment(&assignment);
        return Ok(CfOutput {
            assignment,
            mask,
            similarity,
            estimated_clusters,
        });
    }
    Err(last_err.unwrap_or_else(|| invalid("no clustering attempted")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(sizes: &[usize]) -> SimilarityMatrix {
        let n: usize = sizes.iter().sum();
        let mut id = Vec::new();
        for (b, &s) in sizes.iter().enumerate() {
            id.extend(std::iter::repeat_n(b, s));
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if id[i] == id[j] { 1.0 } else { 0.0 }).collect())
            .collect();
        SimilarityMatrix::from_affinity(&rows).unwrap()
    }

    #[test]
    fn two_blocks_split() {
        assert_eq!(spectral_cluster(&blocks(&[2, 2]), 2).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(spectral_cluster(&blocks(&[2, 2]), 1).unwrap(), vec![0; 4]);
        assert!(spectral_cluster(&blocks(&[2, 2]), 5).is_err());
    }

    #[test]
    fn zero_degree_is_named() {
        let z = SimilarityMatrix::from_affinity(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let err = spectral_cluster(&z, 2).unwrap_err().to_string();
        assert!(err.contains("channel 0"), "{err}");
    }

    #[test]
    fn eigengap_examples() {
        assert_eq!(eigengap_count(&blocks(&[3, 3, 4]), 5).unwrap(), 3);
        assert_eq!(eigengap_count(&blocks(&[6]), 5).unwrap(), 1);
        assert!(eigengap_count(&blocks(&[3, 3]), 1).is_err());
    }

    #[test]
    fn ifsd_constant_and_alternating() {
        let cfg = IfsdConfig { alpha: 5.3, tau: 2 };
        let constant = Tensor::new(vec![6, 2], vec![1.0, 2.0].repeat(6)).unwrap();
        assert!((ifsd(&constant, &cfg).unwrap() - (1.0 - 5.3)).abs() < 1e-12);
        let alt = Tensor::new(vec![6, 2], [1.0, 0.0, 0.0, 3.0].repeat(3)).unwrap();
        assert!((ifsd(&alt, &cfg).unwrap() + 5.3).abs() < 1e-12);
        assert!(ifsd(&Tensor::zeros(&[2, 2]), &cfg).is_err());
        assert!(IfsdConfig { alpha: 1.0, tau: 1 }.validate().is_err());
        assert!(IfsdConfig { alpha: 0.0, tau: 3 }.validate().is_err());
    }

    #[test]
    fn filter_examples() {
        let a = filter_labels(&[0, 1], &[-0.5, -4.0], 1).unwrap();
        assert_eq!(a.kept, vec![0]);
        let b = filter_labels(&[0, 1, 2], &[-1.0, -1.0, -9.0], 2).unwrap();
        assert_eq!(b.kept, vec![0, 1]);
        let c = filter_labels(&[0, 0, 1, 1, 2], &[-9.0, -9.0, 1.0, 3.0, 0.5], 2).unwrap();
        assert_eq!(c.kept, vec![1, 2]);
        assert_eq!(c.label_scores, vec![-9.0, 2.0, 0.5]);
        assert!(filter_labels(&[0, 0], &[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn canonical_relabel() {
        assert_eq!(canonical_labels(&[2, 2, 0, 1, 0]), vec![0, 0, 1, 2, 1]);
    }
}
