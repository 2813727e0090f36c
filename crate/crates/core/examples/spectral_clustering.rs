//! Clusters a planted channel-similarity matrix, estimates the cluster count
//! from the Laplacian spectrum, and scores speech-like against noise tracks.
//!
//! `cargo run --release --example spectral_clustering`

use m2former::cf::{eigengap_count, ifsd, laplacian_eigenvalues, spectral_cluster, IfsdConfig};
use m2former::m2a::SimilarityMatrix;
use m2former::tensor::{seeded_rng, Tensor};
use rand::Rng as _;

fn main() -> m2former::Result<()> {
    let mut rng = seeded_rng(7);
    let groups = [0usize, 1, 0, 2, 1, 2, 0, 1];
    let rows: Vec<Vec<f64>> = groups
        .iter()
        .map(|a| groups.iter().map(|b| if a == b { rng.random_range(0.6..1.4) } else { rng.random_range(0.0..0.05) }).collect())
        .collect();
    let z = SimilarityMatrix::from_affinity(&rows)?;
    let eig = laplacian_eigenvalues(&z)?;
    let k = eigengap_count(&z, 5)?;
    println!("eigenvalues {:?}", eig.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    println!("eigengap count {k}");
    println!("planted   {groups:?}");
    println!("recovered {:?}", spectral_cluster(&z, k)?);

    let cfg = IfsdConfig { alpha: 5.3, tau: 3 };
    let omega = std::f64::consts::PI / 6.0;
    let tone = Tensor::from_rows(&(0..40).map(|t| (0..8).map(|j| (omega * t as f64 + j as f64).sin()).collect()).collect::<Vec<_>>())?;
    let noise = Tensor::from_rows(&(0..40).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<_>>())?;
    println!("ifsd: slowly varying track {:.3}, white noise {:.3}", ifsd(&tone, &cfg)?, ifsd(&noise, &cfg)?);
    Ok(())
}
