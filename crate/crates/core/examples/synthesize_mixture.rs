//! Generates one multi-microphone mixture and prints its geometry, the
//! transcripts and the shape and energy of the STFT feature stack.
//!
//! `cargo run --release --example synthesize_mixture -- [seed] [speakers] [mics]`

use m2former::signal::{stft_features, synth_mixture, StftConfig, SynthConfig};

fn main() -> m2former::Result<()> {
    let arg = |i: usize, default: u64| std::env::args().nth(i).map_or(default, |s| s.parse().expect("integer argument"));
    let cfg = SynthConfig {
        seed: arg(1, 0),
        n_speakers: arg(2, 2) as usize,
        n_mics: arg(3, 4) as usize,
        ..SynthConfig::default()
    };
    let rec = synth_mixture(&cfg)?;
    println!("{} mics, {} samples at {} Hz, noise std {:.4}", rec.n_mics(), rec.len(), rec.sample_rate, rec.source_meta.noise_std);
    for (s, (meta, tokens)) in rec.source_meta.speakers.iter().zip(&rec.transcripts).enumerate() {
        let gains: Vec<String> = meta.gains.iter().map(|g| format!("{g:.2}")).collect();
        println!(
            "speaker {s}: angle {:6.1}°  tokens {tokens:?}  delays {:?}  gains [{}]",
            meta.angle.to_degrees(),
            meta.delays,
            gains.join(", ")
        );
    }
    let stft = StftConfig::default();
    let feats = stft_features(&rec, &stft)?;
    println!("features {:?} (magnitude and cos/sin phase per bin), {} frames/s", feats.data.shape(), feats.frame_rate);
    let bins = stft.bins();
    for c in 0..rec.n_mics() {
        let ch = feats.data.index0(c);
        let energy: f64 = ch.data().chunks(3 * bins).map(|row| row[..bins].iter().map(|m| m * m).sum::<f64>()).sum();
        println!("mic {c}: magnitude energy {energy:.1}");
    }
    Ok(())
}
