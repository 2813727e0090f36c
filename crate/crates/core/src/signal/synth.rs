use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::seeded_rng;

const SPEED_OF_SOUND: f64 = 343.0;
const FADE_MS: f64 = 8.0;

/// Token inventory with one two-tone waveform signature per symbol.
///
/// Ids run `1..=size`; id 0 is the CTC blank and has no waveform. Symbol `i`
/// sounds at `300 + 400(i-1)` Hz and 200 Hz above that, so signatures occupy
/// disjoint bands below 4 kHz for up to eight symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAlphabet {
    pub size: usize,
    pub sample_rate: u32,
    pub token_ms: f64,
}

impl TokenAlphabet {
    pub fn new(size: usize, sample_rate: u32, token_ms: f64) -> Result<Self> {
        if size == 0 {
            return Err(invalid("alphabet needs at least one symbol"));
        }
        let top = 300.0 + 400.0 * (size - 1) as f64 + 200.0;
        if top >= sample_rate as f64 / 2.0 {
            return Err(invalid(format!(
                "{size} symbols need a sample rate above {} Hz",
                2.0 * top
            )));
        }
        Ok(Self {
            size,
            sample_rate,
            token_ms,
        })
    }

    pub fn token_samples(&self) -> usize {
        (self.token_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Tone frequencies (Hz) of a symbol.
    pub fn tones(&self, token: u32) -> Result<[f64; 2]> {
        if token == 0 || token as usize > self.size {
            return Err(invalid(format!("token {token} has no waveform")));
        }
        let base = 300.0 + 400.0 * (token - 1) as f64;
        Ok([base, base + 200.0])
    }

    /// Unit-RMS waveform of one symbol, with raised-cosine fades at both ends.
    pub fn signature(&self, token: u32) -> Result<Vec<f64>> {
        let [f1, f2] = self.tones(token)?;
        let n = self.token_samples();
        let fs = self.sample_rate as f64;
        let fade = ((FADE_MS * fs / 1000.0) as usize).min(n / 2).max(1);
        let mut w: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                let env = if i < fade {
                    0.5 - 0.5 * (PI * i as f64 / fade as f64).cos()
                } else if i >= n - fade {
                    0.5 - 0.5 * (PI * (n - 1 - i) as f64 / fade as f64).cos()
                } else {
                    1.0
                };
                env * ((2.0 * PI * f1 * t).sin() + 0.6 * (2.0 * PI * f2 * t + 0.5).sin())
            })
            .collect();
        let rms = (w.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        w.iter_mut().for_each(|x| *x /= rms);
        Ok(w)
    }

    /// Dry source waveform for a token sequence.
    pub fn render(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(tokens.len() * self.token_samples());
        for &t in tokens {
            out.extend(self.signature(t)?);
        }
        Ok(out)
    }
}

/// Parameters of the mixture generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub n_mics: usize,
    pub seed: u64,
    /// `None` disables additive noise.
    pub snr_db: Option<f64>,
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub sample_rate: u32,
    pub token_ms: f64,
    pub mic_radius_m: f64,
    pub source_distance_m: f64,
    /// Speakers sit at `2πs/n + base_angle` radians plus uniform jitter of this half-width.
    pub angle_jitter: f64,
    pub base_angle: f64,
    /// Forces every gain to 1 (pure delays).
    pub unit_gains: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 2,
            n_mics: 4,
            seed: 0,
            snr_db: Some(10.0),
            vocab_size: 8,
            min_tokens: 2,
            max_tokens: 3,
            sample_rate: 8000,
            token_ms: 120.0,
            mic_radius_m: 0.1,
            source_distance_m: 1.5,
            angle_jitter: PI / 6.0,
            base_angle: 0.0,
            unit_gains: false,
        }
    }
}

impl SynthConfig {
    pub fn alphabet(&self) -> Result<TokenAlphabet> {
        TokenAlphabet::new(self.vocab_size, self.sample_rate, self.token_ms)
    }

    /// Upper bound on any inter-microphone delay, in samples.
    pub fn max_delay(&self) -> usize {
        (2.0 * self.mic_radius_m / SPEED_OF_SOUND * self.sample_rate as f64).ceil() as usize + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerMeta {
    pub angle: f64,
    /// Integer sample delay per microphone.
    pub delays: Vec<usize>,
    /// Gain per microphone, in [0.5, 1.0].
    pub gains: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub speakers: Vec<SpeakerMeta>,
    pub snr_db: Option<f64>,
    pub noise_std: f64,
}

/// A C-microphone waveform set with its per-speaker references.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelRecording {
    /// `samples[c]` is microphone `c`; all channels share one length.
    pub samples: Vec<Vec<f64>>,
    pub sample_rate: u32,
    pub transcripts: Vec<Vec<u32>>,
    pub source_meta: SourceMeta,
}

impl MultiChannelRecording {
    pub fn n_mics(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Adds `gain · src` delayed by `delay` samples into `out`.
pub fn delay_and_gain(src: &[f64], delay: usize, gain: f64, out: &mut [f64]) {
    for (i, &s) in src.iter().enumerate() {
        if let Some(o) = out.get_mut(i + delay) {
            *o += gain * s;
        }
    }
}

/// Draws one mixture. The result is a pure function of `cfg`.
pub fn synth_mixture(cfg: &SynthConfig) -> Result<MultiChannelRecording> {
    if cfg.n_speakers == 0 {
        return Err(invalid("need at least one speaker"));
    }
    if cfg.n_mics < 2 {
        return Err(invalid("need at least two microphones"));
    }
    if cfg.min_tokens == 0 || cfg.min_tokens > cfg.max_tokens {
        return Err(invalid("token count range must satisfy 1 <= min <= max"));
    }
    if cfg.vocab_size < 2 && cfg.max_tokens > 1 {
        return Err(invalid("sequences without repeats need at least two symbols"));
    }
    let alphabet = cfg.alphabet()?;
    let mut rng = seeded_rng(cfg.seed);

    let mut transcripts = Vec::with_capacity(cfg.n_speakers);
    for _ in 0..cfg.n_speakers {
        let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let mut seq: Vec<u32> = Vec::with_capacity(len);
        while seq.len() < len {
            let t = rng.random_range(1..=cfg.vocab_size as u32);
            if seq.last() != Some(&t) {
                seq.push(t);
            }
        }
        transcripts.push(seq);
    }

    let fs = cfg.sample_rate as f64;
    let mut speakers = Vec::with_capacity(cfg.n_speakers);
    for s in 0..cfg.n_speakers {
        let jitter = if cfg.angle_jitter > 0.0 {
            rng.random_range(-cfg.angle_jitter..=cfg.angle_jitter)
        } else {
            0.0
        };
        let angle = 2.0 * PI * s as f64 / cfg.n_speakers as f64 + cfg.base_angle + jitter;
        let (sx, sy) = (cfg.source_distance_m * angle.cos(), cfg.source_distance_m * angle.sin());
        let dists: Vec<f64> = (0..cfg.n_mics)
            .map(|c| {
                let phi = 2.0 * PI * c as f64 / cfg.n_mics as f64;
                let (mx, my) = (cfg.mic_radius_m * phi.cos(), cfg.mic_radius_m * phi.sin());
                ((sx - mx).powi(2) + (sy - my).powi(2)).sqrt()
            })
            .collect();
        let nearest = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let delays = dists
            .iter()
            .map(|d| ((d - nearest) / SPEED_OF_SOUND * fs).round() as usize)
            .collect();
        let gains = (0..cfg.n_mics)
            .map(|c| {
                if cfg.unit_gains {
                    1.0
                } else {
                    let phi = 2.0 * PI * c as f64 / cfg.n_mics as f64;
                    0.75 + 0.25 * (angle - phi).cos()
                }
            })
            .collect();
        speakers.push(SpeakerMeta { angle, delays, gains });
    }

    let sources: Vec<Vec<f64>> = transcripts
        .iter()
        .map(|t| alphabet.render(t))
        .collect::<Result<_>>()?;
    let n = sources.iter().map(Vec::len).max().unwrap_or(0) + cfg.max_delay();
    let mut samples = vec![vec![0.0; n]; cfg.n_mics];
    for (src, meta) in sources.iter().zip(&speakers) {
        for (c, ch) in samples.iter_mut().enumerate() {
            delay_and_gain(src, meta.delays[c], meta.gains[c], ch);
        }
    }

    let mut noise_std = 0.0;
    if let Some(snr) = cfg.snr_db {
        if !snr.is_finite() {
            return Err(invalid("snr_db must be finite"));
        }
        let power = samples.iter().flatten().map(|x| x * x).sum::<f64>() / (n * cfg.n_mics) as f64;
        noise_std = (power / 10f64.powf(snr / 10.0)).sqrt();
        if power <= 0.0 || noise_std == 0.0 || !noise_std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "signal power {power} cannot support an SNR of {snr} dB"
            )));
        }
        let normal = Normal::new(0.0, noise_std).map_err(|e| invalid(e.to_string()))?;
        for ch in &mut samples {
            for x in ch.iter_mut() {
                *x += normal.sample(&mut rng);
            }
        }
    }

    Ok(MultiChannelRecording {
        samples,
        sample_rate: cfg.sample_rate,
        transcripts,
        source_meta: SourceMeta {
            speakers,
            snr_db: cfg.snr_db,
            noise_std,
        },
    })
}
