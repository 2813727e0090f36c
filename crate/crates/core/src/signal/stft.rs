use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{ChannelAxis, FeatureStack, MultiChannelRecording};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_ms: f64,
    pub shift_ms: f64,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            shift_ms: 10.0,
            fft_size: 256,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// `1 + floor((n - frame) / shift)`, or `None` when `n < frame`.
    pub fn frame_count(&self, n: usize, sample_rate: u32) -> Option<usize> {
        let frame = self.frame_samples(sample_rate);
        let shift = self.shift_samples(sample_rate);
        (n >= frame).then(|| 1 + (n - frame) / shift)
    }
}

/// Magnitude and phase features of every microphone, `C × T × 3F`.
///
/// Each frame holds the `F` magnitudes followed by `F` interleaved
/// `(cos θ, sin θ)` pairs. Magnitudes are divided by the root of the window
/// energy, so unit-variance white noise has unit mean-square magnitude in
/// every bin. Bins with zero
/// magnitude get phase `(1, 0)`. Analysis uses a periodic Hann window.
pub fn stft_features(rec: &MultiChannelRecording, cfg: &StftConfig) -> Result<FeatureStack> {
    let frame = cfg.frame_samples(rec.sample_rate);
    let shift = cfg.shift_samples(rec.sample_rate);
    if frame == 0 || shift == 0 {
        return Err(invalid("frame and shift must span at least one sample"));
    }
    if frame > cfg.fft_size {
        return Err(invalid(format!(
            "frame of {frame} samples exceeds fft size {}",
            cfg.fft_size
        )));
    }
    let frames = cfg.frame_count(rec.len(), rec.sample_rate).ok_or_else(|| {
        invalid(format!(
            "recording of {} samples is shorter than one {frame}-sample frame",
            rec.len()
        ))
    })?;
    let bins = cfg.bins();
    let window: Vec<f64> = (0..frame)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / frame as f64).cos())
        .collect();
    let wnorm = window.iter().map(|w| w * w).sum::<f64>().sqrt();
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let feat = 3 * bins;
    let mut data = vec![0.0; rec.n_mics() * frames * feat];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for (c, ch) in rec.samples.iter().enumerate() {
        for t in 0..frames {
            buf.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
            for (i, w) in window.iter().enumerate() {
                buf[i].re = ch[t * shift + i] * w;
            }
            fft.process(&mut buf);
            let row = &mut data[(c * frames + t) * feat..(c * frames + t + 1) * feat];
            for k in 0..bins {
                let z = buf[k];
                let mag = z.norm();
                row[k] = mag / wnorm;
                let (cs, sn) = if mag > 0.0 { (z.re / mag, z.im / mag) } else { (1.0, 0.0) };
                row[bins + 2 * k] = cs;
                row[bins + 2 * k + 1] = sn;
            }
        }
    }
    Ok(FeatureStack {
        data: Tensor::new(vec![rec.n_mics(), frames, feat], data)?,
        axis: ChannelAxis::Microphones,
        frame_rate: rec.sample_rate as f64 / shift as f64,
    })
}
