//! Channel embedding and the CNN decoupling-and-downsampling (CNNDD) stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{sinusoidal_positions, Linear};
use crate::signal::{ChannelAxis, FeatureStack};
use crate::tensor::{he_uniform_init, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Sizes of the magnitude/phase projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEmbedConfig {
    /// STFT bins `F`; input features are `3F` wide.
    pub bins: usize,
    pub mag_dim: usize,
    pub pha_dim: usize,
    /// Embedding width `D`.
    pub out_dim: usize,
}

/// `[X_mag·W_mag + b_mag, X_pha·W_pha + b_pha]·W_emb + b_emb`, shared across channels.
#[derive(Clone, Debug)]
pub struct ChannelEmbed {
    pub cfg: ChannelEmbedConfig,
    pub mag: Linear,
    pub pha: Linear,
    pub emb: Linear,
}

impl ChannelEmbed {
    pub fn new(store: &mut ParamStore, name: &str, cfg: ChannelEmbedConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            mag: Linear::new(store, &format!("{name}.mag"), cfg.bins, cfg.mag_dim, rng)?,
            pha: Linear::new(store, &format!("{name}.pha"), 2 * cfg.bins, cfg.pha_dim, rng)?,
            emb: Linear::new(store, &format!("{name}.emb"), cfg.mag_dim + cfg.pha_dim, cfg.out_dim, rng)?,
            cfg,
        })
    }

    /// `[C, T, 3F] → [C, T, D]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let f = self.cfg.bins;
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != 3 * f {
            return Err(Error::Shape {
                op: "channel_embed",
                lhs: shape,
                rhs: vec![3 * f],
            });
        }
        let mag = self.mag.forward(tape, store, &x.narrow_last(0, f)?)?;
        let pha = self.pha.forward(tape, store, &x.narrow_last(f, 3 * f)?)?;
        self.emb.forward(tape, store, &Var::concat(&[mag, pha])?)
    }
}

/// Evaluates [`ChannelEmbed::forward`] on a microphone feature stack.
pub fn channel_embed(x: &FeatureStack, embed: &ChannelEmbed, store: &ParamStore) -> Result<FeatureStack> {
    if x.axis != ChannelAxis::Microphones {
        return Err(Error::InvalidArgument("channel_embed expects microphone channels".into()));
    }
    let tape = Tape::new();
    let out = embed.forward(&tape, store, &tape.constant(x.data.clone()))?;
    let data = out.value().clone();
    Ok(FeatureStack {
        data,
        axis: ChannelAxis::Microphones,
        frame_rate: x.frame_rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub stride: (usize, usize),
}

/// Convolution schedule of the decoupling stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnddConfig {
    /// Microphones `C`, the input channels of the first convolution.
    pub in_channels: usize,
    /// Embedding width `D`, the convolution width axis.
    pub in_width: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub kernel: (usize, usize),
    pub padding: (usize, usize),
    pub d_model: usize,
}

impl CnnddConfig {
    /// Strides `[2,2]`, `[2,1]`, then ones, for the given output channel list.
    pub fn with_channels(in_channels: usize, in_width: usize, channels: &[usize], d_model: usize) -> Self {
        let layers = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvLayerSpec {
                out_channels: c,
                stride: match i {
                    0 => (2, 2),
                    1 => (2, 1),
                    _ => (1, 1),
                },
            })
            .collect();
        Self {
            in_channels,
            in_width,
            layers,
            kernel: (3, 3),
            padding: (1, 1),
            d_model,
        }
    }

    /// Eight layers with 6, 6, 10, 10, 20, 20, 40, 40 output channels.
    pub fn full_scale(in_channels: usize, in_width: usize, d_model: usize) -> Self {
        Self::with_channels(in_channels, in_width, &[6, 6, 10, 10, 20, 20, 40, 40], d_model)
    }

    /// Decoupled channel count `C'`.
    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.out_channels)
    }

    fn out_len(&self, mut len: usize, axis_w: bool) -> usize {
        let (k, p) = if axis_w {
            (self.kernel.1, self.padding.1)
        } else {
            (self.kernel.0, self.padding.0)
        };
        for l in &self.layers {
            let s = if axis_w { l.stride.1 } else { l.stride.0 };
            len = (len + 2 * p - k) / s + 1;
        }
        len
    }

    /// Output frames `T'` for `frames` input frames.
    pub fn out_frames(&self, frames: usize) -> usize {
        self.out_len(frames, false)
    }

    /// Width `D'` after the convolutions.
    pub fn out_width(&self) -> usize {
        self.out_len(self.in_width, true)
    }

    /// Smallest input length the time strides accept.
    pub fn min_frames(&self) -> usize {
        self.layers.iter().map(|l| l.stride.0).product()
    }
}

/// Convolution stack followed by a per-position `D' → d_model` projection.
#[derive(Clone, Debug)]
pub struct Cnndd {
    pub cfg: CnnddConfig,
    pub kernels: Vec<(ParamId, ParamId)>,
    pub projection: Linear,
}

impl Cnndd {
    pub fn new(store: &mut ParamStore, name: &str, cfg: CnnddConfig, rng: &mut Rng) -> Result<Self> {
        let mut kernels = Vec::with_capacity(cfg.layers.len());
        let mut cin = cfg.in_channels;
        for (i, l) in cfg.layers.iter().enumerate() {
            let (kh, kw) = cfg.kernel;
            let fan_in = cin * kh * kw;
            let kt = he_uniform_init(&[l.out_channels, cin, kh, kw], fan_in, rng);
            let k = store.add(format!("{name}.conv{i}.kernel"), kt)?;
            let b = store.add(format!("{name}.conv{i}.bias"), Tensor::zeros(&[l.out_channels]))?;
            kernels.push((k, b));
            cin = l.out_channels;
        }
        let projection = Linear::new(store, &format!("{name}.proj"), cfg.out_width(), cfg.d_model, rng)?;
        Ok(Self {
            cfg,
            kernels,
            projection,
        })
    }

    /// `[C, T, D] → [C', T', d_model]`, ReLU after every convolution.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: &Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels || shape[2] != self.cfg.in_width {
            return Err(Error::Shape {
                op: "cnndd",
                lhs: shape,
                rhs: vec![self.cfg.in_channels, 0, self.cfg.in_width],
            });
        }
        let min = self.cfg.min_frames();
        if shape[1] < min {
            return Err(Error::InvalidArgument(format!(
                "cnndd needs at least {min} frames, got {}",
                shape[1]
            )));
        }
        let mut h = *x;
        for ((k, b), l) in self.kernels.iter().zip(&self.cfg.layers) {
            h = h
                .conv2d(
                    &tape.param(store, *k),
                    Some(&tape.param(store, *b)),
                    l.stride,
                    self.cfg.padding,
                )?
                .relu()?;
        }
        self.projection.forward(tape, store, &h)
    }
}

/// Evaluates [`Cnndd::forward`]; the result indexes decoupled channels.
pub fn cnndd_forward(x: &FeatureStack, cnndd: &Cnndd, store: &ParamStore) -> Result<FeatureStack> {
    if x.axis != ChannelAxis::Microphones {
        return Err(Error::InvalidArgument("cnndd expects microphone channels".into()));
    }
    let tape = Tape::new();
    let out = cnndd.forward(&tape, store, &tape.constant(x.data.clone()))?;
    let time_stride = cnndd.cfg.min_frames() as f64;
    let data = out.value().clone();
    Ok(FeatureStack {
        data,
        axis: ChannelAxis::Decoupled,
        frame_rate: x.frame_rate / time_stride,
    })
}

/// Adds the sinusoidal position table along the frame axis of `[C, T, d]`.
pub fn add_positional_var<'t>(tape: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::InvalidArgument("positional encoding needs frames and features".into()));
    }
    let pe = sinusoidal_positions(s[s.len() - 2], s[s.len() - 1]);
    x.add(&tape.constant(pe))
}

pub fn add_positional(x: &FeatureStack) -> Result<FeatureStack> {
    let tape = Tape::new();
    let out = add_positional_var(&tape, &tape.constant(x.data.clone()))?;
    let data = out.value().clone();
    Ok(FeatureStack { data, ..x.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn full_scale_shape_arithmetic() {
        let cfg = CnnddConfig::full_scale(6, 256, 256);
        assert_eq!(cfg.out_channels(), 40);
        assert_eq!(cfg.out_frames(100), 25);
        assert_eq!(cfg.out_width(), 128);
        for t in 4..60 {
            assert_eq!(cfg.out_frames(t), t.div_ceil(4));
        }
    }

    #[test]
    fn too_few_frames_names_minimum() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let c = Cnndd::new(&mut store, "c", CnnddConfig::with_channels(2, 8, &[3, 3], 4), &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 8]));
        let msg = c.forward(&tape, &store, &x).unwrap_err().to_string();
        assert!(msg.contains("at least 4 frames"), "{msg}");
    }

    #[test]
    fn positional_row_zero() {
        let pe = sinusoidal_positions(3, 6);
        assert_eq!(pe.index0(0).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let t = 2.0f64;
        assert!((pe.get(&[2, 2]) - (t / 10000f64.powf(2.0 / 6.0)).sin()).abs() < 1e-15);
        assert!((pe.get(&[2, 5]) - (t / 10000f64.powf(4.0 / 6.0)).cos()).abs() < 1e-15);
    }
}
