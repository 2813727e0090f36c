use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cf::{CountConvention, IfsdConfig};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::m2a::CrossVariant;
use crate::model::ModelConfig;
use crate::signal::{StftConfig, SynthConfig};

/// Every knob of a data/model/training run, as one flat table.
///
/// The on-disk form is TOML with exactly these keys; missing keys take the
/// [`ExperimentConfig::micro`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // data
    pub speakers: usize,
    pub mics: usize,
    pub train_utts: usize,
    pub test_utts: usize,
    /// `None` (key absent) means noiseless mixtures.
    pub snr_db: Option<f64>,
    pub data_seed: u64,
    pub vocab: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub sample_rate: u32,
    pub token_ms: f64,
    pub frame_ms: f64,
    pub shift_ms: f64,
    pub fft_size: usize,

    // model
    pub mag_dim: usize,
    pub pha_dim: usize,
    pub embed_dim: usize,
    pub cnndd_channels: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
    pub blocks_before_cf: usize,
    pub blocks_after_cf: usize,
    pub decoder_layers: usize,
    pub variant: CrossVariant,
    pub cf_enabled: bool,
    pub ifsd_enabled: bool,
    pub ifsd_alpha: f64,
    pub ifsd_tau: usize,
    pub k_max: usize,
    pub count_convention: CountConvention,
    pub smoothing_layer: bool,
    /// Give the true speaker count to the clustering layer at evaluation.
    pub known_speaker_count: bool,

    // loss
    pub ctc_weight: f64,
    pub label_smoothing: f64,

    // optimiser
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Dropout on embeddings and sublayer outputs during training.
    pub dropout: f64,
    /// Decoupled decay on weight matrices and kernels, scaled by the learning rate.
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub max_decode_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl ExperimentConfig {
    /// One-core setting: 2 speakers, 4 microphones, 8 kHz audio, 8 tokens.
    pub fn micro() -> Self {
        let synth = SynthConfig::default();
        let stft = StftConfig::default();
        let model = ModelConfig::micro(synth.n_mics, stft.bins(), synth.vocab_size);
        let mut cfg = Self {
            speakers: synth.n_speakers,
            mics: synth.n_mics,
            train_utts: 200,
            test_utts: 50,
            snr_db: synth.snr_db,
            data_seed: 1,
            vocab: synth.vocab_size,
            min_tokens: synth.min_tokens,
            max_tokens: synth.max_tokens,
            sample_rate: synth.sample_rate,
            token_ms: synth.token_ms,
            frame_ms: stft.frame_ms,
            shift_ms: stft.shift_ms,
            fft_size: stft.fft_size,
            mag_dim: 0,
            pha_dim: 0,
            embed_dim: 0,
            cnndd_channels: Vec::new(),
            d_model: 0,
            heads: 0,
            ff: 0,
            blocks_before_cf: 0,
            blocks_after_cf: 0,
            decoder_layers: 0,
            variant: CrossVariant::M2a,
            cf_enabled: true,
            ifsd_enabled: true,
            ifsd_alpha: 0.0,
            ifsd_tau: 0,
            k_max: 0,
            count_convention: CountConvention::ExcludesNoise,
            smoothing_layer: false,
            known_speaker_count: true,
            ctc_weight: LossConfig::default().lambda,
            label_smoothing: LossConfig::default().smoothing,
            learning_rate: 3e-3,
            warmup_steps: 400,
            steps: 2000,
            batch_size: 4,
            clip_norm: 5.0,
            dropout: 0.0,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            seed: 1,
            max_decode_len: 8,
        };
        cfg.set_model(&model);
        cfg
    }

    /// The micro data setting with the 64-wide, 2 + 2 + 2 block model.
    pub fn desk() -> Self {
        let mut cfg = Self::micro();
        let model = ModelConfig::desk(cfg.mics, cfg.stft().bins(), cfg.vocab);
        cfg.set_model(&model);
        cfg
    }

    /// The micro data setting with the 256-wide, 3 + 3 + 6 block model.
    pub fn paper_scale() -> Self {
        let mut cfg = Self::micro();
        let model = ModelConfig::paper_scale(cfg.mics, cfg.stft().bins(), cfg.vocab);
        cfg.set_model(&model);
        cfg.dropout = 0.1;
        cfg
    }

    fn set_model(&mut self, m: &ModelConfig) {
        self.mag_dim = m.mag_dim;
        self.pha_dim = m.pha_dim;
        self.embed_dim = m.embed_dim;
        self.cnndd_channels = m.cnndd_channels.clone();
        self.d_model = m.d_model;
        self.heads = m.heads;
        self.ff = m.ff;
        self.blocks_before_cf = m.blocks_before_cf;
        self.blocks_after_cf = m.blocks_after_cf;
        self.decoder_layers = m.decoder_layers;
        self.variant = m.variant;
        self.cf_enabled = m.cf_enabled;
        self.ifsd_enabled = m.ifsd_enabled;
        self.ifsd_alpha = m.ifsd.alpha;
        self.ifsd_tau = m.ifsd.tau;
        self.k_max = m.k_max;
        self.count_convention = m.count_convention;
        self.smoothing_layer = m.smoothing_layer;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_toml(&text)?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss().validate().map_err(|e| Error::Config(e.to_string()))?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning_rate and clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay < 1.0) {
            return bad("weight_decay must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.speakers == 0 || self.speakers > 4 {
            return bad("speakers must be in 1..=4");
        }
        if self.max_decode_len == 0 {
            return bad("max_decode_len must be positive");
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            mics: self.mics,
            bins: self.stft().bins(),
            mag_dim: self.mag_dim,
            pha_dim: self.pha_dim,
            embed_dim: self.embed_dim,
            cnndd_channels: self.cnndd_channels.clone(),
            d_model: self.d_model,
            heads: self.heads,
            ff: self.ff,
            blocks_before_cf: self.blocks_before_cf,
            blocks_after_cf: self.blocks_after_cf,
            decoder_layers: self.decoder_layers,
            vocab: self.vocab,
            variant: self.variant,
            cf_enabled: self.cf_enabled,
            ifsd_enabled: self.ifsd_enabled,
            ifsd: IfsdConfig {
                alpha: self.ifsd_alpha,
                tau: self.ifsd_tau,
            },
            k_max: self.k_max,
            count_convention: self.count_convention,
            smoothing_layer: self.smoothing_layer,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.ctc_weight,
            smoothing: self.label_smoothing,
        }
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig {
            frame_ms: self.frame_ms,
            shift_ms: self.shift_ms,
            fft_size: self.fft_size,
        }
    }

    /// Mixture settings for utterance seed `seed`.
    pub fn synth(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_speakers: self.speakers,
            n_mics: self.mics,
            seed,
            snr_db: self.snr_db,
            vocab_size: self.vocab,
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
            sample_rate: self.sample_rate,
            token_ms: self.token_ms,
            ..SynthConfig::default()
        }
    }

    /// First utterance seed of the training split; the test split starts half a million later.
    pub fn train_seed_base(&self) -> u64 {
        self.data_seed.wrapping_mul(1_000_000)
    }

    pub fn test_seed_base(&self) -> u64 {
        self.train_seed_base().wrapping_add(500_000)
    }
}
