//! The full recogniser: channel embedding, decoupling CNN, two stages of
//! encoder blocks around the clustering layer, per-speaker averaging, a shared
//! CTC head and a shared attention decoder.

use serde::{Deserialize, Serialize};

use crate::cf::{cluster_channels, CfConfig, CfOutput, CountConvention, IfsdConfig};
use crate::decoder::{argmax, Decoder, DecoderConfig};
use crate::error::{invalid, Result};
use crate::frontend::{add_positional_var, ChannelEmbed, ChannelEmbedConfig, Cnndd, CnnddConfig};
use crate::layers::{LayerNorm, Linear};
use crate::loss::{pit_loss, LossConfig, PitResult};
use crate::m2a::{run_blocks, speaker_average, CrossVariant, M2ABlock};
use crate::tensor::{seeded_rng, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Microphones `C`.
    pub mics: usize,
    /// STFT bins `F`.
    pub bins: usize,
    pub mag_dim: usize,
    pub pha_dim: usize,
    pub embed_dim: usize,
    /// Output channels of each convolution in the decoupling stack.
    pub cnndd_channels: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
    /// Encoder blocks before the clustering layer.
    pub blocks_before_cf: usize,
    /// Encoder blocks after the clustering layer.
    pub blocks_after_cf: usize,
    pub decoder_layers: usize,
    /// Alphabet size `V`.
    pub vocab: usize,
    pub variant: CrossVariant,
    /// Cluster between the two stages and mask the second stage's cross attention.
    /// When off (always off for the learned-mixing variant) clustering runs after the last block.
    pub cf_enabled: bool,
    /// Cluster into `n + 1` groups and drop the least speech-like one.
    pub ifsd_enabled: bool,
    pub ifsd: IfsdConfig,
    pub k_max: usize,
    pub count_convention: CountConvention,
    /// Extra linear layer on each speaker stream.
    pub smoothing_layer: bool,
}

impl ModelConfig {
    /// Small enough to train on one CPU core in minutes.
    pub fn micro(mics: usize, bins: usize, vocab: usize) -> Self {
        Self {
            mics,
            bins,
            mag_dim: 64,
            pha_dim: 8,
            embed_dim: 32,
            cnndd_channels: vec![4, 4, 8, 8],
            d_model: 16,
            heads: 2,
            ff: 32,
            blocks_before_cf: 1,
            blocks_after_cf: 1,
            decoder_layers: 1,
            vocab,
            variant: CrossVariant::M2a,
            cf_enabled: true,
            ifsd_enabled: true,
            ifsd: IfsdConfig { alpha: 5.3, tau: 3 },
            k_max: 5,
            count_convention: CountConvention::ExcludesNoise,
            smoothing_layer: false,
        }
    }

    /// 64-wide model with 2 + 2 encoder blocks and two decoder layers.
    pub fn desk(mics: usize, bins: usize, vocab: usize) -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ff: 128,
            blocks_before_cf: 2,
            blocks_after_cf: 2,
            decoder_layers: 2,
            ..Self::micro(mics, bins, vocab)
        }
    }

    /// 256-wide model with 3 + 3 encoder blocks, 6 decoder blocks and the
    /// eight-layer decoupling stack.
    pub fn paper_scale(mics: usize, bins: usize, vocab: usize) -> Self {
        Self {
            mag_dim: 128,
            pha_dim: 128,
            embed_dim: 256,
            cnndd_channels: vec![6, 6, 10, 10, 20, 20, 40, 40],
            d_model: 256,
            heads: 4,
            ff: 1024,
            blocks_before_cf: 3,
            blocks_after_cf: 3,
            decoder_layers: 6,
            ifsd: IfsdConfig::default(),
            ..Self::micro(mics, bins, vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_before_cf + self.blocks_after_cf == 0 {
            return Err(invalid("the encoder needs at least one block"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.variant == CrossVariant::Mct && self.cf_enabled {
            return Err(invalid("learned-weight cross attention cannot be split by clustering"));
        }
        if self.cnndd_channels.is_empty() {
            return Err(invalid("the decoupling stack needs at least one layer"));
        }
        if self.cnndd_channels[self.cnndd_channels.len() - 1] < 2 {
            return Err(invalid("clustering needs at least two decoupled channels"));
        }
        if self.vocab == 0 || self.mics == 0 || self.bins == 0 {
            return Err(invalid("vocab, mics and bins must be positive"));
        }
        self.ifsd.validate()
    }

    pub fn cnndd(&self) -> CnnddConfig {
        CnnddConfig::with_channels(self.mics, self.embed_dim, &self.cnndd_channels, self.d_model)
    }

    pub fn decoupled_channels(&self) -> usize {
        self.cnndd().out_channels()
    }

    pub fn cf(&self) -> CfConfig {
        CfConfig {
            ifsd: self.ifsd,
            d_k: self.d_model / self.heads,
            filtering: self.ifsd_enabled,
            k_max: self.k_max,
            convention: self.count_convention,
        }
    }

    fn cf_between(&self) -> bool {
        self.cf_enabled && self.variant != CrossVariant::Mct
    }
}

/// Encoder output for one utterance.
pub struct Encoded<'t> {
    /// One `[T', d]` stream per kept speaker, best-scoring first.
    pub streams: Vec<Var<'t>>,
    pub cf: CfOutput,
}

/// Decoded hypotheses for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcription {
    pub attention: Vec<Vec<u32>>,
    /// Collapsed greedy CTC paths.
    pub ctc: Vec<Vec<u32>>,
    pub speakers: usize,
    pub estimated_clusters: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct M2Former {
    pub config: ModelConfig,
    embed: ChannelEmbed,
    cnndd: Cnndd,
    before: Vec<M2ABlock>,
    after: Vec<M2ABlock>,
    smoothing: Option<Linear>,
    final_norm: LayerNorm,
    pub ctc_head: Linear,
    pub decoder: Decoder,
}

impl M2Former {
    /// Builds the model and registers its parameters, initialised from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let c = &config;
        let embed = ChannelEmbed::new(
            &mut store,
            "embed",
            ChannelEmbedConfig {
                bins: c.bins,
                mag_dim: c.mag_dim,
                pha_dim: c.pha_dim,
                out_dim: c.embed_dim,
            },
            &mut rng,
        )?;
        let cnndd = Cnndd::new(&mut store, "cnndd", c.cnndd(), &mut rng)?;
        let channels = c.decoupled_channels();
        let (n_before, n_after) = if c.cf_between() {
            (c.blocks_before_cf, c.blocks_after_cf)
        } else {
            (c.blocks_before_cf + c.blocks_after_cf, 0)
        };
        let mut block = |name: String, store: &mut ParamStore| {
            M2ABlock::new(store, &name, c.d_model, c.heads, c.ff, c.variant, channels, &mut rng)
        };
        let before = (0..n_before)
            .map(|i| block(format!("enc{i}"), &mut store))
            .collect::<Result<Vec<_>>>()?;
        let after = (0..n_after)
            .map(|i| block(format!("enc{}", n_before + i), &mut store))
            .collect::<Result<Vec<_>>>()?;
        let smoothing = if c.smoothing_layer {
            Some(Linear::new(&mut store, "smooth", c.d_model, c.d_model, &mut rng)?)
        } else {
            None
        };
        let final_norm = LayerNorm::new(&mut store, "enc_norm", c.d_model)?;
        let ctc_head = Linear::new(&mut store, "ctc", c.d_model, c.vocab + 1, &mut rng)?;
        let decoder = Decoder::new(
            &mut store,
            "dec",
            DecoderConfig {
                vocab: c.vocab,
                d_model: c.d_model,
                heads: c.heads,
                ff: c.ff,
                layers: c.decoder_layers,
            },
            &mut rng,
        )?;
        Ok((
            Self {
                config,
                embed,
                cnndd,
                before,
                after,
                smoothing,
                final_norm,
                ctc_head,
                decoder,
            },
            store,
        ))
    }

    /// Decoupled features `[C', T', d]` entering the clustering layer: the
    /// output of the blocks before it, or of the last block when clustering
    /// only splits speakers at the end.
    pub fn cf_input<'t>(&self, tape: &'t Tape, store: &ParamStore, feats: &Tensor) -> Result<Var<'t>> {
        let x = tape.constant(feats.clone());
        let h = self.embed.forward(tape, store, &x)?;
        let h = self.cnndd.forward(tape, store, &h)?;
        let h = add_positional_var(tape, &h)?.dropout()?;
        run_blocks(tape, store, &self.before, &h, None)
    }

    /// `feats: [C, T, 3F]` → per-speaker encoder streams. `n_speakers = None`
    /// estimates the count from the similarity spectrum.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        feats: &Tensor,
        n_speakers: Option<usize>,
    ) -> Result<Encoded<'t>> {
        let mut h = self.cf_input(tape, store, feats)?;
        let cf_cfg = self.config.cf();
        let cf = if self.config.cf_between() {
            let cf = cluster_channels(&h.value(), &cf_cfg, n_speakers, None)?;
            h = run_blocks(tape, store, &self.after, &h, Some(&cf.mask))?;
            cf
        } else {
            cluster_channels(&h.value(), &cf_cfg, n_speakers, None)?
        };
        let mut streams = speaker_average(&h, &cf.assignment)?;
        for s in &mut streams {
            if let Some(l) = &self.smoothing {
                *s = l.forward(tape, store, s)?;
            }
            *s = self.final_norm.forward(tape, store, s)?;
        }
        Ok(Encoded { streams, cf })
    }

    /// Joint CTC/attention loss for one utterance with references in any order.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        feats: &Tensor,
        refs: &[Vec<u32>],
        cfg: &LossConfig,
    ) -> Result<PitResult<'t>> {
        let enc = self.encode(tape, store, feats, Some(refs.len()))?;
        pit_loss(tape, store, &self.ctc_head, &self.decoder, &enc.streams, refs, cfg)
    }

    /// Greedy decoding of every speaker stream.
    pub fn transcribe(&self, store: &ParamStore, feats: &Tensor, n_speakers: Option<usize>, max_len: usize) -> Result<Transcription> {
        let tape = Tape::new();
        let enc = self.encode(&tape, store, feats, n_speakers)?;
        let mut attention = Vec::with_capacity(enc.streams.len());
        let mut ctc = Vec::with_capacity(enc.streams.len());
        for s in &enc.streams {
            let value = s.value().clone();
            attention.push(self.decoder.greedy_decode(store, &value, max_len)?);
            let logits = self.ctc_head.forward(&tape, store, s)?;
            let lv = logits.value();
            let width = self.config.vocab + 1;
            let path: Vec<u32> = lv.data().chunks(width).map(|r| argmax(r) as u32).collect();
            ctc.push(collapse_ctc(&path));
        }
        Ok(Transcription {
            speakers: attention.len(),
            attention,
            ctc,
            estimated_clusters: enc.cf.estimated_clusters,
        })
    }
}

/// Merges repeats and drops blanks.
pub fn collapse_ctc(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_rules() {
        assert_eq!(collapse_ctc(&[0, 1, 1, 0, 1, 2, 2, 0]), vec![1, 1, 2]);
        assert!(collapse_ctc(&[0, 0]).is_empty());
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::micro(4, 129, 8);
        assert!(c.validate().is_ok());
        c.variant = CrossVariant::Mct;
        assert!(c.validate().is_err());
        c.cf_enabled = false;
        assert!(c.validate().is_ok());
        c.blocks_before_cf = 0;
        c.blocks_after_cf = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn micro_forward_shapes() {
        let cfg = ModelConfig {
            bins: 9,
            ..ModelConfig::micro(2, 9, 3)
        };
        let (model, store) = M2Former::new(cfg, 5).unwrap();
        let feats = Tensor::new(vec![2, 24, 27], (0..2 * 24 * 27).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect()).unwrap();
        let tape = Tape::new();
        let enc = model.encode(&tape, &store, &feats, Some(2)).unwrap();
        assert_eq!(enc.streams.len(), 2);
        assert_eq!(enc.streams[0].shape(), vec![6, 16]);
        let pit = model.loss(&tape, &store, &feats, &[vec![1, 2], vec![3]], &LossConfig::default()).unwrap();
        assert!(pit.total.item().is_finite());
    }
}
