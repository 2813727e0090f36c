//! Synthetic multi-microphone mixtures and STFT features.

mod dataset;
mod stft;
mod synth;

pub use dataset::{load_split, write_split, Manifest, Split, UtteranceEntry};
pub use stft::{stft_features, StftConfig};
pub use synth::{
    delay_and_gain, synth_mixture, MultiChannelRecording, SourceMeta, SpeakerMeta, SynthConfig,
    TokenAlphabet,
};

use crate::tensor::Tensor;

/// What the leading axis of a [`FeatureStack`] indexes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelAxis {
    Microphones,
    Decoupled,
}

/// A `channels × frames × features` activation block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub data: Tensor,
    pub axis: ChannelAxis,
    pub frame_rate: f64,
}

impl FeatureStack {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.data.shape()[2]
    }
}
