//! Multi-channel multi-speaker transformer speech recognition at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: a small deterministic f64 array engine with a reverse-mode tape.
//! * [`signal`]: synthetic multi-microphone mixtures and STFT features.
//! * [`frontend`]: channel embedding and the CNN decoupling/downsampling stack.
//! * [`m2a`]: intra-channel attention, the inter-channel similarity matrix,
//!   similarity-gated cross-channel attention and the fixed-weight baseline.
//! * [`cf`]: spectral clustering of decoupled channels, IFSD scoring, filtering
//!   and eigengap speaker counting.
//! * [`decoder`] and [`loss`]: the per-speaker transformer decoder, CTC,
//!   label-smoothed cross-entropy and permutation-invariant training.
//! * [`model`]: the assembled encoder/decoder.
//! * [`experiments`]: configuration, training, evaluation, checkpoints and ablations.

pub mod cf;
pub mod decoder;
pub mod error;
pub mod experiments;
pub mod frontend;
pub mod layers;
pub mod loss;
pub mod m2a;
pub mod model;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
