//! Configuration, training, checkpoints, evaluation and ablations.

mod ablation;
mod checkpoint;
mod config;
mod eval;
mod train;

pub use ablation::{ablation_csv, parse_axes, run_ablation, AblationAxis, AblationRow};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::ExperimentConfig;
pub use eval::{evaluate, evaluate_model, score_utterance, EvalReport, UtteranceScore};
pub use train::{
    featurize, learning_rate, load_utterances, loss_csv, synth_utterances, train, train_model, StepLog, TrainOutcome,
    Utterance,
};
