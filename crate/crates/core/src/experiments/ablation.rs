use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::evaluate_model;
use super::train::{train_model, Utterance};
use crate::error::{Error, Result};
use crate::m2a::CrossVariant;

/// One component removed or replaced relative to the complete model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    /// Two-layer convolution stack instead of the full decoupling stack.
    Cnndd,
    /// No encoder blocks before clustering.
    M2a1,
    /// No encoder blocks after clustering; a linear layer smooths each stream instead.
    M2a2,
    /// Cluster into exactly `n` groups and keep them all.
    Ifsd,
    /// Learned fixed channel mixing in every block, clustering only at the end.
    Mct,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [Self::Cnndd, Self::M2a1, Self::M2a2, Self::Ifsd, Self::Mct];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cnndd => "cnndd",
            Self::M2a1 => "m2a1",
            Self::M2a2 => "m2a2",
            Self::Ifsd => "ifsd",
            Self::Mct => "mct",
        }
    }

    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Self::Cnndd => {
                let last = *base.cnndd_channels.last().expect("validated non-empty");
                cfg.cnndd_channels = vec![last, last];
            }
            Self::M2a1 => cfg.blocks_before_cf = 0,
            Self::M2a2 => {
                cfg.blocks_after_cf = 0;
                cfg.smoothing_layer = true;
            }
            Self::Ifsd => cfg.ifsd_enabled = false,
            Self::Mct => {
                cfg.variant = CrossVariant::Mct;
                cfg.cf_enabled = false;
            }
        }
        cfg
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

/// Parses a comma-separated axis list; the empty string is no axes.
pub fn parse_axes(list: &str) -> Result<Vec<AblationAxis>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `complete` or `-<axis>`.
    pub cell: String,
    pub token_error_rate: f64,
    pub ctc_token_error_rate: f64,
    pub final_loss: f64,
}

/// Trains and evaluates the complete model and one cell per axis on the same data.
pub fn run_ablation(
    base: &ExperimentConfig,
    axes: &[AblationAxis],
    train: &[Utterance],
    test: &[Utterance],
) -> Result<Vec<AblationRow>> {
    let mut cells = vec![("complete".to_string(), base.clone())];
    for a in axes {
        let cfg = a.apply(base);
        cfg.validate()?;
        cells.push((format!("-{}", a.name()), cfg));
    }
    cells
        .into_iter()
        .map(|(cell, cfg)| {
            let out = train_model(&cfg, train)?;
            let report = evaluate_model(&out.model, &out.store, &cfg, test, cfg.known_speaker_count)?;
            Ok(AblationRow {
                cell,
                token_error_rate: report.token_error_rate,
                ctc_token_error_rate: report.ctc_token_error_rate,
                final_loss: out.log.last().map_or(f64::NAN, |l| l.loss),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("cell,token_error_rate,ctc_token_error_rate,final_loss\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.cell, r.token_error_rate, r.ctc_token_error_rate, r.final_loss)
            .expect("write to string");
    }
    s
}
