use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use m2former::experiments::{
    ablation_csv, evaluate, parse_axes, run_ablation, synth_utterances, train, ExperimentConfig,
};
use m2former::signal::write_split;

#[derive(Parser)]
#[command(name = "m2former", about = "Multi-channel multi-speaker recogniser on synthetic mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a split of mixtures into a directory.
    GenData {
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        #[arg(long, default_value_t = 4)]
        mics: usize,
        #[arg(long, default_value_t = 200)]
        utts: usize,
        /// Omit for noiseless mixtures.
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a split; writes model.ckpt and loss.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the 256-wide configuration when no config file is given.
        #[arg(long, conflicts_with = "desk")]
        paper_scale: bool,
        /// Use the 64-wide configuration when no config file is given.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a split; writes report.json.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Estimate the number of speakers instead of using the reference count.
        #[arg(long)]
        unknown_count: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train and score the complete model and each ablated variant on the
    /// config's synthetic data; writes ablation.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of cnndd,m2a1,m2a2,ifsd,mct.
        #[arg(long, default_value = "")]
        axes: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>, paper_scale: bool, desk: bool) -> m2former::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None if paper_scale => Ok(ExperimentConfig::paper_scale()),
        None if desk => Ok(ExperimentConfig::desk()),
        None => Ok(ExperimentConfig::micro()),
    }
}

fn run(cli: Cli) -> m2former::Result<()> {
    match cli.command {
        Command::GenData {
            speakers,
            mics,
            utts,
            snr_db,
            seed,
            split,
            out,
        } => {
            let cfg = ExperimentConfig {
                speakers,
                mics,
                snr_db,
                ..ExperimentConfig::micro()
            };
            let manifest = write_split(&out, &split, &cfg.synth(seed), utts)?;
            println!("wrote {} utterances to {}", manifest.utterances.len(), out.display());
        }
        Command::Train {
            config,
            paper_scale,
            desk,
            data,
            out,
        } => {
            let cfg = load_config(config.as_ref(), paper_scale, desk)?;
            let outcome = train(&cfg, &data, &out)?;
            let last = outcome.log.last().map_or(f64::NAN, |l| l.loss);
            println!("trained {} steps, final loss {last:.4}", cfg.steps);
        }
        Command::Eval {
            ckpt,
            data,
            unknown_count,
            out,
        } => {
            let report = evaluate(&ckpt, &data, !unknown_count)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            println!("token error rate {:.4}", report.token_error_rate);
            if let Some(acc) = report.speaker_count_accuracy {
                println!("speaker-count accuracy {acc:.4}");
            }
        }
        Command::Ablate { config, axes, out } => {
            let cfg = load_config(config.as_ref(), false, false)?;
            let axes = parse_axes(&axes)?;
            let train_set = synth_utterances(&cfg, cfg.train_seed_base(), cfg.train_utts)?;
            let test_set = synth_utterances(&cfg, cfg.test_seed_base(), cfg.test_utts)?;
            let rows = run_ablation(&cfg, &axes, &train_set, &test_set)?;
            let csv = ablation_csv(&rows);
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
