//! `defectgen`: dataset tooling, generator training and sampling, sweeps,
//! augmentation, segmentation and QC simulation.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use defectgen_core::qc::UnlistedPolicy;

use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "defectgen", version, about = "Two-stage diffusion for paired defect image/mask synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Unlisted {
    Forbidden,
    Ignored,
}

#[derive(Subcommand)]
enum Command {
    /// Check every sample of a split; exit 1 on violations, 2 on I/O errors
    ValidateDataset {
        root: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Also require both sides to be multiples of this factor
        #[arg(long)]
        pool_factor: Option<usize>,
    },
    /// Generate the procedural toy dataset (train and val splits)
    GenToy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a denoiser with the given preset
    Train {
        #[arg(long)]
        config: PathBuf,
        /// large, medium or small
        #[arg(long)]
        model: String,
    },
    /// Two-stage sampling: large model for the first `u` reverse steps
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        u: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        /// Checkpoint override, `name=path` (name: large, small or a preset)
        #[arg(long = "ckpt")]
        ckpt: Vec<String>,
    },
    /// Full reverse chain with one model
    SampleSingle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long = "ckpt")]
        ckpt: Vec<String>,
    },
    /// FID and diversity over a grid of switch points and small-stage presets
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        u_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        rf_list: Vec<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long = "ckpt")]
        ckpt: Vec<String>,
    },
    /// Merge generated pairs into the training split, or sweep ratios with --ratios
    Augment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "ratios")]
        ratio: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
        #[arg(long = "ckpt")]
        ckpt: Vec<String>,
    },
    /// Train the segmentation model
    SegTrain {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root overriding `dataset.root`
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Evaluate a segmentation model and write its predicted masks
    SegEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Image-level QC decisions from masks, scored as recall and FPR
    QcSim {
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        pred_masks: PathBuf,
        #[arg(long)]
        gt_masks: PathBuf,
        #[arg(long)]
        classmap: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "forbidden")]
        unlisted: Unlisted,
    },
}

fn run(cli: Cli) -> CliResult<commands::Report> {
    use commands::*;
    match cli.command {
        Command::ValidateDataset {
            root,
            split,
            pool_factor,
        } => validate_dataset(&root, &split, pool_factor),
        Command::GenToy { config } => gen_toy(&RunConfig::load(&config)?),
        Command::Train { config, model } => train_model(&RunConfig::load(&config)?, &model),
        Command::Sample { config, u, count, ckpt } => {
            sample(&RunConfig::load(&config)?, u, count, &parse_overrides(&ckpt)?)
        }
        Command::SampleSingle {
            config,
            model,
            count,
            ckpt,
        } => sample_single_cmd(&RunConfig::load(&config)?, &model, count, &parse_overrides(&ckpt)?),
        Command::Sweep {
            config,
            u_list,
            rf_list,
            count,
            jobs,
            ckpt,
        } => sweep(&RunConfig::load(&config)?, &u_list, &rf_list, count, jobs, &parse_overrides(&ckpt)?),
        Command::Augment {
            config,
            ratio,
            ratios,
            ckpt,
        } => augment(&RunConfig::load(&config)?, ratio, &ratios, &parse_overrides(&ckpt)?),
        Command::SegTrain { config, data, split } => {
            seg_train(&RunConfig::load(&config)?, data.as_deref(), split.as_deref())
        }
        Command::SegEval {
            config,
            model,
            data,
            split,
        } => seg_eval(&RunConfig::load(&config)?, &model, data.as_deref(), split.as_deref()),
        Command::QcSim {
            rules,
            pred_masks,
            gt_masks,
            classmap,
            unlisted,
        } => {
            let policy = match unlisted {
                Unlisted::Forbidden => UnlistedPolicy::Forbidden,
                Unlisted::Ignored => UnlistedPolicy::Ignored,
            };
            qc_sim(&rules, &pred_masks, &gt_masks, classmap.as_deref(), policy)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            if let Some(dir) = &report.run {
                println!("{}", dir.display());
            }
            for line in &report.lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
