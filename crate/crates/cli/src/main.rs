use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use roadadapt::datasets::{Role, Style};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "roadadapt", version, about = "Semi-supervised domain adaptation for road segmentation")]
struct Cli {
    /// Root that relative dataset paths in a config resolve against.
    /// Defaults to the config file's directory.
    #[arg(long, global = true, env = "ROADADAPT_DATA")]
    data_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides both the weight-init and the sampler seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to `<output_dir>/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic road dataset with a manifest.
    Synth {
        #[arg(long)]
        style: Style,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset name written to the manifest.
        #[arg(long)]
        name: Option<String>,
        #[arg(long, value_parser = commands::parse_role, default_value = "labeled_target")]
        role: Role,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Tile one split of a manifest into a tile store.
    Prep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 512)]
        tile: u32,
        /// Defaults to the tile size.
        #[arg(long)]
        stride: Option<u32>,
        /// Ground resolution to resample to, in m/px.
        #[arg(long)]
        target_res: Option<f64>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Supervised training on the labeled_target dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Label the unlabeled_source dataset with a trained teacher.
    Pseudolabel {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint, or a run directory holding `model.ckpt`.
        #[arg(long)]
        teacher: PathBuf,
        /// Overrides `train.pseudo_threshold`.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Adaptation training with MCC and pseudo-labels.
    TrainSsda {
        #[command(flatten)]
        common: Common,
        /// Pseudo-label store written by `pseudolabel`.
        #[arg(long)]
        pseudo: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Road IoU of one checkpoint on the eval sets.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint, or a run directory holding `model.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Extra eval set (manifest or tile store); its `test` split is used.
        #[arg(long = "eval")]
        eval_sets: Vec<PathBuf>,
    },
    /// Transfer report over several training runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory written by `train` or `train-ssda`.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long = "eval")]
        eval_sets: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
