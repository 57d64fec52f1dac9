//! Command-line surface for the reconstruction pipeline.
//!
//! Exit codes: 0 success, 2 I/O or file-format failure, 3 validation
//! failure, 4 training divergence, 5 failed assertion (`bench --assert`).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "defrec", version, about = "Solid-shape defect reconstruction by iterative point-cloud completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. --set model.feat_dim=64 (repeatable).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Master seed; all randomness derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Case-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Verbose progress output.
    #[arg(short, long, global = true, default_value_t = false)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a binary volume to a normalized point cloud (PLY).
    Convert {
        #[command(flatten)]
        common: Common,
        /// Input volume (.json sidecar or .nrrd).
        #[arg(long)]
        input: PathBuf,
        /// Resample to this isotropic spacing (mm) first.
        #[arg(long)]
        spacing: Option<f64>,
        /// Write binary little-endian PLY instead of ASCII.
        #[arg(long, default_value_t = false)]
        binary: bool,
    },
    /// Train a completion model on phantoms or a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Generate this many synthetic shell phantoms as the dataset.
        #[arg(long)]
        phantoms: Option<usize>,
        /// Dataset root directory (alternative to --phantoms).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Dataset layout: skullbreak or skullfix.
        #[arg(long, default_value = "skullbreak")]
        layout: String,
        /// Override [train].steps from the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Complete defective volumes with a trained checkpoint.
    Complete {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input volumes (repeatable).
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        /// Directory scanned recursively for defective.json volumes.
        #[arg(long)]
        input_dir: Option<PathBuf>,
        /// Refinement rounds (overrides [pipeline].refinements).
        #[arg(long)]
        refinements: Option<usize>,
        /// Also export an STL mesh per case.
        #[arg(long, default_value_t = false)]
        mesh: bool,
    },
    /// Evaluate predictions against ground-truth volumes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Prediction=ground-truth volume pairs, e.g. --pair p.json=g.json.
        #[arg(long = "pair")]
        pairs: Vec<String>,
        /// Directory of predictions matched to --gt-dir by file stem.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        gt_dir: Option<PathBuf>,
    },
    /// Measure peak tracked memory and wall time against group count.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Group counts to synthesize cases for.
        #[arg(long, value_delimiter = ',', default_value = "1,4,10")]
        groups: Vec<usize>,
        /// Fail (exit 5) when memory flatness or time linearity is violated.
        #[arg(long, default_value_t = false)]
        assert: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Convert {
            common,
            input,
            spacing,
            binary,
        } => commands::convert(&common, &input, spacing, binary),
        Command::Train {
            common,
            phantoms,
            dataset,
            layout,
            steps,
            resume,
        } => commands::train(&common, phantoms, dataset.as_deref(), &layout, steps, resume.as_deref()),
        Command::Complete {
            common,
            checkpoint,
            inputs,
            input_dir,
            refinements,
            mesh,
        } => commands::complete(
            &common,
            &checkpoint,
            &inputs,
            input_dir.as_deref(),
            refinements,
            mesh,
        ),
        Command::Evaluate {
            common,
            pairs,
            pred_dir,
            gt_dir,
        } => commands::evaluate(&common, &pairs, pred_dir.as_deref(), gt_dir.as_deref()),
        Command::Bench {
            common,
            checkpoint,
            groups,
            assert,
        } => commands::bench(&common, &checkpoint, &groups, assert),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::classify_error(&err))
        }
    }
}
