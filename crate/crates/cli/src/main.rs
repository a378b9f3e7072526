use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tinydistill_cli::run::{self, DatasetArgs, EvalView};
use tinydistill_cli::CliResult;
use tinydistill_core::data::SyntheticSpec;

/// Training kit for tiny CNNs: in-situ distillation from a channel-expanded
/// weight-sharing teacher, with gradient surgery and uncertainty-gated loss
/// selection.
#[derive(Parser)]
#[command(name = "tinydistill", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job described by a JSON config file.
    Train {
        /// Path to the run configuration (JSON).
        config: PathBuf,
    },
    /// Evaluate a checkpoint; prints {"accuracy", "n"} on stdout.
    Eval {
        /// Checkpoint file (supernet or standalone network).
        checkpoint: PathBuf,
        /// IDX image file (pair with --labels).
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        /// IDX label file (pair with --images).
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        /// Synthetic dataset, e.g. classes=10,per_class=100,size=12,seed=5.
        #[arg(long, conflicts_with_all = ["images", "labels"])]
        synthetic: Option<String>,
        /// Which model of a supernet checkpoint to evaluate.
        #[arg(long, value_enum, default_value_t = ViewArg::Student)]
        view: ViewArg,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Run one cell per grid value and write a summary CSV.
    /// TINYDISTILL_WORKERS controls cell parallelism.
    Sweep {
        /// Base run configuration (JSON).
        config: PathBuf,
        /// Grid axis and values: k=2,3,4,5 or T=2.5,3.75,5.0.
        #[arg(long)]
        grid: String,
    },
    /// Measure teacher/student gradient conflicts of a supernet checkpoint
    /// without updating it; prints a JSON report on stdout.
    AnalyzeConflicts {
        checkpoint: PathBuf,
        /// Number of measurement batches.
        #[arg(long)]
        steps: usize,
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["images", "labels"])]
        synthetic: Option<String>,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset and write it as IDX files.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        /// Square image side length.
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Per-pixel Gaussian noise sigma.
        #[arg(long, default_value_t = 0.25)]
        sigma: f64,
        #[arg(long)]
        seed: u64,
        /// Output prefix; writes <prefix>-images.idx and <prefix>-labels.idx.
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Teacher,
    Student,
}

impl From<ViewArg> for EvalView {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Teacher => EvalView::Teacher,
            ViewArg::Student => EvalView::Student,
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config } => run::cmd_train(&config),
        Command::Eval {
            checkpoint,
            images,
            labels,
            synthetic,
            view,
            batch_size,
        } => run::cmd_eval(
            &checkpoint,
            &DatasetArgs {
                images,
                labels,
                synthetic,
            },
            view.into(),
            batch_size,
        ),
        Command::Sweep { config, grid } => run::cmd_sweep(&config, &grid),
        Command::AnalyzeConflicts {
            checkpoint,
            steps,
            images,
            labels,
            synthetic,
            batch_size,
            seed,
        } => run::cmd_analyze_conflicts(
            &checkpoint,
            &DatasetArgs {
                images,
                labels,
                synthetic,
            },
            steps,
            batch_size,
            seed,
        ),
        Command::GenData {
            classes,
            per_class,
            size,
            channels,
            sigma,
            seed,
            out,
        } => {
            let mut spec = SyntheticSpec::new(classes, per_class, size, seed);
            spec.channels = channels;
            spec.noise_sigma = sigma;
            run::cmd_gen_data(&spec, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
