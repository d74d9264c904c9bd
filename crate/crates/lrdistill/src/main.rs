use clap::{Parser, Subcommand, ValueEnum};
use lrdistill::cli::{self, CommonArgs, EvalInputArg};
use lrdistill::train::Strategy;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lrdistill",
    about = "Train multi-resolution fusion teachers and distill low-resolution detectors \
             on a synthetic benchmark"
)]
struct Args {
    /// Worker threads for tensor math (default: all cores; 1 = fully serial).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    /// Detection phase first, then fusion-only with the core frozen.
    TwoStep,
    /// Single phase minimizing detection and fusion losses together.
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputArg {
    H,
    L,
    Fused,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a multi-resolution teacher per the config's training mode.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "two-step")]
        strategy: StrategyArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a low-resolution student against a teacher checkpoint.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Teacher checkpoint path.
        #[arg(long)]
        teacher: PathBuf,
        /// Train the identical student without the distillation term.
        #[arg(long)]
        no_kd: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input protocol: high resolution, low resolution, or fused.
        #[arg(long, value_enum)]
        input: InputArg,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference checks for every differentiable op and both losses.
    Gradcheck,
    /// Export a dataset split as PNG files plus a JSON annotation file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Which split's generator stream to export.
        #[arg(long, default_value = "train")]
        split: String,
        /// Override the number of images.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fusion loss-weight sweep: fused AP per lambda from one shared
    /// detection phase.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,1.0")]
        lambdas: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(args: Args) -> lrdistill::Result<()> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .ok();
    }
    match args.cmd {
        Cmd::TrainTeacher {
            config,
            strategy,
            seed,
            out_dir,
        } => cli::cmd_train_teacher(
            &CommonArgs {
                config,
                seed,
                out_dir,
            },
            match strategy {
                StrategyArg::TwoStep => Strategy::TwoStep,
                StrategyArg::Joint => Strategy::Joint,
            },
        ),
        Cmd::Distill {
            config,
            teacher,
            no_kd,
            seed,
            out_dir,
        } => cli::cmd_distill(
            &CommonArgs {
                config,
                seed,
                out_dir,
            },
            &teacher,
            no_kd,
        ),
        Cmd::Eval {
            checkpoint,
            input,
            out_dir,
        } => cli::cmd_eval(
            &checkpoint,
            match input {
                InputArg::H => EvalInputArg::H,
                InputArg::L => EvalInputArg::L,
                InputArg::Fused => EvalInputArg::Fused,
            },
            out_dir.as_deref(),
        ),
        Cmd::Gradcheck => cli::cmd_gradcheck(),
        Cmd::GenData {
            config,
            split,
            count,
            seed,
            out_dir,
        } => cli::cmd_gen_data(
            &CommonArgs {
                config,
                seed,
                out_dir,
            },
            &split,
            count,
        ),
        Cmd::Sweep {
            config,
            lambdas,
            seed,
            out_dir,
        } => cli::cmd_sweep(
            &CommonArgs {
                config,
                seed,
                out_dir,
            },
            &lambdas,
        ),
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
