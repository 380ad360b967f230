use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_deblur::capture::CaptureRecipe;
use hybrid_deblur::deblur::CG_DEFAULT_LAMBDA;
use hybrid_deblur::pipeline::{
    configure_threads_from_env, run_capture, run_eval, run_pipeline, run_synth, DepthSpec,
    PipelineConfig, PipelineError, PipelineGoal, ReportFormat, SolverChoice,
};

/// Restores a long-exposure wide frame using the synchronized
/// short-exposure burst recorded by the ultra-wide camera.
#[derive(Parser)]
#[command(name = "hcd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic captures with ground truth, split train/val/test
    Synth {
        /// Number of captures to generate
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        /// Base seed; each scene derives its own
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset root to create
        #[arg(long)]
        out: PathBuf,
    },
    /// Full restoration: align, flow, kernels, deblur, merge, metrics
    Pipeline {
        /// Capture directory, or a tree of captures processed in parallel
        input: PathBuf,
        /// Results directory (mirrors the input tree in batch mode)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Depth sweep and field-of-view alignment only
    Align {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Stop after per-pixel blur kernel estimation
    Kernels {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Deconvolve the wide frame with estimated kernels
    Deblur {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Burst merge and detail injection only
    Merge {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Tabulate metrics from results directories into a report
    Eval {
        /// Results directories (each holding metrics.json, or a tree of them)
        results: Vec<PathBuf>,
        /// Report format
        #[arg(long, default_value = "csv")]
        report: ReportFormat,
        /// Directory to write the report into (stdout always gets a copy)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Tuning {
    /// Deconvolution solver
    #[arg(long, default_value = "cg")]
    solver: SolverChoice,
    /// Solver iterations; defaults to 30 for rl and 50 for cg
    #[arg(long)]
    iters: Option<usize>,
    /// Quadratic prior strength for the cg solver
    #[arg(long, default_value_t = CG_DEFAULT_LAMBDA)]
    lambda: f64,
    /// Depth candidate grid for the alignment sweep, as min:max:count
    #[arg(long, default_value_t = DepthSpec::default())]
    depths: DepthSpec,
    /// Pyramid levels for both flow estimators
    #[arg(long)]
    flow_levels: Option<usize>,
}

impl Tuning {
    fn config(&self) -> PipelineConfig {
        let mut config = PipelineConfig {
            solver: self.solver,
            iterations: self.iters.unwrap_or_else(|| self.solver.default_iterations()),
            lambda: self.lambda,
            depths: self.depths,
            ..PipelineConfig::default()
        };
        if let Some(levels) = self.flow_levels {
            config.set_flow_levels(levels);
        }
        config
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    configure_threads_from_env()?;
    match command {
        Command::Synth { scenes, seed, out } => {
            let manifest = run_synth(&out, scenes, seed, &CaptureRecipe::default())?;
            println!("wrote {} captures under {}", manifest.scenes, out.display());
        }
        Command::Pipeline { input, out, tuning } => {
            let results = run_pipeline(&input, &out, &tuning.config())?;
            for (dir, metrics) in &results {
                match metrics.as_ref().and_then(|m| m.psnr_final) {
                    Some(v) => println!("{}: psnr_final {v:.2} dB", dir.display()),
                    None => println!("{}: done", dir.display()),
                }
            }
        }
        Command::Align { input, out, tuning } => {
            partial(&input, &out, &tuning, PipelineGoal::Align)?;
        }
        Command::Kernels { input, out, tuning } => {
            partial(&input, &out, &tuning, PipelineGoal::Kernels)?;
        }
        Command::Deblur { input, out, tuning } => {
            partial(&input, &out, &tuning, PipelineGoal::Deblur)?;
        }
        Command::Merge { input, out, tuning } => {
            partial(&input, &out, &tuning, PipelineGoal::Merge)?;
        }
        Command::Eval { results, report, out } => {
            let text = run_eval(&results, report, out.as_deref())?;
            print!("{text}");
        }
    }
    Ok(())
}

fn partial(
    input: &PathBuf,
    out: &PathBuf,
    tuning: &Tuning,
    goal: PipelineGoal,
) -> Result<(), PipelineError> {
    run_capture(input, out, &tuning.config(), goal)?;
    println!("{}: done", out.display());
    Ok(())
}
