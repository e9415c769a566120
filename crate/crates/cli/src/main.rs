use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use particle_pde_cli::{
    cmd_riemann_check, cmd_run, cmd_sweep, cmd_verify_bounds, cmd_verify_lemmas, parse_config, Context,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "particle-pde", version, about = "Mollified particle approximations of evolution equations")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sweeps and kernel assembly.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Write the kernel matrix at t = 0 here (`run` only).
    #[arg(long, global = true)]
    dump_kernel: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Integrate one particle system and write its trajectory.
    Run,
    /// Error table over particle counts and smoothing scales.
    Sweep,
    /// Numerical checks of the mollifier and smoothed-operator lemmas.
    VerifyLemmas,
    /// Graph-limit error bound on the toy kernel systems.
    VerifyBounds,
    /// Riemann-sum bound for a family of Lipschitz functions.
    RiemannCheck,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    if let Some(jobs) = args.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let config = match &args.config {
        Some(path) => parse_config(path),
        None => Ok(ExperimentConfig::default()),
    };
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if args.dump_kernel.is_some() && !matches!(args.command, Command::Run) {
        log::warn!("--dump-kernel is only used by `run`");
    }
    let ctx = Context { out_dir: args.out.clone(), dump_kernel: args.dump_kernel.clone() };
    let outcome = match args.command {
        Command::Run => cmd_run(&config, &ctx),
        Command::Sweep => cmd_sweep(&config, &ctx),
        Command::VerifyLemmas => cmd_verify_lemmas(&config, &ctx),
        Command::VerifyBounds => cmd_verify_bounds(&config, &ctx),
        Command::RiemannCheck => cmd_riemann_check(&config, &ctx),
    };
    match outcome {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            ExitCode::from(outcome.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
