use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qsdlab_cli::{load_config, run, validate_config, RunOptions, EXPERIMENTS};

/// Quasi-stationary laboratory for multitype birth-and-death processes.
#[derive(Parser)]
#[command(name = "qsdlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration file (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory (default: config, then $QSDLAB_OUT)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the hypothesis audit gate
    #[arg(long)]
    skip_audit: bool,
    /// Worker threads for replica parallelism (default: logical cores)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact event-driven trajectories and terminal statistics
    Simulate(CommonArgs),
    /// Integrate the deterministic limit flow
    Ode(CommonArgs),
    /// Deviation frequency between the scaled process and the flow
    Kurtz(CommonArgs),
    /// Eigen-solve the QSD triple on a truncated box
    QsdExact(CommonArgs),
    /// Conditioned-on-survival law by Monte Carlo
    QsdMc(CommonArgs),
    /// Fleming-Viot particle estimate of the QSD
    FlemingViot(CommonArgs),
    /// Total-variation convergence curve toward the QSD
    TvCurve(CommonArgs),
    /// Residual against the QSD/extinct mixture law
    Mixture(CommonArgs),
    /// Extinction-time law against Exponential(lambda0)
    ExtinctionLaw(CommonArgs),
    /// lambda0 across scales with a log-linear fit
    Lambda0Scaling(CommonArgs),
    /// Descent time into the sqrt(K) ball across scales
    DescentTime(CommonArgs),
    /// Lyapunov drift certification scan
    DriftCheck(CommonArgs),
    /// Nested-domains descent probability validation
    FourDomains(CommonArgs),
    /// Numeric audit of the standing hypotheses
    Hypotheses(CommonArgs),
    /// Detailed-balance circuit criterion and reversible measure
    Reversibility(CommonArgs),
    /// Validate a configuration file without running anything
    Validate {
        /// Experiment configuration file (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Experiment the config is meant for (defaults to its own field)
        #[arg(long)]
        experiment: Option<String>,
    },
}

fn experiment_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Simulate(_) => "simulate",
        Command::Ode(_) => "ode",
        Command::Kurtz(_) => "kurtz",
        Command::QsdExact(_) => "qsd-exact",
        Command::QsdMc(_) => "qsd-mc",
        Command::FlemingViot(_) => "fleming-viot",
        Command::TvCurve(_) => "tv-curve",
        Command::Mixture(_) => "mixture",
        Command::ExtinctionLaw(_) => "extinction-law",
        Command::Lambda0Scaling(_) => "lambda0-scaling",
        Command::DescentTime(_) => "descent-time",
        Command::DriftCheck(_) => "drift-check",
        Command::FourDomains(_) => "four-domains",
        Command::Hypotheses(_) => "hypotheses",
        Command::Reversibility(_) => "reversibility",
        Command::Validate { .. } => "validate",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Command::Validate { config, experiment } = &cli.command {
        let parsed = match load_config(config) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
        };
        let name = experiment
            .clone()
            .or_else(|| parsed.experiment.clone())
            .unwrap_or_else(|| "simulate".to_string());
        let diags = validate_config(&name, &parsed);
        if diags.is_empty() {
            println!("ok: {} validates for experiment {name}", config.display());
            return ExitCode::SUCCESS;
        }
        for d in &diags {
            eprintln!("invalid: {d}");
        }
        return ExitCode::from(1);
    }

    let args = match &cli.command {
        Command::Simulate(a)
        | Command::Ode(a)
        | Command::Kurtz(a)
        | Command::QsdExact(a)
        | Command::QsdMc(a)
        | Command::FlemingViot(a)
        | Command::TvCurve(a)
        | Command::Mixture(a)
        | Command::ExtinctionLaw(a)
        | Command::Lambda0Scaling(a)
        | Command::DescentTime(a)
        | Command::DriftCheck(a)
        | Command::FourDomains(a)
        | Command::Hypotheses(a)
        | Command::Reversibility(a) => a,
        Command::Validate { .. } => unreachable!(),
    };

    if let Some(threads) = args.threads {
        // replica-level parallelism only; a failure to set the pool size
        // (already initialized) is not fatal
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    let name = experiment_name(&cli.command);
    debug_assert!(EXPERIMENTS.contains(&name));
    let config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let options = RunOptions {
        seed: args.seed,
        out_dir: args.out.clone(),
        skip_audit: args.skip_audit,
        threads: args.threads,
    };
    match run(name, config, &options) {
        Ok(report) => {
            println!(
                "{name}: {} (hash {}, {:.2}s)",
                if report.passed { "ok" } else { "ASSERTION FAILED" },
                report.config_hash,
                report.wall_time_s
            );
            for artifact in &report.artifacts {
                println!("  wrote {artifact}");
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
