use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use firkrylov::cli::{
    self, parse_grid_dims, parse_kernel, parse_kernel_list, parse_range, parse_snr,
    parse_snr_list, CommandKind, RunConfig,
};
use firkrylov::Error;

#[derive(Parser)]
#[command(
    name = "firkrylov",
    version,
    about = "Kernel-regularized FIR estimation with Krylov-augmented likelihood evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// 64-bit seed driving every random draw of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output stem; files are written as <out>.csv, <out>.json, ...
    #[arg(long, default_value = "firkrylov_out")]
    out: PathBuf,
    /// Output format for tabular results.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Load the full configuration from a previously written manifest,
    /// ignoring the other flags.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluatorArgs {
    /// PML evaluator: direct | indirect | krylov.
    #[arg(long, default_value = "krylov")]
    evaluator: String,
    /// Kernel family: tc | dc | ss.
    #[arg(long, default_value = "tc")]
    kernel: String,
    /// Block Lanczos iterations.
    #[arg(long, default_value_t = 40)]
    k: usize,
    /// Augmentation block size.
    #[arg(long, default_value_t = 1)]
    n_omega: usize,
    /// Residual-trace probes (0 disables the correction).
    #[arg(long, default_value_t = 3)]
    n_psi: usize,
    /// Lanczos depth of the residual-trace quadrature.
    #[arg(long, default_value_t = 25)]
    k_quad: usize,
    /// DC kernel correlation parameter.
    #[arg(long, default_value_t = 0.9)]
    kernel_rho: f64,
    /// DC kernel scale parameter.
    #[arg(long, default_value_t = 1.0)]
    kernel_c: f64,
    /// Sample cap of the direct evaluator.
    #[arg(long, default_value_t = firkrylov::pml::DEFAULT_DIRECT_CAP)]
    direct_cap: usize,
    /// Nystrom sketch rank of the indirect evaluator.
    #[arg(long, default_value_t = 50)]
    nystrom_rank: usize,
    /// LSQR relative-residual tolerance.
    #[arg(long, default_value_t = 1e-8)]
    lsqr_tol: f64,
    /// LSQR iteration cap.
    #[arg(long, default_value_t = 500)]
    lsqr_maxit: usize,
    /// Girard-Hutchinson probes of the indirect trace estimate.
    #[arg(long, default_value_t = 20)]
    gh_probes: usize,
    /// Mercator series truncation tolerance.
    #[arg(long, default_value_t = 1e-8)]
    mercator_tol: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic system record (CSV + JSON sidecar).
    Gen {
        #[command(flatten)]
        common: CommonArgs,
        /// Pole parameter of G(z) = (1 - a z^-1)^-2.
        #[arg(long, default_value_t = 0.2)]
        a: f64,
        /// Number of samples.
        #[arg(long, default_value_t = 10_000)]
        m: usize,
        /// FIR order.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Signal-to-noise ratio ('inf' for noiseless).
        #[arg(long, default_value = "10")]
        snr: String,
        /// Interpret --snr in decibels.
        #[arg(long, default_value_t = false)]
        snr_db: bool,
    },
    /// Evaluate the PML criterion on a log-log (beta, lambda) grid.
    Grid {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        evaluator: EvaluatorArgs,
        /// Input signal CSV (with optional sidecar alongside).
        #[arg(long)]
        data: PathBuf,
        /// FIR order when no sidecar is present.
        #[arg(long, default_value_t = 0)]
        n: usize,
        /// Kernel parameter range 'lo,hi'.
        #[arg(long, default_value = "1e-6,1e-2")]
        beta_range: String,
        /// Regularization range 'lo,hi'.
        #[arg(long, default_value = "1e-1,1e6")]
        lambda_range: String,
        /// Grid dimensions 'NBETAxNLAMBDA'.
        #[arg(long, default_value = "50x50")]
        grid: String,
    },
    /// Estimate the FIR by budgeted PML minimization.
    Identify {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        evaluator: EvaluatorArgs,
        /// Input signal CSV (with optional sidecar alongside).
        #[arg(long)]
        data: PathBuf,
        /// FIR order when no sidecar is present.
        #[arg(long, default_value_t = 0)]
        n: usize,
        #[arg(long, default_value = "1e-4,0.5")]
        beta_range: String,
        #[arg(long, default_value = "1e-6,1e6")]
        lambda_range: String,
        /// Maximum number of precomputes (beta probes).
        #[arg(long, default_value_t = 40)]
        budget: usize,
        /// Inner lambda grid resolution.
        #[arg(long, default_value_t = 50)]
        lambda_grid_size: usize,
    },
    /// Repeat gen+identify over seeded systems and summarize fits.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        evaluator: EvaluatorArgs,
        /// Systems per configuration.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 0.2)]
        a: f64,
        #[arg(long, default_value_t = 2000)]
        m: usize,
        #[arg(long, default_value_t = 400)]
        n: usize,
        /// Comma-separated SNR sweep ('inf' allowed).
        #[arg(long, default_value = "10")]
        snr: String,
        /// Comma-separated kernel sweep.
        #[arg(long, default_value = "tc")]
        kernels: String,
        #[arg(long, default_value = "1e-4,0.5")]
        beta_range: String,
        #[arg(long, default_value = "1e-6,1e6")]
        lambda_range: String,
        #[arg(long, default_value_t = 40)]
        budget: usize,
        #[arg(long, default_value_t = 50)]
        lambda_grid_size: usize,
    },
    /// Run the executable theory checks and emit a JSON report.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Dense test-matrix dimension.
        #[arg(long, default_value_t = 120)]
        m: usize,
        /// Condition number of the test matrices.
        #[arg(long, default_value_t = 1e4)]
        kappa: f64,
        /// Lanczos depth of the checks.
        #[arg(long, default_value_t = 10)]
        k_max: usize,
    },
}

fn build_config(command: Command) -> Result<RunConfig, Error> {
    let mut config = RunConfig::default();
    let common = match command {
        Command::Gen {
            common,
            a,
            m,
            n,
            snr,
            snr_db,
        } => {
            config.command = CommandKind::Gen;
            config.a = a;
            config.m = m;
            config.n = n;
            config.snr = parse_snr(&snr)?;
            config.snr_db = snr_db;
            common
        }
        Command::Grid {
            common,
            evaluator,
            data,
            n,
            beta_range,
            lambda_range,
            grid,
        } => {
            config.command = CommandKind::Grid;
            apply_evaluator(&mut config, &evaluator)?;
            config.data_path = Some(data);
            config.n = n;
            config.beta_range = parse_range(&beta_range)?;
            config.lambda_range = parse_range(&lambda_range)?;
            config.grid = parse_grid_dims(&grid)?;
            common
        }
        Command::Identify {
            common,
            evaluator,
            data,
            n,
            beta_range,
            lambda_range,
            budget,
            lambda_grid_size,
        } => {
            config.command = CommandKind::Identify;
            apply_evaluator(&mut config, &evaluator)?;
            config.data_path = Some(data);
            config.n = n;
            config.beta_range = parse_range(&beta_range)?;
            config.lambda_range = parse_range(&lambda_range)?;
            config.budget = budget;
            config.lambda_grid_size = lambda_grid_size;
            common
        }
        Command::Bench {
            common,
            evaluator,
            seeds,
            a,
            m,
            n,
            snr,
            kernels,
            beta_range,
            lambda_range,
            budget,
            lambda_grid_size,
        } => {
            config.command = CommandKind::Bench;
            apply_evaluator(&mut config, &evaluator)?;
            config.bench_seeds = seeds;
            config.a = a;
            config.m = m;
            config.n = n;
            config.snr_list = parse_snr_list(&snr)?;
            config.kernel_list = parse_kernel_list(&kernels)?;
            config.beta_range = parse_range(&beta_range)?;
            config.lambda_range = parse_range(&lambda_range)?;
            config.budget = budget;
            config.lambda_grid_size = lambda_grid_size;
            common
        }
        Command::Verify {
            common,
            m,
            kappa,
            k_max,
        } => {
            config.command = CommandKind::Verify;
            config.check_m = m;
            config.check_kappa = kappa;
            config.check_k_max = k_max;
            common
        }
    };
    if let Some(path) = &common.from_manifest {
        return cli::config_from_manifest(path);
    }
    config.seed = common.seed;
    config.out = common.out;
    config.format = common.format.parse()?;
    Ok(config)
}

fn apply_evaluator(config: &mut RunConfig, args: &EvaluatorArgs) -> Result<(), Error> {
    config.evaluator = args.evaluator.parse()?;
    config.kernel = parse_kernel(&args.kernel)?;
    config.k = args.k;
    config.n_omega = args.n_omega;
    config.n_psi = args.n_psi;
    config.k_quad = args.k_quad;
    config.kernel_rho = args.kernel_rho;
    config.kernel_c = args.kernel_c;
    config.direct_cap = args.direct_cap;
    config.nystrom_rank = args.nystrom_rank;
    config.lsqr_tol = args.lsqr_tol;
    config.lsqr_maxit = args.lsqr_maxit;
    config.gh_probes = args.gh_probes;
    config.mercator_tol = args.mercator_tol;
    Ok(())
}

fn is_config_error(err: &Error) -> bool {
    matches!(
        err,
        Error::InvalidParam(_)
            | Error::Dimension { .. }
            | Error::NonPositive(_)
            | Error::CapExceeded { .. }
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match build_config(cli.command) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    };
    match cli::run(&config) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
