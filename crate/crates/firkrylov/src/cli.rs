//! Command-line entry points: synthetic data generation, criterion grids,
//! identification runs, seeded benchmarks, and the theory checks. Every run
//! resolves its full configuration into a manifest whose SHA-256 hash is
//! embedded in all outputs; rerunning from the manifest reproduces them
//! (timing columns excepted, which are informational only).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{generate, SynthSpec};
use crate::error::{Error, Result};
use crate::estimate::{fit_metric, posterior_mean, FirEstimate};
use crate::linops::{
    CompositeOperator, KernelFactor, KernelKind, KernelParams, SystemData, ToeplitzOperator,
};
use crate::optimize::{minimize_pml, EvaluatorKind, SearchConfig};
use crate::pml::{
    pml_direct_precompute_from_ops, pml_eval_from_spectrum, pml_indirect_eval, pml_krylov_eval,
    pml_krylov_precompute, residual_trace_precompute, IndirectConfig, PmlEvaluation,
};
use crate::sample::derive_seed;
use crate::verify::{run_all_checks, TheoryCheckConfig};

pub const THREADS_ENV: &str = "FIRKRYLOV_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Gen,
    Grid,
    Identify,
    Bench,
    Verify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidParam(format!(
                "unknown format '{other}' (expected csv|json)"
            ))),
        }
    }
}

/// Fully resolved run configuration; serialized verbatim into the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub seed: u64,
    pub out: PathBuf,
    pub format: OutputFormat,
    pub data_path: Option<PathBuf>,
    pub evaluator: EvaluatorKind,
    pub kernel: KernelKind,
    // Generation parameters.
    pub a: f64,
    pub m: usize,
    pub n: usize,
    pub snr: f64,
    pub snr_db: bool,
    // Evaluator parameters.
    pub k: usize,
    pub n_omega: usize,
    pub n_psi: usize,
    pub k_quad: usize,
    pub beta_range: (f64, f64),
    pub lambda_range: (f64, f64),
    pub grid: (usize, usize),
    pub budget: usize,
    pub lambda_grid_size: usize,
    pub kernel_rho: f64,
    pub kernel_c: f64,
    pub direct_cap: usize,
    pub nystrom_rank: usize,
    pub lsqr_tol: f64,
    pub lsqr_maxit: usize,
    pub gh_probes: usize,
    pub mercator_tol: f64,
    // Bench parameters.
    pub bench_seeds: usize,
    pub snr_list: Vec<f64>,
    pub kernel_list: Vec<KernelKind>,
    // Theory-check parameters.
    pub check_m: usize,
    pub check_kappa: f64,
    pub check_k_max: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: CommandKind::Gen,
            seed: 0,
            out: PathBuf::from("firkrylov_out"),
            format: OutputFormat::Csv,
            data_path: None,
            evaluator: EvaluatorKind::Krylov,
            kernel: KernelKind::Tc,
            a: 0.2,
            m: 10_000,
            n: 2000,
            snr: 10.0,
            snr_db: false,
            k: 40,
            n_omega: 1,
            n_psi: 3,
            k_quad: 25,
            beta_range: (1e-4, 0.5),
            lambda_range: (1e-6, 1e6),
            grid: (50, 50),
            budget: 40,
            lambda_grid_size: 50,
            kernel_rho: 0.9,
            kernel_c: 1.0,
            direct_cap: crate::pml::DEFAULT_DIRECT_CAP,
            nystrom_rank: 50,
            lsqr_tol: 1e-8,
            lsqr_maxit: 500,
            gh_probes: 20,
            mercator_tol: 1e-8,
            bench_seeds: 20,
            snr_list: vec![10.0],
            kernel_list: vec![KernelKind::Tc],
            check_m: 120,
            check_kappa: 1e4,
            check_k_max: 10,
        }
    }
}

impl RunConfig {
    pub fn manifest_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Hash identifying the computation: the output destination is excluded,
    /// so equal runs written to different stems embed equal hashes.
    pub fn manifest_hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let mut hasher = Sha256::new();
        hasher.update(canonical.manifest_json()?.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }

    fn search_config(&self) -> SearchConfig {
        SearchConfig {
            beta_range: self.beta_range,
            lambda_range: self.lambda_range,
            budget: self.budget,
            lambda_grid_size: self.lambda_grid_size,
            evaluator: self.evaluator,
            k: self.k,
            n_omega: self.n_omega,
            n_psi: self.n_psi,
            k_quad: self.k_quad,
            kernel_rho: self.kernel_rho,
            kernel_c: self.kernel_c,
            direct_cap: self.direct_cap,
            nystrom_rank: self.nystrom_rank,
            lsqr_tol: self.lsqr_tol,
            lsqr_maxit: self.lsqr_maxit,
            gh_probes: self.gh_probes,
            mercator_tol: self.mercator_tol,
            seed: self.seed,
        }
    }

    fn indirect_config(&self) -> IndirectConfig {
        IndirectConfig {
            nystrom_rank: self.nystrom_rank,
            lsqr_tol: self.lsqr_tol,
            lsqr_maxit: self.lsqr_maxit,
            gh_probes: self.gh_probes,
            mercator_tol: self.mercator_tol,
            mercator_maxit: 2000,
            seed: self.seed,
        }
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Signal-file sidecar carrying the generation spec and ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub manifest_hash: String,
    pub spec: SynthSpec,
    pub noiseless: bool,
    pub theta_true: Vec<f64>,
}

/// Runs one resolved configuration; returns the process exit code.
pub fn run(config: &RunConfig) -> Result<i32> {
    let pool = thread_pool()?;
    pool.install(|| match config.command {
        CommandKind::Gen => cmd_gen(config),
        CommandKind::Grid => cmd_grid(config),
        CommandKind::Identify => cmd_identify(config),
        CommandKind::Bench => cmd_bench(config),
        CommandKind::Verify => cmd_verify(config),
    })
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let threads: usize = value.parse().map_err(|_| {
            Error::InvalidParam(format!("{THREADS_ENV} must be a positive integer"))
        })?;
        if threads == 0 {
            return Err(Error::InvalidParam(format!(
                "{THREADS_ENV} must be a positive integer"
            )));
        }
        builder = builder.num_threads(threads);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidParam(format!("worker pool: {e}")))
}

fn write_manifest(config: &RunConfig) -> Result<String> {
    let hash = config.manifest_hash()?;
    let path = config.out.with_extension("manifest.json");
    let body = serde_json::json!({
        "manifest_hash": hash,
        "config": config,
    });
    std::fs::write(path, serde_json::to_string_pretty(&body)?)?;
    Ok(hash)
}

/// Loads the configuration back from a manifest file.
pub fn config_from_manifest(path: &Path) -> Result<RunConfig> {
    let body: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let config = body
        .get("config")
        .ok_or_else(|| Error::InvalidParam("manifest lacks a config field".into()))?;
    Ok(serde_json::from_value(config.clone())?)
}

// ---------------------------------------------------------------------------
// Signal file IO
// ---------------------------------------------------------------------------

/// Writes the `u,y` CSV with a manifest-hash comment line.
pub fn write_signal_csv(path: &Path, data: &SystemData, hash: &str) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# manifest_hash={hash}")?;
    writeln!(file, "u,y")?;
    for (u, y) in data.input().iter().zip(data.output().iter()) {
        writeln!(file, "{u},{y}")?;
    }
    Ok(())
}

/// Reads a `u,y` CSV, skipping `#` comment lines.
pub fn read_signal_csv(path: &Path) -> Result<(DVector<f64>, DVector<f64>)> {
    let raw = std::fs::read_to_string(path)?;
    let body: String = raw
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "u" || &headers[1] != "y" {
        return Err(Error::InvalidParam(format!(
            "{} does not carry the expected 'u,y' header",
            path.display()
        )));
    }
    let mut u = Vec::new();
    let mut y = Vec::new();
    for record in reader.records() {
        let record = record?;
        u.push(parse_float(&record[0])?);
        y.push(parse_float(&record[1])?);
    }
    if u.is_empty() {
        return Err(Error::InvalidParam(format!(
            "{} contains no samples",
            path.display()
        )));
    }
    Ok((DVector::from_vec(u), DVector::from_vec(y)))
}

fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::InvalidParam(format!("invalid number '{s}' in signal file")))
}

fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("sidecar.json")
}

fn load_data(config: &RunConfig) -> Result<SystemData> {
    let path = config
        .data_path
        .as_ref()
        .ok_or_else(|| Error::InvalidParam("this command requires --data".into()))?;
    let (u, y) = read_signal_csv(path)?;
    let sidecar: Option<Sidecar> = std::fs::read_to_string(sidecar_path(path))
        .ok()
        .and_then(|body| serde_json::from_str(&body).ok());
    let (n, theta) = match &sidecar {
        Some(side) => (
            side.spec.n,
            Some(DVector::from_vec(side.theta_true.clone())),
        ),
        None => (config.n, None),
    };
    SystemData::new(u, y, n, theta)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(config: &RunConfig) -> Result<i32> {
    let spec = SynthSpec {
        a: config.a,
        m: config.m,
        n: config.n,
        snr: config.snr,
        snr_is_db: config.snr_db,
        seed: config.seed,
    };
    spec.validate()?;
    let hash = write_manifest(config)?;
    let data = generate(&spec)?;
    write_signal_csv(&config.out.with_extension("csv"), &data, &hash)?;
    let sidecar = Sidecar {
        manifest_hash: hash,
        noiseless: spec.noiseless(),
        theta_true: data.theta_true().map(|t| t.as_slice().to_vec()).unwrap_or_default(),
        spec,
    };
    std::fs::write(
        sidecar_path(&config.out.with_extension("csv")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct GridRow {
    beta: f64,
    lambda: f64,
    psi: f64,
    quad_term: f64,
    trace_term: f64,
    nu_star: f64,
    matvecs: u64,
    elapsed_us: u64,
}

#[derive(Debug, Clone, Serialize)]
struct MinimaRow {
    scope: String,
    beta: f64,
    lambda_star: f64,
    psi_star: f64,
}

fn log_grid(range: (f64, f64), count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![(0.5 * (range.0.ln() + range.1.ln())).exp()];
    }
    (0..count)
        .map(|i| {
            (range.0.ln() + (range.1.ln() - range.0.ln()) * i as f64 / (count - 1) as f64).exp()
        })
        .collect()
}

/// Evaluates one beta column of the grid: a single precompute (for the
/// spectral evaluators) followed by every lambda evaluation.
fn grid_column(
    config: &RunConfig,
    data: &SystemData,
    beta: f64,
    lambdas: &[f64],
) -> Result<Vec<GridRow>> {
    let n = data.fir_order();
    let params = KernelParams {
        beta,
        rho: config.kernel_rho,
        c: config.kernel_c,
    };
    let kernel = KernelFactor::from_kind(config.kernel, n, params)?;
    let phi = ToeplitzOperator::new(data.input().clone(), n)?;
    let y = data.output();

    let mut rows = Vec::with_capacity(lambdas.len());
    let mut push_row = |lambda: f64, eval: PmlEvaluation, matvecs: u64, elapsed_us: u64| {
        rows.push(GridRow {
            beta,
            lambda,
            psi: eval.psi,
            quad_term: eval.quad_term,
            trace_term: eval.trace_term,
            nu_star: eval.nu_star,
            matvecs,
            elapsed_us,
        });
    };

    match config.evaluator {
        EvaluatorKind::Direct => {
            let spectrum = pml_direct_precompute_from_ops(&phi, &kernel, y, config.direct_cap)?;
            let matvecs = phi.column_applies();
            for &lambda in lambdas {
                let start = Instant::now();
                let eval = pml_eval_from_spectrum(&spectrum, lambda)?;
                push_row(lambda, eval, matvecs, start.elapsed().as_micros() as u64);
            }
        }
        EvaluatorKind::Krylov => {
            let op = CompositeOperator::new(phi, kernel)?;
            let (spectrum, lanczos) =
                pml_krylov_precompute(&op, y, config.n_omega, config.k, config.seed)?;
            let model = if config.n_psi > 0 {
                Some(residual_trace_precompute(
                    &op,
                    &lanczos,
                    config.n_psi,
                    config.k_quad,
                    derive_seed(config.seed, 101),
                )?)
            } else {
                None
            };
            let matvecs = op.phi().column_applies();
            for &lambda in lambdas {
                let start = Instant::now();
                let eval = pml_krylov_eval(&spectrum, model.as_ref(), lambda)?;
                push_row(lambda, eval, matvecs, start.elapsed().as_micros() as u64);
            }
        }
        EvaluatorKind::Indirect => {
            let icfg = config.indirect_config();
            for &lambda in lambdas {
                let start = Instant::now();
                let eval = pml_indirect_eval(&phi, &kernel, y, lambda, &icfg)?;
                push_row(
                    lambda,
                    eval,
                    phi.column_applies(),
                    start.elapsed().as_micros() as u64,
                );
            }
        }
    }
    Ok(rows)
}

fn cmd_grid(config: &RunConfig) -> Result<i32> {
    let data = load_data(config)?;
    let hash = write_manifest(config)?;
    let betas = log_grid(config.beta_range, config.grid.0);
    let lambdas = log_grid(config.lambda_range, config.grid.1);

    let columns: Vec<Vec<GridRow>> = betas
        .par_iter()
        .map(|&beta| grid_column(config, &data, beta, &lambdas))
        .collect::<Result<Vec<_>>>()?;

    let mut minima: Vec<MinimaRow> = Vec::new();
    let mut global: Option<(f64, f64, f64)> = None;
    for column in &columns {
        let best = column
            .iter()
            .min_by(|a, b| a.psi.partial_cmp(&b.psi).unwrap())
            .expect("grid column is nonempty");
        minima.push(MinimaRow {
            scope: "per_beta".into(),
            beta: best.beta,
            lambda_star: best.lambda,
            psi_star: best.psi,
        });
        if global.is_none_or(|(_, _, psi)| best.psi < psi) {
            global = Some((best.beta, best.lambda, best.psi));
        }
    }
    if let Some((beta, lambda, psi)) = global {
        minima.push(MinimaRow {
            scope: "global".into(),
            beta,
            lambda_star: lambda,
            psi_star: psi,
        });
    }

    let rows: Vec<&GridRow> = columns.iter().flatten().collect();
    match config.format {
        OutputFormat::Csv => {
            let path = config.out.with_extension("csv");
            let mut file = std::fs::File::create(&path)?;
            writeln!(file, "# manifest_hash={hash}")?;
            writeln!(
                file,
                "beta,lambda,psi,quad_term,trace_term,nu_star,matvecs,elapsed_us"
            )?;
            for row in &rows {
                writeln!(
                    file,
                    "{},{},{},{},{},{},{},{}",
                    row.beta,
                    row.lambda,
                    row.psi,
                    row.quad_term,
                    row.trace_term,
                    row.nu_star,
                    row.matvecs,
                    row.elapsed_us
                )?;
            }
            let minima_path = config.out.with_extension("minima.csv");
            let mut file = std::fs::File::create(&minima_path)?;
            writeln!(file, "# manifest_hash={hash}")?;
            writeln!(file, "scope,beta,lambda_star,psi_star")?;
            for row in &minima {
                writeln!(
                    file,
                    "{},{},{},{}",
                    row.scope, row.beta, row.lambda_star, row.psi_star
                )?;
            }
        }
        OutputFormat::Json => {
            let body = serde_json::json!({
                "manifest_hash": hash,
                "rows": rows,
                "minima": minima,
            });
            std::fs::write(
                config.out.with_extension("json"),
                serde_json::to_string(&body)?,
            )?;
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// identify
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct IdentifyReport {
    pub manifest_hash: String,
    pub lambda_star: f64,
    pub beta_star: f64,
    pub psi_star: f64,
    pub nu_star: f64,
    pub sigma2_star: f64,
    pub fit: Option<f64>,
    pub precompute_count: usize,
    pub matvec_total: u64,
    pub widened: bool,
    pub theta_hat: Vec<f64>,
}

/// Search, refit at the optimum, posterior mean, and fit (when ground truth
/// is available).
pub fn identify(data: &SystemData, config: &RunConfig) -> Result<(FirEstimate, IdentifyReport)> {
    let search = minimize_pml(data, config.kernel, &config.search_config())?;
    let n = data.fir_order();
    let params = KernelParams {
        beta: search.beta_star,
        rho: config.kernel_rho,
        c: config.kernel_c,
    };
    let kernel = KernelFactor::from_kind(config.kernel, n, params)?;
    let phi = ToeplitzOperator::new(data.input().clone(), n)?;
    // One refit evaluation at the optimum recovers nu*, using the spectral
    // route that matches the evaluator the search ran with.
    let eval = match config.evaluator {
        EvaluatorKind::Direct => {
            let spectrum =
                pml_direct_precompute_from_ops(&phi, &kernel, data.output(), config.direct_cap)?;
            pml_eval_from_spectrum(&spectrum, search.lambda_star)?
        }
        _ => {
            let op_tmp = CompositeOperator::new(
                ToeplitzOperator::new(data.input().clone(), n)?,
                KernelFactor::from_kind(config.kernel, n, params)?,
            )?;
            let (spectrum, _) = pml_krylov_precompute(
                &op_tmp,
                data.output(),
                config.n_omega,
                config.k,
                config.seed,
            )?;
            pml_eval_from_spectrum(&spectrum, search.lambda_star)?
        }
    };
    let op = CompositeOperator::new(phi, kernel)?;
    let theta_hat = posterior_mean(&op, data.output(), search.lambda_star)?;
    let fit = match data.theta_true() {
        Some(truth) => Some(fit_metric(&theta_hat, truth)?),
        None => None,
    };
    let estimate = FirEstimate::new(
        theta_hat,
        eval.nu_star,
        search.lambda_star,
        search.beta_star,
        fit,
    )?;
    let report = IdentifyReport {
        manifest_hash: String::new(),
        lambda_star: estimate.lambda_star,
        beta_star: estimate.beta_star,
        psi_star: search.psi_star,
        nu_star: estimate.nu_star,
        sigma2_star: estimate.sigma2_star,
        fit: estimate.fit,
        precompute_count: search.precompute_count,
        matvec_total: search.matvec_total,
        widened: search.widened,
        theta_hat: estimate.theta_hat.as_slice().to_vec(),
    };
    Ok((estimate, report))
}

fn cmd_identify(config: &RunConfig) -> Result<i32> {
    let data = load_data(config)?;
    let hash = write_manifest(config)?;
    let (_, mut report) = identify(&data, config)?;
    report.manifest_hash = hash.clone();
    match config.format {
        OutputFormat::Json => {
            std::fs::write(
                config.out.with_extension("json"),
                serde_json::to_string_pretty(&report)?,
            )?;
        }
        OutputFormat::Csv => {
            let path = config.out.with_extension("csv");
            let mut file = std::fs::File::create(&path)?;
            writeln!(file, "# manifest_hash={hash}")?;
            writeln!(
                file,
                "lambda_star,beta_star,psi_star,nu_star,sigma2_star,fit,precompute_count,matvec_total"
            )?;
            writeln!(
                file,
                "{},{},{},{},{},{},{},{}",
                report.lambda_star,
                report.beta_star,
                report.psi_star,
                report.nu_star,
                report.sigma2_star,
                report.fit.map_or(String::new(), |f| f.to_string()),
                report.precompute_count,
                report.matvec_total
            )?;
            let theta_path = config.out.with_extension("theta.csv");
            let mut file = std::fs::File::create(&theta_path)?;
            writeln!(file, "# manifest_hash={hash}")?;
            writeln!(file, "index,theta_hat")?;
            for (i, v) in report.theta_hat.iter().enumerate() {
                writeln!(file, "{i},{v}")?;
            }
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct BenchRow {
    config_id: usize,
    kernel: String,
    snr: f64,
    seed: u64,
    fit: f64,
    lambda_star: f64,
    beta_star: f64,
    psi_star: f64,
    matvecs: u64,
    elapsed_us: u64,
}

fn quartiles(sorted: &[f64]) -> (f64, f64, f64) {
    let q = |p: f64| -> f64 {
        if sorted.len() == 1 {
            return sorted[0];
        }
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    (q(0.25), q(0.5), q(0.75))
}

fn kernel_name(kind: KernelKind) -> &'static str {
    match kind {
        KernelKind::Tc => "tc",
        KernelKind::Dc => "dc",
        KernelKind::Ss => "ss",
        KernelKind::DenseCustom => "custom",
    }
}

fn cmd_bench(config: &RunConfig) -> Result<i32> {
    if config.bench_seeds == 0 {
        return Err(Error::InvalidParam("bench needs at least one seed".into()));
    }
    let hash = write_manifest(config)?;
    let mut jobs = Vec::new();
    let mut config_id = 0;
    for &kernel in &config.kernel_list {
        for &snr in &config.snr_list {
            for rep in 0..config.bench_seeds {
                jobs.push((config_id, kernel, snr, rep as u64));
            }
            config_id += 1;
        }
    }

    let rows: Vec<BenchRow> = jobs
        .par_iter()
        .map(|&(cid, kernel, snr, rep)| -> Result<BenchRow> {
            let data_seed = derive_seed(config.seed, (cid as u64) << 32 | rep);
            let spec = SynthSpec {
                a: config.a,
                m: config.m,
                n: config.n,
                snr,
                snr_is_db: config.snr_db,
                seed: data_seed,
            };
            let data = generate(&spec)?;
            let started = Instant::now();
            let mut run_cfg = config.clone();
            run_cfg.kernel = kernel;
            run_cfg.seed = data_seed;
            let (estimate, report) = identify(&data, &run_cfg)?;
            Ok(BenchRow {
                config_id: cid,
                kernel: kernel_name(kernel).to_string(),
                snr,
                seed: data_seed,
                fit: estimate.fit.unwrap_or(f64::NAN),
                lambda_star: estimate.lambda_star,
                beta_star: estimate.beta_star,
                psi_star: report.psi_star,
                matvecs: report.matvec_total,
                elapsed_us: started.elapsed().as_micros() as u64,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let path = config.out.with_extension("csv");
    let mut file = std::fs::File::create(&path)?;
    writeln!(file, "# manifest_hash={hash}")?;
    writeln!(
        file,
        "config_id,kernel,snr,seed,fit,lambda_star,beta_star,psi_star,matvecs,elapsed_us"
    )?;
    for row in &rows {
        writeln!(
            file,
            "{},{},{},{},{},{},{},{},{},{}",
            row.config_id,
            row.kernel,
            row.snr,
            row.seed,
            row.fit,
            row.lambda_star,
            row.beta_star,
            row.psi_star,
            row.matvecs,
            row.elapsed_us
        )?;
    }

    let summary_path = config.out.with_extension("summary.csv");
    let mut file = std::fs::File::create(&summary_path)?;
    writeln!(file, "# manifest_hash={hash}")?;
    writeln!(
        file,
        "config_id,kernel,snr,n_seeds,fit_min,fit_q1,fit_median,fit_q3,fit_max"
    )?;
    let max_config = rows.iter().map(|r| r.config_id).max().unwrap_or(0);
    for cid in 0..=max_config {
        let mut fits: Vec<f64> = rows
            .iter()
            .filter(|r| r.config_id == cid)
            .map(|r| r.fit)
            .collect();
        if fits.is_empty() {
            continue;
        }
        fits.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (q1, median, q3) = quartiles(&fits);
        let sample = rows.iter().find(|r| r.config_id == cid).unwrap();
        writeln!(
            file,
            "{},{},{},{},{},{},{},{},{}",
            cid,
            sample.kernel,
            sample.snr,
            fits.len(),
            fits[0],
            q1,
            median,
            q3,
            fits[fits.len() - 1]
        )?;
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(config: &RunConfig) -> Result<i32> {
    let hash = write_manifest(config)?;
    let check_cfg = TheoryCheckConfig {
        m: config.check_m,
        seed: config.seed,
        k_max: config.check_k_max,
        kappa: config.check_kappa,
        ..TheoryCheckConfig::default()
    };
    let reports = run_all_checks(&check_cfg)?;
    let all_pass = reports.iter().all(|r| r.pass);
    let body = serde_json::json!({
        "manifest_hash": hash,
        "reports": reports,
    });
    std::fs::write(
        config.out.with_extension("json"),
        serde_json::to_string_pretty(&body)?,
    )?;
    for report in &reports {
        eprintln!(
            "check {:<28} {}",
            report.name,
            if report.pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(if all_pass { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// Flag parsing helpers shared with the binary
// ---------------------------------------------------------------------------

pub fn parse_range(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::InvalidParam(format!(
            "range '{s}' must be 'lo,hi'"
        )));
    }
    let lo: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParam(format!("invalid range bound '{}'", parts[0])))?;
    let hi: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParam(format!("invalid range bound '{}'", parts[1])))?;
    Ok((lo, hi))
}

pub fn parse_grid_dims(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 2 {
        return Err(Error::InvalidParam(format!(
            "grid '{s}' must be 'NBETAxNLAMBDA'"
        )));
    }
    let a: usize = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParam(format!("invalid grid dimension '{}'", parts[0])))?;
    let b: usize = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParam(format!("invalid grid dimension '{}'", parts[1])))?;
    if a == 0 || b == 0 {
        return Err(Error::InvalidParam("grid dimensions must be >= 1".into()));
    }
    Ok((a, b))
}

pub fn parse_kernel(s: &str) -> Result<KernelKind> {
    match s {
        "tc" => Ok(KernelKind::Tc),
        "dc" => Ok(KernelKind::Dc),
        "ss" => Ok(KernelKind::Ss),
        other => Err(Error::InvalidParam(format!(
            "unknown kernel '{other}' (expected tc|dc|ss)"
        ))),
    }
}

pub fn parse_kernel_list(s: &str) -> Result<Vec<KernelKind>> {
    s.split(',').map(|p| parse_kernel(p.trim())).collect()
}

pub fn parse_snr(s: &str) -> Result<f64> {
    if s == "inf" || s == "infinite" || s == "noiseless" {
        return Ok(f64::INFINITY);
    }
    s.parse()
        .map_err(|_| Error::InvalidParam(format!("invalid SNR '{s}'")))
}

pub fn parse_snr_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|p| parse_snr(p.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_helpers() {
        assert_eq!(parse_range("1e-6,1e-2").unwrap(), (1e-6, 1e-2));
        assert!(parse_range("1e-6").is_err());
        assert_eq!(parse_grid_dims("50x50").unwrap(), (50, 50));
        assert!(parse_grid_dims("50").is_err());
        assert!(parse_kernel("tc").is_ok());
        assert!(parse_kernel("zz").is_err());
        assert!(parse_snr("inf").unwrap().is_infinite());
        assert_eq!(parse_snr_list("10,1").unwrap(), vec![10.0, 1.0]);
    }

    #[test]
    fn manifest_hash_is_stable_and_sensitive() {
        let config = RunConfig::default();
        assert_eq!(
            config.manifest_hash().unwrap(),
            config.manifest_hash().unwrap()
        );
        let other = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_ne!(
            config.manifest_hash().unwrap(),
            other.manifest_hash().unwrap()
        );
    }

    #[test]
    fn quartiles_interpolate() {
        let data = [1.0, 2.0, 3.0, 4.0];
        let (q1, med, q3) = quartiles(&data);
        assert!((q1 - 1.75).abs() < 1e-12);
        assert!((med - 2.5).abs() < 1e-12);
        assert!((q3 - 3.25).abs() < 1e-12);
    }
}
