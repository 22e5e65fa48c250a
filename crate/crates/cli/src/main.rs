use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use sketchuq::diagnostics::{diagnose, rank_preservation_probability};
use sketchuq::experiment::{
    default_r_grid, run_sweep, CsvSource, DataSource, ExperimentConfig, Outputs, SyntheticSpec,
    DEFAULT_SIGMA2, DEFAULT_SPARSITY,
};
use sketchuq::io::{read_matrix_csv, read_vector_csv};
use sketchuq::model::{exact_solve, DesignData, ModelSpec};
use sketchuq::projector::{build_projectors, null_space_check, sketched_solve, NULL_SPACE_TOL};
use sketchuq::rng::RNG_ALGORITHM;
use sketchuq::sketch::{draw_sketch, SketchKind, SketchScheme};
use sketchuq::uq::{agreement, decompose, empirical_oracle, structural_bounds};
use sketchuq::{Error, Result};

/// Sketched least squares: solve, sketch, diagnose, quantify uncertainty, sweep.
#[derive(Debug, Parser)]
#[command(name = "sketchuq", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SKETCHUQ_THREADS")]
    threads: Option<usize>,

    /// Make output byte-for-byte reproducible (timings written as 0).
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Exact least-squares fit.
    Solve(DataArgs),
    /// Draw one sketch and solve the sketched problem.
    Sketch(SketchArgs),
    /// Estimate the probability that a scheme preserves rank.
    Diagnose(DiagnoseArgs),
    /// Total bias/variance/MSE/risk of the sketched solution.
    ///
    /// Simulation-grade: the true coefficients and noise variance must be
    /// supplied, since every total moment depends on them.
    Uq(UqArgs),
    /// Sweep schemes x sketch sizes x replicates and write CSV files.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Design matrix CSV (n rows, p columns).
    #[arg(long)]
    x: PathBuf,
    /// Response CSV (one column or one row).
    #[arg(long)]
    y: PathBuf,
    /// Both files start with a header line.
    #[arg(long)]
    header: bool,
}

#[derive(Debug, Args)]
struct SeedArgs {
    /// Master seed.
    #[arg(long, required_unless_present = "seed_from_entropy", conflicts_with = "seed_from_entropy")]
    seed: Option<u64>,
    /// Draw the master seed from the OS; it is echoed in the output.
    #[arg(long)]
    seed_from_entropy: bool,
}

impl SeedArgs {
    fn resolve(&self) -> u64 {
        self.seed.unwrap_or_else(|| {
            let s = rand::random::<u64>();
            eprintln!("sketchuq: using entropy seed {s}");
            s
        })
    }
}

#[derive(Debug, Args)]
struct SchemeArgs {
    /// unif, lev, norm or identity.
    #[arg(long)]
    scheme: SketchKind,
    /// Sketch dimension (ignored for identity).
    #[arg(long)]
    r: Option<usize>,
}

impl SchemeArgs {
    fn resolve(&self, n: usize) -> Result<SketchScheme> {
        match (self.scheme, self.r) {
            (SketchKind::Identity, _) => Ok(SketchScheme::identity(n)),
            (kind, Some(r)) => Ok(SketchScheme::new(kind, r)),
            (kind, None) => Err(Error::InvalidConfig(format!("--r is required for scheme {kind}"))),
        }
    }
}

#[derive(Debug, Args)]
struct SketchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[command(flatten)]
    seed: SeedArgs,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[command(flatten)]
    seed: SeedArgs,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
}

#[derive(Debug, Args)]
struct UqArgs {
    /// Design matrix CSV.
    #[arg(long)]
    x: PathBuf,
    /// Response CSV; defaults to the noise-free X beta0.
    #[arg(long)]
    y: Option<PathBuf>,
    #[arg(long)]
    header: bool,
    /// True coefficients (CSV, one row or column).
    #[arg(long)]
    beta0: PathBuf,
    /// True noise variance.
    #[arg(long)]
    sigma2: f64,
    #[command(flatten)]
    scheme: SchemeArgs,
    /// Monte-Carlo sketch draws.
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[command(flatten)]
    seed: SeedArgs,
    /// Condition on rank(SX) = p by rejecting rank-deficient draws.
    #[arg(long)]
    rank_conditioned: bool,
    /// Also run the brute-force oracle with this many noise draws per sketch.
    #[arg(long, value_name = "N_NOISE")]
    oracle: Option<usize>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// JSON configuration; other flags are then not allowed.
    #[arg(long, conflicts_with_all = ["n", "p", "coherence", "x", "schemes", "r_grid", "replicates", "seed", "records", "summary"])]
    config: Option<PathBuf>,
    /// Synthetic rows.
    #[arg(long, requires = "p", conflicts_with = "x")]
    n: Option<usize>,
    /// Synthetic columns.
    #[arg(long, requires = "n")]
    p: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    coherence: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA2)]
    sigma2: f64,
    #[arg(long, default_value_t = DEFAULT_SPARSITY)]
    sparsity: f64,
    /// Design CSV instead of a synthetic design.
    #[arg(long, requires = "y")]
    x: Option<PathBuf>,
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    #[arg(long)]
    header: bool,
    /// Comma-separated schemes.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<SketchKind>>,
    /// Comma-separated sketch sizes.
    #[arg(long, value_delimiter = ',')]
    r_grid: Option<Vec<usize>>,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seed_from_entropy: bool,
    /// Per-replicate CSV.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Per-cell summary CSV.
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn load_data(args: &DataArgs) -> Result<DesignData> {
    let x = read_matrix_csv(&args.x, args.header)?;
    let y = read_vector_csv(&args.y, args.header)?;
    DesignData::new(x, y)
}

fn solve(args: &DataArgs) -> Result<Value> {
    let data = load_data(args)?;
    let fit = exact_solve(&data);
    Ok(json!({
        "n": data.n(),
        "p": data.p(),
        "betaHat": fit.beta_hat.as_slice(),
        "residualNorm": fit.residual.norm(),
        "cosTheta": fit.cos_theta,
        "kappaX": fit.kappa_x,
    }))
}

fn sketch(args: &SketchArgs) -> Result<Value> {
    let data = load_data(&args.data)?;
    let scheme = args.scheme.resolve(data.n())?;
    let seed = args.seed.resolve();
    let draw = draw_sketch(scheme, &data, seed)?;
    let fit = exact_solve(&data);
    let sfit = sketched_solve(&data, &draw)?;
    let proj = build_projectors(&data, &draw)?;
    let diag = diagnose(&data, &draw, &fit)?;
    let bounds = match structural_bounds(&fit, &sfit, &proj) {
        Ok(b) => serde_json::to_value(b).map_err(json_err)?,
        Err(Error::BoundUndefined(msg)) => json!({ "undefined": msg }),
        Err(e) => return Err(e),
    };
    Ok(json!({
        "scheme": scheme.kind,
        "r": draw.r(),
        "seed": seed,
        "rngAlgorithm": RNG_ALGORITHM,
        "betaTilde": sfit.beta_tilde.as_slice(),
        "betaHat": fit.beta_hat.as_slice(),
        "diagnostics": diag,
        "devPPx": proj.dev_p_px,
        "devPPtPx": proj.dev_ppt_px,
        "devP0": proj.dev_p0,
        "normP": proj.norm_p,
        "identityGap": sfit.identity_gap,
        "nullSpaceConsistent": null_space_check(&data, &draw)?,
        "bounds": bounds,
        "tolerances": {
            "rank": data.svd().tolerance(),
            "nullSpace": NULL_SPACE_TOL,
        },
    }))
}

fn diagnose_cmd(args: &DiagnoseArgs) -> Result<Value> {
    let data = load_data(&args.data)?;
    let scheme = args.scheme.resolve(data.n())?;
    let seed = args.seed.resolve();
    let pr = rank_preservation_probability(&data, scheme, args.replicates, seed)?;
    Ok(json!({
        "scheme": scheme.kind,
        "r": scheme.r,
        "seed": seed,
        "rngAlgorithm": RNG_ALGORITHM,
        "prRankPreserved": pr.estimate,
        "prStdErr": pr.std_err,
        "nReplicates": pr.n_replicates,
    }))
}

fn uq(args: &UqArgs) -> Result<Value> {
    let x = read_matrix_csv(&args.x, args.header)?;
    let beta0 = read_vector_csv(&args.beta0, args.header)?;
    let y = match &args.y {
        Some(path) => read_vector_csv(path, args.header)?,
        None => {
            if x.ncols() != beta0.len() {
                return Err(Error::DimensionMismatch(format!(
                    "design has {} columns but beta0 has length {}",
                    x.ncols(),
                    beta0.len()
                )));
            }
            &x * &beta0
        }
    };
    let data = DesignData::new(x, y)?;
    let spec = ModelSpec::new(beta0, args.sigma2)?;
    let scheme = args.scheme.resolve(data.n())?;
    let seed = args.seed.resolve();
    let analysis = decompose(&data, &spec, scheme, args.draws, seed, args.rank_conditioned)?;
    let mut out = json!({
        "scheme": scheme.kind,
        "r": scheme.r,
        "seed": seed,
        "rngAlgorithm": RNG_ALGORITHM,
        "nDraws": analysis.moments.n_draws,
        "nRequested": analysis.moments.n_requested,
        "rejectionRate": analysis.moments.rejection_rate,
        "rankConditioned": args.rank_conditioned,
        "tolerances": { "rank": data.svd().tolerance() },
        "moments": analysis.moments,
        "report": analysis.report,
        "stdErrors": analysis.std_errors,
    });
    if let Some(n_noise) = args.oracle {
        let oracle = empirical_oracle(&data, &spec, scheme, n_noise, args.draws, seed)?;
        out["agreement"] = serde_json::to_value(agreement(&analysis, &oracle)).map_err(json_err)?;
        out["oracle"] = serde_json::to_value(&oracle).map_err(json_err)?;
    }
    Ok(out)
}

fn experiment(args: &ExperimentArgs, deterministic: bool) -> Result<Value> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => {
            let data_source = match (&args.x, &args.y, args.n, args.p) {
                (Some(x), Some(y), _, _) => DataSource::Csv(CsvSource {
                    x: x.clone(),
                    y: y.clone(),
                    header: args.header,
                }),
                (None, None, Some(n), Some(p)) => DataSource::Synthetic(SyntheticSpec {
                    n,
                    p,
                    coherence: args.coherence,
                    sigma2: args.sigma2,
                    sparsity: args.sparsity,
                }),
                _ => {
                    return Err(Error::InvalidConfig(
                        "give --config, --x/--y, or --n/--p".into(),
                    ))
                }
            };
            let master_seed = match (args.seed, args.seed_from_entropy) {
                (Some(s), false) => s,
                (None, true) => SeedArgs { seed: None, seed_from_entropy: true }.resolve(),
                _ => {
                    return Err(Error::InvalidConfig(
                        "exactly one of --seed or --seed-from-entropy is required".into(),
                    ))
                }
            };
            ExperimentConfig {
                schemes: args.schemes.clone().unwrap_or_else(|| SketchKind::ALL_RANDOM.to_vec()),
                r_grid: args.r_grid.clone().unwrap_or_else(default_r_grid),
                n_replicates: args.replicates,
                master_seed,
                data_source,
                outputs: Outputs {
                    records: args.records.clone(),
                    summary: args.summary.clone(),
                },
                deterministic: false,
            }
        }
    };
    config.deterministic |= deterministic;
    let result = run_sweep(&config)?;
    eprintln!(
        "sketchuq: {} records over {} cells",
        result.records.len(),
        result.summary.len()
    );
    Ok(json!({
        "masterSeed": config.master_seed,
        "rngAlgorithm": RNG_ALGORITHM,
        "nRecords": result.records.len(),
        "records": config.outputs.records,
        "summaryFile": config.outputs.summary,
        "summary": result.summary,
        "transitions": result.transitions,
    }))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Numerical(format!("json encoding failed: {e}"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } => 3,
        Error::Numerical(_) => 4,
        Error::Cell { source, .. } => exit_code(source),
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Solve(a) => solve(a),
        Command::Sketch(a) => sketch(a),
        Command::Diagnose(a) => diagnose_cmd(a),
        Command::Uq(a) => uq(a),
        Command::Experiment(a) => experiment(a, cli.deterministic),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.threads {
        Some(0) => Err(Error::InvalidConfig("--threads must be at least 1".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| run(&cli))),
        None => run(&cli),
    };
    match outcome.and_then(|v| serde_json::to_string_pretty(&v).map_err(json_err)) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sketchuq: error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
