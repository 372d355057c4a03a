use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Adaptive subspace PCA and principal component regression for gridded data.
#[derive(Parser, Debug)]
#[command(name = "aspca", version, about)]
struct Cli {
    /// Worker threads (defaults to ASPCA_THREADS, then the number of cores).
    #[arg(long, global = true, env = "ASPCA_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate eigenvalues and eigenfunctions.
    Fit(FitArgs),
    /// Test whether the basis captures the sample variation.
    Diagnose(DiagnoseArgs),
    /// Choose the number of components by proportion of variance.
    Pve(PveArgs),
    /// Fit the regression with plug-in standard errors.
    Regress(RegressArgs),
    /// Fit the regression with bootstrap intervals.
    Bootstrap(BootstrapArgs),
    /// Fit the regression with block-jackknife intervals.
    Jackknife(JackknifeArgs),
    /// Run a Monte Carlo study of one simulation setting.
    Simulate(SimulateArgs),
    /// Rebuild one of the built-in simulation tables.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BasisKind {
    Bspline,
    Tri,
}

#[derive(Args, Debug, Clone)]
struct BasisArgs {
    /// Projection basis family.
    #[arg(long, value_enum, default_value_t = BasisKind::Bspline)]
    basis: BasisKind,
    /// B-spline degree on every axis.
    #[arg(long, default_value_t = 3)]
    degree: usize,
    /// Interior knots on every axis.
    #[arg(long, default_value_t = 5)]
    knots: usize,
    /// Triangulation file (for --basis tri), coordinates in cell-centre units.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Optional HSG1 grid; cells with a nonzero value form the domain.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Refine the knots (k to 2k+1, at most 4 times) until the diagnostic
    /// no longer rejects.
    #[arg(long)]
    auto_knots: bool,
    /// Level used by --auto-knots.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Relative Gram eigenvalue cutoff for whitening.
    #[arg(long, default_value_t = aspca::DEFAULT_DROP_TOL)]
    drop_tol: f64,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// HSG1 sample grid with a leading observation axis.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    basis: BasisArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    basis: BasisArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PveArgs {
    /// HSG1 sample grid (alternative to --eigenvalues).
    #[arg(long, required_unless_present = "eigenvalues")]
    data: Option<PathBuf>,
    /// CSV with an `eigenvalue` column.
    #[arg(long, conflicts_with = "data")]
    eigenvalues: Option<PathBuf>,
    /// Total variance for --eigenvalues (defaults to their sum).
    #[arg(long, requires = "eigenvalues")]
    total_variance: Option<f64>,
    #[arg(long, default_value_t = 0.95)]
    tau: f64,
    #[command(flatten)]
    basis: BasisArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct RegressionInputs {
    #[arg(long)]
    data: PathBuf,
    /// CSV holding the response column.
    #[arg(long)]
    y: PathBuf,
    #[arg(long, default_value = "y")]
    y_column: String,
    /// CSV whose columns are all Euclidean covariates.
    #[arg(long)]
    x: Option<PathBuf>,
    /// 0/1 column of the response table; enables the interaction model.
    #[arg(long)]
    treatment: Option<String>,
    #[arg(long, default_value_t = 0.95)]
    tau: f64,
    /// Use this many components instead of the PVE rule.
    #[arg(long)]
    components: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[command(flatten)]
    basis: BasisArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RegressArgs {
    #[command(flatten)]
    inputs: RegressionInputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WeightKind {
    Nonparametric,
    Wild,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    #[command(flatten)]
    inputs: RegressionInputs,
    /// Bootstrap replicates.
    #[arg(long = "B", default_value_t = 300)]
    b_reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = WeightKind::Nonparametric)]
    kind: WeightKind,
}

#[derive(Args, Debug)]
struct JackknifeArgs {
    #[command(flatten)]
    inputs: RegressionInputs,
    /// Number of interleaved blocks.
    #[arg(long)]
    r: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InferenceArg {
    None,
    Bootstrap,
    Wild,
    Plugin,
    Jackknife,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = FamilyArg::TwoD)]
    family: FamilyArg,
    /// JSON scenario file; overrides --family, --n, --r and --scale.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// AR correlation of the covariates.
    #[arg(long, default_value_t = 0.0)]
    r: f64,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
    scale: ScaleArg,
    #[arg(long, value_enum, default_value_t = InferenceArg::None)]
    inference: InferenceArg,
    #[arg(long = "B", default_value_t = 300)]
    b_reps: usize,
    /// Jackknife blocks.
    #[arg(long, default_value_t = 50)]
    blocks: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    /// 1-3: 2D eigenvalues, slopes, score coefficients; 4/5: 3D eigenvalues; 6: 3D coefficients.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=6))]
    table: u8,
    #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
    scale: ScaleArg,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "B", default_value_t = 300)]
    b_reps: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure {t} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
