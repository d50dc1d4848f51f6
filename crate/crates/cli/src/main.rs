use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "mutualism", version, about = "Workbench for the ant/fungus mutualism model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate one trajectory and write `trajectory.csv` and `derived.csv`.
    Simulate(SimulateArgs),
    /// Closed-form equilibria, their stability and the regime.
    Equilibria(CommonArgs),
    /// Classify a grid of initial states by the attractor they approach.
    Basin(BasinArgs),
    /// Forward sensitivities of the trajectory and their ranking.
    Sense(SenseArgs),
    /// Fit parameters to an observation CSV.
    Fit(FitArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Parameter file with `key = value` lines.
    #[arg(long)]
    pub params: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Relative integration tolerance [default: 1e-10, 1e-12 for fit].
    #[arg(long = "tol-rel")]
    pub tol_rel: Option<f64>,
    /// Absolute integration tolerance [default: 1e-12, 1e-14 for fit].
    #[arg(long = "tol-abs")]
    pub tol_abs: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct WindowArgs {
    #[arg(long, default_value_t = 6.0)]
    pub t0: f64,
    #[arg(long, default_value_t = 29.0)]
    pub t1: f64,
    /// Initial ant biomass at `t0`.
    #[arg(long, default_value_t = 0.05)]
    pub a0: f64,
    /// Initial fungus biomass at `t0`.
    #[arg(long, default_value_t = 0.3)]
    pub f0: f64,
    /// Spacing of the output grid in weeks.
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Args, Debug)]
pub struct BasinArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Cells along A and F, as `AxB`.
    #[arg(long, default_value = "100x100")]
    pub grid: String,
    /// A range as `lo:hi`.
    #[arg(long = "a-range", default_value = "0:4")]
    pub a_range: String,
    /// F range as `lo:hi`.
    #[arg(long = "f-range", default_value = "0:4")]
    pub f_range: String,
    /// Time allowed for an orbit to reach an attractor before it counts as undecided.
    #[arg(long, default_value_t = 1e10)]
    pub horizon: f64,
    /// Classify cells on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScaleArg {
    Raw,
    Scaled,
}

#[derive(Args, Debug)]
pub struct SenseArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Comma-separated targets among r_a,r_f,r_c,d_a,d_f,b,a,A0,F0.
    #[arg(long, default_value = "r_a,r_f,r_c,d_a,d_f,b,a,A0,F0")]
    pub targets: String,
    /// Scale used to rank the targets.
    #[arg(long, value_enum, default_value_t = ScaleArg::Raw)]
    pub scale: ScaleArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    Raw,
    Log10p1,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WeightArg {
    Auto,
    Unit,
    InverseVariance,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Observation CSV with header `week,A_mean,A_sd,F_mean,F_sd`.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of Latin-hypercube starts; 0 runs a single fit from the parameter file.
    #[arg(long, default_value_t = 0)]
    pub multistart: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also fit the initial biomasses.
    #[arg(long = "free-initials")]
    pub free_initials: bool,
    /// Comma-separated targets held at their initial values.
    #[arg(long, default_value = "")]
    pub fix: String,
    /// Initial-guess ant biomass at the first week (default: first observed mean).
    #[arg(long)]
    pub a0: Option<f64>,
    /// Initial-guess fungus biomass at the first week (default: first observed mean).
    #[arg(long)]
    pub f0: Option<f64>,
    #[arg(long, value_enum, default_value_t = LossArg::Raw)]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value_t = WeightArg::Auto)]
    pub weighting: WeightArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Equilibria(a) => commands::equilibria(&a),
        Command::Basin(a) => commands::basin(&a),
        Command::Sense(a) => commands::sense(&a),
        Command::Fit(a) => commands::fit(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
