use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "lksde",
    version,
    about = "Latent kinematics-aware SDE trajectory prediction and generation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario dataset.
    GenData(GenDataArgs),
    /// Train a model; writes per-epoch checkpoints, best.json and loss_history.csv.
    Train(TrainArgs),
    /// Predict future trajectories and report ADE/FDE against ground truth.
    Predict(PredictArgs),
    /// Generate trajectories for one scenario with optional latent edits.
    Generate(GenerateArgs),
    /// Sweep one latent component over a grid and write the trajectory fans.
    Sweep(SweepArgs),
    /// Compute the metrics report for a model or a predictions file.
    Eval(EvalArgs),
    /// Serve the generation API over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Straight,
    LaneChange,
    LeftTurn,
    RightTurn,
    StopAndGo,
}

impl From<Family> for lksde::scenario::FamilyKind {
    fn from(f: Family) -> Self {
        use lksde::scenario::FamilyKind as K;
        match f {
            Family::Straight => K::Straight,
            Family::LaneChange => K::LaneChange,
            Family::LeftTurn => K::LeftTurn,
            Family::RightTurn => K::RightTurn,
            Family::StopAndGo => K::StopAndGo,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Scenarios per family.
    #[arg(long, default_value_t = 200)]
    pub per_family: usize,
    /// Restrict to these families (default: all five).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub families: Vec<Family>,
    /// Observation noise standard deviation on waypoints.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Training config supplying history length, horizon and bicycle constants.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
    #[arg(long, required_unless_present = "print_config")]
    pub data: Option<PathBuf>,
    /// Validation dataset; when absent, a fraction of --data is held out.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub split_seed: u64,
    #[arg(long, required_unless_present = "print_config")]
    pub out: Option<PathBuf>,
    /// Overrides the config's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// Posterior-mean rollout of the trained model.
    Model,
    /// Constant-velocity extrapolation of the last history step.
    ConstantVelocity,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, required_if_eq("method", "model"))]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Model)]
    pub method: Method,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset holding the scenario.
    #[arg(long, required_unless_present = "request")]
    pub data: Option<PathBuf>,
    #[arg(long, conflicts_with = "request")]
    pub scenario: Option<String>,
    /// Latent edit `component=value`, e.g. `psi=0.5` or `sem2=-1`. Repeatable.
    #[arg(long = "set", value_name = "COMPONENT=VALUE")]
    pub set: Vec<String>,
    /// Replace latent components instead of offsetting the posterior mean.
    #[arg(long)]
    pub absolute: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Read the request body (same JSON as POST /generate) from a file instead.
    #[arg(long)]
    pub request: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// One of x, y, v, psi, sem0..sem3.
    #[arg(long)]
    pub component: String,
    /// Grid as start:stop:count.
    #[arg(long, allow_hyphen_values = true)]
    pub range: String,
    #[arg(long)]
    pub absolute: bool,
    /// Only these scenario ids. Repeatable.
    #[arg(long = "scenario")]
    pub scenarios: Vec<String>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "predictions")]
    pub model: Option<PathBuf>,
    /// Score a predictions file written by `predict` instead of a model.
    #[arg(long, conflicts_with = "model")]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Waypoint spacing in seconds, used with --predictions.
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    /// Generalized Pareto reference for acceleration W1 as shape,scale,location.
    #[arg(long, value_delimiter = ',', num_args = 3, allow_hyphen_values = true)]
    pub pareto: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset whose scenarios are addressable by id.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}
