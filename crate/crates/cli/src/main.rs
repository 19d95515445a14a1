//! `ropecloth` command line.
//!
//! Exit codes: 0 success, 1 runtime failure or failed experiment property,
//! 2 usage/config error, 3 simulation invariant violation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ropecloth", version, about = "Rope-chain cloth simulation, experiments and neural shape pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scene and write the per-bone frame CSV.
    Simulate(SimulateArgs),
    /// Single-rope pendulum against an RK4 reference.
    PendulumVerify(PendulumArgs),
    /// Swing amplitude after 3 s for several solver policies.
    IterationsStudy(IterationsArgs),
    /// Free particles hit by a translating sphere under each push-out policy.
    CollisionDemo(CollisionDemoArgs),
    /// Hanging extent of mass-spring flags at several stiffnesses vs a rope chain.
    FlagCompare(FlagArgs),
    /// Generate the mass-spring training dataset.
    GenData(GenDataArgs),
    /// Fit the skinning subspace to a dataset.
    FitPca(FitPcaArgs),
    /// Train the skinning or shape network.
    Train(TrainArgs),
    /// Reconstruct meshes from a frame CSV of bone positions.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Output directory; `frames.csv` is written there.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also reconstruct a mesh per frame with this model.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PendulumArgs {
    #[arg(long, default_value_t = 1.0 / 600.0)]
    dt: f64,
    #[arg(long, default_value_t = 5.0)]
    periods: f64,
    /// Release angle in degrees.
    #[arg(long, default_value_t = 30.0)]
    theta0: f64,
    #[arg(long, default_value_t = 1.0)]
    length: f64,
    /// Allowed max angle error as a fraction of the amplitude.
    #[arg(long, default_value_t = 0.02)]
    tolerance: f64,
    /// Allowed energy drift per period as a fraction of the swing energy.
    #[arg(long, default_value_t = 0.01)]
    energy_tolerance: f64,
    /// Solver stopping tolerance.
    #[arg(long, default_value_t = 1e-10)]
    solver_tolerance: f64,
    /// Trajectory CSV (t, theta, theta_oracle, energy).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IterationsArgs {
    /// Comma-separated policies: a sweep count (`5`) or a tolerance (`tol1e-6`).
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,tol1e-6")]
    sweeps: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyChoice {
    History,
    Gradient,
    Both,
}

#[derive(Args, Debug)]
struct CollisionDemoArgs {
    #[arg(long, value_enum, default_value_t = PolicyChoice::Both)]
    policy: PolicyChoice,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlagArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000,10000")]
    stiffness: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    frames: usize,
    #[arg(long, default_value_t = 20)]
    cols: usize,
    #[arg(long, default_value_t = 20)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Grid rows between consecutive bones of a chain; bones run from the
    /// top row down to the second-to-last row.
    #[arg(long, default_value_t = 3)]
    bone_stride: usize,
    #[arg(long, default_value_t = 20)]
    substeps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also export every vertex and bone as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write a rope-chain scene with the same bones, root path and bodies.
    #[arg(long)]
    rope_scene: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitPcaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Skinning,
    Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    data: PathBuf,
    /// Input model (subspace only for skinning, trained skinning for shape).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Shape-stage subspace size.
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate (default 1e-4 skinning, 1e-5 shape).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    data_weight: Option<f64>,
    #[arg(long)]
    pinn_weight: Option<f64>,
    /// Collision offset for penalty targets (default: the dataset's).
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    /// Standardize network inputs over the training frames (skinning stage).
    #[arg(long)]
    normalize_inputs: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Split metrics of the trained model as JSON.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Frame CSV as written by `simulate`.
    #[arg(long)]
    bones: PathBuf,
    /// Output directory for `mesh_NNNNN.obj` and `summary.json`.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::PendulumVerify(a) => commands::pendulum_verify(a),
        Command::IterationsStudy(a) => commands::iterations_study(a),
        Command::CollisionDemo(a) => commands::collision_demo(a),
        Command::FlagCompare(a) => commands::flag_compare(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::FitPca(a) => commands::fit_pca(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
