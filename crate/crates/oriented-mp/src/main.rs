use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use oriented_mp::cli;
use oriented_mp::data::RotationMode;
use oriented_mp::train::Task;

/// Equivariant point cloud analysis via learned per-point orientations.
#[derive(Parser)]
#[command(name = "oriented-mp", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate charged-particle trajectories and write a dataset.
    GenNbody {
        #[arg(long, default_value_t = 5)]
        particles: usize,
        #[arg(long, default_value_t = 300)]
        trajectories: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Prediction horizon in steps (the dataset target).
        #[arg(long, default_value_t = 500)]
        horizon: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate labeled synthetic shapes with analytic normals.
    GenShapes {
        /// Samples per class (sphere, cuboid, cylinder).
        #[arg(long, default_value_t = 200)]
        classes: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        /// Per-sample rotation: none, z or so3.
        #[arg(long, default_value = "none")]
        rotation: RotationMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output parameter file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate trained parameters on a dataset.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// classify, normals or nbody; must match the parameter file.
        #[arg(long)]
        task: Task,
    },
    /// Run the equivariance and gradient audits and print a JSON report.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Export learned orientations of one record as CSV for plotting.
    ExportOrientations {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Record index within the dataset.
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::GenNbody {
            particles,
            trajectories,
            steps,
            horizon,
            dt,
            seed,
            out,
        } => cli::cmd_gen_nbody(particles, trajectories, steps, horizon, dt, seed, &out).map(|_| 0),
        Cmd::GenShapes {
            classes,
            points,
            noise,
            rotation,
            seed,
            out,
        } => cli::cmd_gen_shapes(classes, points, noise, rotation, seed, &out).map(|_| 0),
        Cmd::Train {
            config,
            out,
            seed,
            epochs,
        } => cli::cmd_train(&config, &out, seed, epochs).map(|_| 0),
        Cmd::Eval { params, data, task } => cli::cmd_eval(&params, &data, task).map(|_| 0),
        Cmd::Verify {
            config,
            seed,
            trials,
            tol,
        } => cli::cmd_verify(config.as_deref(), seed, trials, tol)
            .map(|report| if report.pass { 0 } else { 5 }),
        Cmd::ExportOrientations {
            params,
            data,
            record,
            out,
        } => cli::cmd_export_orientations(&params, &data, record, &out).map(|_| 0),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
