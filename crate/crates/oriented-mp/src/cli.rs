//! Implementations behind the `oriented-mp` binary.
//!
//! Every command is a pure function of its flags, config and input files:
//! one seed governs all randomness, outputs are byte-deterministic, and the
//! fully resolved configuration is echoed before a run starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_nbody_dataset, gen_shapes, DatasetFile, RotationMode};
use crate::error::{Error, Result};
use crate::geometry::{knn, PointCloud};
use crate::orientation::learn_orientations;
use crate::train::{
    evaluate, model_from_file, model_to_file, train_task, Metrics, ModelConfig, Task, TrainConfig,
};
use crate::verify::{run_all, AuditConfig, AuditReport};

/// Strict train/eval run configuration; unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataPaths,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub test: PathBuf,
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct GenSummary {
    seed: u64,
    records: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_mse: Option<f64>,
}

pub fn cmd_gen_nbody(
    particles: usize,
    trajectories: usize,
    steps: usize,
    horizon: usize,
    dt: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if particles < 2 {
        return Err(Error::argument(format!(
            "--particles must be >= 2, got {particles}"
        )));
    }
    if trajectories == 0 {
        return Err(Error::argument("--trajectories must be >= 1"));
    }
    if !(dt > 0.0) {
        return Err(Error::argument(format!("--dt must be positive, got {dt}")));
    }
    if horizon > steps {
        return Err(Error::argument(format!(
            "--horizon {horizon} exceeds --steps {steps}"
        )));
    }
    let (file, baseline) = gen_nbody_dataset(seed, trajectories, particles, steps, horizon, dt)?;
    file.write(out)?;
    println!(
        "{}",
        serde_json::to_string(&GenSummary {
            seed,
            records: trajectories,
            baseline_mse: Some(baseline),
        })
        .expect("serializable")
    );
    Ok(())
}

pub fn cmd_gen_shapes(
    per_class: usize,
    points: usize,
    noise: f64,
    rotation: RotationMode,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if per_class == 0 {
        return Err(Error::argument("--classes must be >= 1 samples per class"));
    }
    let file = gen_shapes(seed, per_class, points, noise, rotation)?;
    let records = file.records.len();
    file.write(out)?;
    println!(
        "{}",
        serde_json::to_string(&GenSummary {
            seed,
            records,
            baseline_mse: None,
        })
        .expect("serializable")
    );
    Ok(())
}

pub fn cmd_train(
    config_path: &Path,
    out: &Path,
    seed_override: Option<u64>,
    epochs_override: Option<usize>,
) -> Result<()> {
    let mut cfg = load_run_config(config_path)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    if let Some(e) = epochs_override {
        cfg.train.epochs = e;
    }
    // echo the fully resolved configuration
    println!("{}", serde_json::to_string(&cfg).expect("serializable"));

    let train_file = DatasetFile::read(&cfg.data.train)?;
    let test_file = DatasetFile::read(&cfg.data.test)?;
    let (model, history) = train_task(
        cfg.task,
        cfg.model.clone(),
        &train_file,
        &test_file,
        &cfg.train,
        cfg.seed,
    )?;
    for m in &history {
        println!("{}", serde_json::to_string(m).expect("serializable"));
    }
    model_to_file(&model, cfg.seed)?.write(out)?;
    Ok(())
}

pub fn cmd_eval(params: &Path, data: &Path, task: Task) -> Result<Metrics> {
    let model = model_from_file(&DatasetFile::read(params)?)?;
    if model.task != task {
        return Err(Error::config(format!(
            "parameter file was trained for task '{:?}', not '{:?}'",
            model.task, task
        )));
    }
    let file = DatasetFile::read(data)?;
    let metrics = evaluate(&model, &file)?;
    println!("{}", serde_json::to_string(&metrics).expect("serializable"));
    Ok(metrics)
}

pub fn cmd_verify(
    config: Option<&Path>,
    seed: Option<u64>,
    trials: Option<usize>,
    tol: Option<f64>,
) -> Result<AuditReport> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<AuditConfig>(&text)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => AuditConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    if let Some(t) = tol {
        cfg.tol = t;
    }
    if cfg.trials == 0 {
        return Err(Error::argument("--trials must be >= 1"));
    }
    let report = run_all(&cfg)?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(report)
}

/// Extracts the coordinates of one record from either dataset flavor.
fn record_cloud(file: &DatasetFile, record: usize) -> Result<PointCloud> {
    if record >= file.records.len() {
        return Err(Error::argument(format!(
            "record {record} out of range, file has {}",
            file.records.len()
        )));
    }
    let coords = file
        .field(record, "points")
        .or_else(|_| file.field(record, "positions"))?;
    Ok(PointCloud::from_points(
        coords.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
    ))
}

/// Writes one CSV row per point: coordinates plus the first two frame axes.
pub fn cmd_export_orientations(
    params: &Path,
    data: &Path,
    record: usize,
    out: &Path,
) -> Result<()> {
    let model = model_from_file(&DatasetFile::read(params)?)?;
    let file = DatasetFile::read(data)?;
    let cloud = record_cloud(&file, record)?;
    let n = cloud.len();
    let k = model.cfg.backbone.k.min(n.saturating_sub(1));
    let g = knn(&cloud, k)?;
    let frames = crate::tensor::no_grad(|| {
        learn_orientations(model.backbone.orientation_net(), &cloud.coords_tensor(), &g)
    })?;
    let u1 = frames.column(0)?.value();
    let u2 = frames.column(1)?.value();

    let mut csv = String::from("x,y,z,u1x,u1y,u1z,u2x,u2y,u2z\n");
    for (i, p) in cloud.points.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p[0],
            p[1],
            p[2],
            u1[i * 3],
            u1[i * 3 + 1],
            u1[i * 3 + 2],
            u2[i * 3],
            u2[i * 3 + 1],
            u2[i * 3 + 2]
        ));
    }
    std::fs::write(out, csv)?;
    Ok(())
}
