//! Losses, the Adam optimizer, task models and the training loop.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput};
use crate::data::{nbody_samples, shape_samples, DatasetFile, FieldSpec, NBodySample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::{knn, PointCloud, NORM_EPS};
use crate::nn::{NamedParams, Params};
use crate::readout::{Head, Pool};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean negative log-softmax of the true class, stabilized by max
/// subtraction.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!("cross_entropy expects [B, c], got {:?}", shape)));
    }
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::argument(format!(
            "{} labels for {} logit rows",
            labels.len(),
            b
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::argument(format!("label {bad} out of range for {c} classes")));
    }
    let m = logits.max_axis(1)?.reshape(&[b, 1])?;
    let z = logits.sub(&m)?;
    let lse = z.exp().sum_axis(1)?.ln();
    let mut mask = vec![0.0; b * c];
    for (row, &l) in labels.iter().enumerate() {
        mask[row * c + l] = 1.0;
    }
    let mask = Tensor::from_data(&[b, c], mask, false)?;
    let picked = z.mul(&mask)?.sum_axis(1)?;
    lse.sub(&picked)?.mean_axis(0)
}

/// Mean over points of `1 - <pred/|pred|, n_true>`. Predictions are
/// normalized (stabilized) before the inner product; true normals are
/// assumed unit length.
pub fn cosine_distance_loss(pred: &Tensor, true_n: &Tensor) -> Result<Tensor> {
    let shape = pred.shape();
    if shape.len() != 2 || shape[1] != 3 || true_n.shape() != shape {
        return Err(Error::shape(format!(
            "cosine loss expects matching [N,3], got {:?} and {:?}",
            shape,
            true_n.shape()
        )));
    }
    let n = shape[0];
    let norm = pred.l2_norm_rows(NORM_EPS)?.reshape(&[n, 1])?;
    let unit = pred.div(&norm)?;
    let dot = unit.mul(true_n)?.sum_axis(1)?;
    Tensor::ones(&[n]).sub(&dot)?.mean_axis(0)
}

/// Mean squared difference over every entry.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse shapes disagree: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    pred.sub(target)?.square()?.mean_all()
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Standard Adam with bias correction. Parameters update in place; a
/// missing gradient counts as zero.
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &NamedParams) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, hp: &AdamParams, params: &NamedParams) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (idx, (_, p)) in params.iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            if grad.len() != self.m[idx].len() {
                return Err(Error::State(format!(
                    "gradient length {} does not match moment buffer {}",
                    grad.len(),
                    self.m[idx].len()
                )));
            }
            let mut data = p.value();
            for i in 0..grad.len() {
                let g = grad[i];
                self.m[idx][i] = hp.beta1 * self.m[idx][i] + (1.0 - hp.beta1) * g;
                self.v[idx][i] = hp.beta2 * self.v[idx][i] + (1.0 - hp.beta2) * g * g;
                let mhat = self.m[idx][i] / bc1;
                let vhat = self.v[idx][i] / bc2;
                data[i] -= hp.lr * mhat / (vhat.sqrt() + hp.epsilon);
            }
            p.set_data(&data)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// task models
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Normals,
    Nbody,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Task> {
        match s {
            "classify" => Ok(Task::Classify),
            "normals" => Ok(Task::Normals),
            "nbody" => Ok(Task::Nbody),
            other => Err(Error::argument(format!(
                "unknown task '{other}', expected one of: classify, normals, nbody"
            ))),
        }
    }
}

/// Width of the invariant velocity encoding fed to the n-body model:
/// `O_iᵀ v_i` (3), `|v_i|` (1) and the charge (1).
pub const NBODY_EXTRA_DIM: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default = "default_pool")]
    pub pool: Pool,
}

fn default_head_hidden() -> usize {
    32
}

fn default_pool() -> Pool {
    Pool::Mean
}

/// Backbone plus task head. The n-body variant wires velocities in as
/// invariant scalars and predicts a displacement through the equivariant
/// head, so the predicted positions inherit full rigid-motion equivariance.
pub struct Model {
    pub task: Task,
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub head: Head,
}

impl Model {
    pub fn init(rng: &mut Rng, task: Task, mut cfg: ModelConfig) -> Result<Model> {
        if task == Task::Nbody {
            cfg.backbone.extra_input_dim = NBODY_EXTRA_DIM;
        }
        let backbone = Backbone::init(rng, cfg.backbone.clone())?;
        let head_out = match task {
            Task::Classify => NUM_CLASSES,
            Task::Normals | Task::Nbody => 3,
        };
        let head = Head::init(rng, backbone.out_dim(), cfg.head_hidden, head_out)?;
        Ok(Model {
            task,
            cfg,
            backbone,
            head,
        })
    }

    pub fn logits(&self, cloud: &PointCloud) -> Result<Tensor> {
        let out = self.backbone.forward(cloud, None)?;
        self.head.invariant_global(out.features(), self.cfg.pool)
    }

    pub fn normals(&self, cloud: &PointCloud) -> Result<Tensor> {
        let out = self.backbone.forward(cloud, None)?;
        self.head.equivariant(out.features(), &out.frames[0])
    }

    /// Predicted future positions `x_i + O_i p_i`.
    pub fn nbody_positions(&self, cloud: &PointCloud) -> Result<Tensor> {
        let (out, coords) = self.nbody_backbone(cloud)?;
        let disp = self.head.equivariant(out.features(), &out.frames[0])?;
        coords.add(&disp)
    }

    fn nbody_backbone(&self, cloud: &PointCloud) -> Result<(BackboneOutput, Tensor)> {
        let n = cloud.len();
        let velocities = cloud
            .velocities_tensor()
            .ok_or_else(|| Error::argument("n-body input needs velocities"))?;
        let charges = cloud
            .charges
            .as_ref()
            .ok_or_else(|| Error::argument("n-body input needs charges"))?;
        let coords = cloud.coords_tensor();
        let k_eff = self.cfg.backbone.k.min(n.saturating_sub(1));
        let g = knn(cloud, k_eff)?;
        let frames = self.backbone.orientation_net().learn(&coords, &g)?;

        let v_proj = frames[0]
            .project(&velocities.reshape(&[n, 1, 3])?)?
            .reshape(&[n, 3])?;
        let v_norm = velocities.l2_norm_rows(NORM_EPS)?.reshape(&[n, 1])?;
        let q = Tensor::from_data(&[n, 1], charges.clone(), false)?;
        let extra = Tensor::concat(&[&v_proj, &v_norm, &q], 1)?;

        let out = self.backbone.forward_with_frames(cloud, Some(&extra), frames, g)?;
        Ok((out, coords))
    }
}

impl Params for Model {
    fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.backbone.collect(prefix, out);
        self.head.collect(prefix, out);
    }
}

// ---------------------------------------------------------------------------
// metrics and the training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_distance: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamParams,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamParams::default(),
            batch_size: 8,
            epochs: 50,
        }
    }
}

enum TaskData {
    Shapes(Vec<PointCloud>),
    Nbody(Vec<NBodySample>),
}

impl TaskData {
    fn decode(task: Task, file: &DatasetFile) -> Result<TaskData> {
        match task {
            Task::Classify | Task::Normals => Ok(TaskData::Shapes(shape_samples(file)?)),
            Task::Nbody => Ok(TaskData::Nbody(nbody_samples(file)?)),
        }
    }

    fn len(&self) -> usize {
        match self {
            TaskData::Shapes(v) => v.len(),
            TaskData::Nbody(v) => v.len(),
        }
    }
}

fn batch_loss(model: &Model, data: &TaskData, indices: &[usize]) -> Result<Tensor> {
    match (model.task, data) {
        (Task::Classify, TaskData::Shapes(samples)) => {
            let mut logits = Vec::with_capacity(indices.len());
            let mut labels = Vec::with_capacity(indices.len());
            for &i in indices {
                let s = &samples[i];
                logits.push(model.logits(s)?.reshape(&[1, NUM_CLASSES])?);
                labels.push(s.label.ok_or_else(|| Error::argument("sample without label"))?);
            }
            let refs: Vec<&Tensor> = logits.iter().collect();
            cross_entropy(&Tensor::concat(&refs, 0)?, &labels)
        }
        (Task::Normals, TaskData::Shapes(samples)) => {
            let mut acc: Option<Tensor> = None;
            for &i in indices {
                let s = &samples[i];
                let normals = s
                    .normals
                    .as_ref()
                    .ok_or_else(|| Error::argument("sample without normals"))?;
                let flat: Vec<f64> = normals.iter().flatten().copied().collect();
                let target = Tensor::from_data(&[s.len(), 3], flat, false)?;
                let l = cosine_distance_loss(&model.normals(s)?, &target)?;
                acc = Some(match acc {
                    Some(a) => a.add(&l)?,
                    None => l,
                });
            }
            Ok(acc.expect("non-empty batch").scale(1.0 / indices.len() as f64))
        }
        (Task::Nbody, TaskData::Nbody(samples)) => {
            let mut acc: Option<Tensor> = None;
            for &i in indices {
                let s = &samples[i];
                let flat: Vec<f64> = s.target.iter().flatten().copied().collect();
                let target = Tensor::from_data(&[s.cloud.len(), 3], flat, false)?;
                let l = mse_loss(&model.nbody_positions(&s.cloud)?, &target)?;
                acc = Some(match acc {
                    Some(a) => a.add(&l)?,
                    None => l,
                });
            }
            Ok(acc.expect("non-empty batch").scale(1.0 / indices.len() as f64))
        }
        _ => Err(Error::config("dataset does not match the task")),
    }
}

/// Task metric on a dataset, without touching gradients.
pub fn evaluate(model: &Model, file: &DatasetFile) -> Result<Metrics> {
    no_grad(|| {
        let data = TaskData::decode(model.task, file)?;
        let n = data.len();
        if n == 0 {
            return Err(Error::argument("empty dataset"));
        }
        let all: Vec<usize> = (0..n).collect();
        let loss = batch_loss(model, &data, &all)?.item()?;
        let mut metrics = Metrics {
            epoch: 0,
            loss,
            accuracy: None,
            mse: None,
            cosine_distance: None,
        };
        match (&data, model.task) {
            (TaskData::Shapes(samples), Task::Classify) => {
                let mut correct = 0usize;
                for s in samples {
                    let logits = model.logits(s)?.value();
                    let pred = argmax(&logits);
                    if Some(pred) == s.label {
                        correct += 1;
                    }
                }
                metrics.accuracy = Some(correct as f64 / n as f64);
            }
            (TaskData::Shapes(_), Task::Normals) => {
                metrics.cosine_distance = Some(loss);
            }
            (TaskData::Nbody(_), _) => {
                metrics.mse = Some(loss);
            }
            _ => {}
        }
        Ok(metrics)
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Full training run. Metrics entry 0 reports the initialized model; one
/// entry follows per epoch (mean train loss, test metrics).
pub fn train_task(
    task: Task,
    cfg: ModelConfig,
    train_file: &DatasetFile,
    test_file: &DatasetFile,
    tc: &TrainConfig,
    seed: u64,
) -> Result<(Model, Vec<Metrics>)> {
    if tc.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let root = Rng::from_seed(seed);
    let mut init_rng = root.split(0);
    let mut shuffle_rng = root.split(1);
    let model = Model::init(&mut init_rng, task, cfg)?;
    let data = TaskData::decode(task, train_file)?;
    let n = data.len();
    if n == 0 {
        return Err(Error::argument("empty training dataset"));
    }

    let params = model.parameters();
    let mut adam = AdamState::new(&params);
    let mut history = Vec::with_capacity(tc.epochs + 1);

    let mut initial = evaluate(&model, test_file)?;
    initial.epoch = 0;
    initial.loss = no_grad(|| batch_loss(&model, &data, &(0..n).collect::<Vec<_>>()))?.item()?;
    history.push(initial);

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=tc.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            for (_, p) in &params {
                p.zero_grad();
            }
            let loss = batch_loss(&model, &data, chunk)?;
            epoch_loss += loss.item()?;
            batches += 1;
            loss.backward()?;
            adam.step(&tc.adam, &params)?;
        }
        let mut m = evaluate(&model, test_file)?;
        m.epoch = epoch;
        m.loss = epoch_loss / batches as f64;
        history.push(m);
    }
    Ok((model, history))
}

// ---------------------------------------------------------------------------
// model persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct StoredModel {
    task: Task,
    model: ModelConfig,
}

const CONFIG_FIELD: &str = "config_utf8";

/// Serializes a model into the dataset container: one record, one field per
/// parameter tensor, plus the configuration as utf-8 bytes (one byte per
/// f64, exact under round-trip).
pub fn model_to_file(model: &Model, seed: u64) -> Result<DatasetFile> {
    let stored = StoredModel {
        task: model.task,
        model: model.cfg.clone(),
    };
    let json = serde_json::to_string(&stored)
        .map_err(|e| Error::config(format!("cannot serialize model config: {e}")))?;
    let params = model.parameters();
    let mut fields = vec![FieldSpec::new(CONFIG_FIELD, &[json.len()])];
    let mut values: Vec<Vec<f64>> = vec![json.bytes().map(|b| b as f64).collect()];
    for (name, p) in &params {
        fields.push(FieldSpec::new(name, p.shape()));
        values.push(p.value());
    }
    let mut file = DatasetFile::new(seed, fields);
    file.push_record(values)?;
    Ok(file)
}

/// Reconstructs a model from a parameter container.
pub fn model_from_file(file: &DatasetFile) -> Result<Model> {
    let cfg_bytes = file.field(0, CONFIG_FIELD).map_err(|_| {
        Error::Format {
            offset: 0,
            message: "parameter file lacks the embedded configuration".into(),
        }
    })?;
    let json: String = cfg_bytes.iter().map(|&b| b as u8 as char).collect();
    let stored: StoredModel = serde_json::from_str(&json)
        .map_err(|e| Error::config(format!("embedded model config is invalid: {e}")))?;
    let model = Model::init(&mut Rng::from_seed(0), stored.task, stored.model)?;
    for (name, p) in model.parameters() {
        let vals = file.field(0, &name).map_err(|_| {
            Error::config(format!("parameter file is missing tensor '{name}'"))
        })?;
        if vals.len() != p.numel() {
            return Err(Error::config(format!(
                "tensor '{name}' has {} values, expected {}",
                vals.len(),
                p.numel()
            )));
        }
        p.set_data(vals)?;
    }
    Ok(model)
}
