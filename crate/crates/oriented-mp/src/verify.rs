//! Randomized audits of the equivariance identities and gradient
//! correctness, usable as tests and as a CLI report.
//!
//! Each audit draws random clouds and random rigid motions, measures the
//! worst-case deviation from the claimed identity and compares it against a
//! tolerance. Deliberately broken variants (frames without
//! orthogonalization, frozen identity frames, raw in-frame vectors) are
//! audited too: for those a check passes only when the deviation is LARGE,
//! guarding the sensitivity of the suite itself.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneKind};
use crate::error::{Error, Result};
use crate::geometry::{apply, gram_schmidt, knn, sample_rigid, OrientationSet, PointCloud, RigidTransform};
use crate::nn::Params;
use crate::orientation::{learn_orientations, OrientationConfig, OrientationNet};
use crate::readout::Head;
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};
use crate::train::cosine_distance_loss;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_dev: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckResult {
    /// Passes when the deviation stays below the tolerance.
    fn below(name: &str, trials: usize, max_dev: f64, tol: f64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            trials,
            max_dev,
            tol,
            pass: max_dev < tol,
        }
    }

    /// Passes when the deviation EXCEEDS the tolerance (mutation checks:
    /// a broken variant must visibly fail its identity).
    fn above(name: &str, trials: usize, max_dev: f64, tol: f64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            trials,
            max_dev,
            tol,
            pass: max_dev > tol,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

impl AuditReport {
    pub fn from_checks(checks: Vec<CheckResult>) -> AuditReport {
        let pass = checks.iter().all(|c| c.pass);
        AuditReport { checks, pass }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub seed: u64,
    pub trials: usize,
    pub points: usize,
    pub k: usize,
    /// Tolerance for the equivariance identities (exact up to f64 rounding).
    pub tol: f64,
    /// Relative tolerance for finite-difference gradient checks.
    pub grad_tol: f64,
    /// Deviation a deliberately broken variant must exceed.
    pub mutation_threshold: f64,
    /// Sampled parameter count of the whole-model gradient check.
    pub grad_samples: usize,
    pub orientation: OrientationConfig,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            seed: 0,
            trials: 50,
            points: 128,
            k: 16,
            tol: 1e-8,
            grad_tol: 1e-4,
            mutation_threshold: 1e-2,
            grad_samples: 200,
            orientation: OrientationConfig::default(),
        }
    }
}

fn random_cloud(rng: &mut Rng, n: usize) -> PointCloud {
    PointCloud::from_points(
        (0..n)
            .map(|_| [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)])
            .collect(),
    )
}

/// `R . O_i` for every frame, computed on raw values.
fn rotate_frames(frames: &Tensor, g: &RigidTransform) -> Vec<f64> {
    let vals = frames.value();
    let n = frames.shape()[0];
    let mut out = vec![0.0; vals.len()];
    for i in 0..n {
        for col in 0..3 {
            let u = [
                vals[i * 9 + col],
                vals[i * 9 + 3 + col],
                vals[i * 9 + 6 + col],
            ];
            let ru = g.apply_vector(u);
            for row in 0..3 {
                out[i * 9 + row * 3 + col] = ru[row];
            }
        }
    }
    out
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Proposition audit: `f_ort(RX + t) = (R O_1, ..., R O_N)`.
pub fn audit_orientation_equivariance(net: &OrientationNet, cfg: &AuditConfig) -> Result<CheckResult> {
    if cfg.trials == 0 {
        return Err(Error::argument("trials must be >= 1"));
    }
    no_grad(|| {
        let mut rng = Rng::from_seed(cfg.seed).split(1);
        let mut worst = 0.0f64;
        for _ in 0..cfg.trials {
            let cloud = random_cloud(&mut rng, cfg.points);
            let g = knn(&cloud, cfg.k)?;
            let rigid = sample_rigid(&mut rng, 3.0);
            let moved = apply(&rigid, &cloud);
            let o = learn_orientations(net, &cloud.coords_tensor(), &g)?;
            let o_moved = learn_orientations(net, &moved.coords_tensor(), &g)?;
            let expected = rotate_frames(o.tensor(), &rigid);
            worst = worst.max(max_abs(&expected, &o_moved.tensor().value()));
        }
        Ok(CheckResult::below(
            "orientation_equivariance",
            cfg.trials,
            worst,
            cfg.tol,
        ))
    })
}

/// Orthogonality of frames from random vector draws (including crafted
/// degenerate inputs) and from the learned network.
pub fn audit_orthogonality(net: &OrientationNet, cfg: &AuditConfig, draws: usize) -> Result<Vec<CheckResult>> {
    no_grad(|| {
        let mut rng = Rng::from_seed(cfg.seed).split(2);
        // bulk random draws in one batch
        let mut v1 = rng.uniform_vec(draws * 3, -1.0, 1.0);
        let mut v2 = rng.uniform_vec(draws * 3, -1.0, 1.0);
        // splice in degenerate rows: zero v1, zero v2, collinear v2, tiny v1
        let degenerate: [([f64; 3], [f64; 3]); 4] = [
            ([0.0, 0.0, 0.0], [1.0, 2.0, 3.0]),
            ([1.0, -1.0, 0.5], [0.0, 0.0, 0.0]),
            ([0.4, 0.2, -0.8], [-0.8, -0.4, 1.6]),
            ([1e-9, 0.0, 0.0], [0.0, 1e-9, 0.0]),
        ];
        for (i, (a, b)) in degenerate.iter().enumerate() {
            v1[i * 3..i * 3 + 3].copy_from_slice(a);
            v2[i * 3..i * 3 + 3].copy_from_slice(b);
        }
        let o = gram_schmidt(
            &Tensor::from_data(&[draws, 3], v1, false)?,
            &Tensor::from_data(&[draws, 3], v2, false)?,
        )?;
        let random_dev = o.rotation_deviation();

        // frames produced by the learned network over random clouds
        let mut learned_dev = 0.0f64;
        let clouds = 20.min(cfg.trials.max(1));
        for _ in 0..clouds {
            let cloud = random_cloud(&mut rng, cfg.points);
            let g = knn(&cloud, cfg.k)?;
            let frames = learn_orientations(net, &cloud.coords_tensor(), &g)?;
            learned_dev = learned_dev.max(frames.rotation_deviation());
        }
        Ok(vec![
            CheckResult::below("orthogonality_random_draws", draws, random_dev, cfg.tol),
            CheckResult::below(
                "orthogonality_learned_frames",
                clouds * cfg.points,
                learned_dev,
                cfg.tol,
            ),
        ])
    })
}

/// Proposition audit: per-point features are invariant at every layer
/// boundary, `h^l(RX + t) = h^l(X)`. Trials whose neighbor graphs change
/// under the motion (distance ties) are skipped.
pub fn audit_feature_invariance(
    backbone: &Backbone,
    cfg: &AuditConfig,
    name: &str,
) -> Result<CheckResult> {
    no_grad(|| {
        let mut rng = Rng::from_seed(cfg.seed).split(3);
        let mut worst = 0.0f64;
        let mut executed = 0usize;
        let mut attempts = 0usize;
        while executed < cfg.trials {
            attempts += 1;
            if attempts > cfg.trials * 3 {
                return Err(Error::State(
                    "too many kNN tie skips; clouds are not in general position".into(),
                ));
            }
            let cloud = random_cloud(&mut rng, cfg.points);
            let rigid = sample_rigid(&mut rng, 3.0);
            let moved = apply(&rigid, &cloud);
            let out1 = backbone.forward(&cloud, None)?;
            let out2 = backbone.forward(&moved, None)?;
            if out1.graphs != out2.graphs {
                continue;
            }
            executed += 1;
            for (a, b) in out1.per_layer.iter().zip(out2.per_layer.iter()) {
                worst = worst.max(max_abs(&a.value(), &b.value()));
            }
        }
        Ok(CheckResult::below(name, executed, worst, cfg.tol))
    })
}

/// Proposition audit: equivariant outputs satisfy
/// `e(RX + t) = R e(X)`, plus exact norm preservation `|e_i| = |p_i|`.
pub fn audit_output_equivariance(
    backbone: &Backbone,
    head: &Head,
    cfg: &AuditConfig,
) -> Result<Vec<CheckResult>> {
    no_grad(|| {
        let mut rng = Rng::from_seed(cfg.seed).split(4);
        let mut worst = 0.0f64;
        let mut worst_norm = 0.0f64;
        let mut executed = 0usize;
        let mut attempts = 0usize;
        while executed < cfg.trials {
            attempts += 1;
            if attempts > cfg.trials * 3 {
                return Err(Error::State("too many kNN tie skips".into()));
            }
            let cloud = random_cloud(&mut rng, cfg.points);
            let rigid = sample_rigid(&mut rng, 3.0);
            let moved = apply(&rigid, &cloud);
            let out1 = backbone.forward(&cloud, None)?;
            let out2 = backbone.forward(&moved, None)?;
            if out1.graphs != out2.graphs {
                continue;
            }
            executed += 1;
            let e1 = head.equivariant(out1.features(), &out1.frames[0])?;
            let e2 = head.equivariant(out2.features(), &out2.frames[0])?;
            let expected: Vec<f64> = e1
                .value()
                .chunks(3)
                .flat_map(|v| rigid.apply_vector([v[0], v[1], v[2]]))
                .collect();
            worst = worst.max(max_abs(&expected, &e2.value()));

            let p = head.predict_vectors(out1.features())?;
            let pn = p.l2_norm_rows(1e-300)?;
            let en = e1.l2_norm_rows(1e-300)?;
            worst_norm = worst_norm.max(max_abs(&pn.value(), &en.value()));
        }
        Ok(vec![
            CheckResult::below("output_equivariance", executed, worst, cfg.tol),
            CheckResult::below("output_norm_preservation", executed, worst_norm, 1e-12),
        ])
    })
}

/// Whole-model finite-difference check: central differences on a random
/// subsample of parameters against the backward pass, relative error.
pub fn audit_gradients(
    backbone: &Backbone,
    head: &Head,
    cfg: &AuditConfig,
) -> Result<CheckResult> {
    let mut rng = Rng::from_seed(cfg.seed).split(5);
    let n = cfg.points.min(24); // probes are O(samples) full forwards
    let cloud = random_cloud(&mut rng, n);
    let raw_targets = rng.normal_vec(n * 3, 0.0, 1.0);
    let mut t = Vec::with_capacity(n * 3);
    for row in raw_targets.chunks(3) {
        let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt().max(1e-9);
        t.extend(row.iter().map(|v| v / norm));
    }
    let target = Tensor::from_data(&[n, 3], t, false)?;

    let loss = |backbone: &Backbone, head: &Head| -> Result<Tensor> {
        let out = backbone.forward(&cloud, None)?;
        let e = head.equivariant(out.features(), &out.frames[0])?;
        cosine_distance_loss(&e, &target)
    };

    loss(backbone, head)?.backward()?;

    let mut params = backbone.parameters();
    head.collect("head", &mut params);
    let total: usize = params.iter().map(|(_, p)| p.numel()).sum();
    let samples = cfg.grad_samples.min(total);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < samples {
        picked.insert(rng.gen_index(total));
    }

    let h = 1e-5;
    let mut worst = 0.0f64;
    for flat in picked {
        // locate the parameter holding this flat index
        let mut offset = flat;
        let mut which = 0usize;
        while offset >= params[which].1.numel() {
            offset -= params[which].1.numel();
            which += 1;
        }
        let p = &params[which].1;
        let analytic = p.grad().map(|g| g[offset]).unwrap_or(0.0);

        let mut vals = p.value();
        let orig = vals[offset];
        vals[offset] = orig + h;
        p.set_data(&vals)?;
        let fp = no_grad(|| loss(backbone, head))?.item()?;
        vals[offset] = orig - h;
        p.set_data(&vals)?;
        let fm = no_grad(|| loss(backbone, head))?.item()?;
        vals[offset] = orig;
        p.set_data(&vals)?;

        let fd = (fp - fm) / (2.0 * h);
        let rel = (analytic - fd).abs() / f64::max(1e-6, analytic.abs().max(fd.abs()));
        worst = worst.max(rel);
    }
    Ok(CheckResult::below(
        "gradient_check",
        samples,
        worst,
        cfg.grad_tol,
    ))
}

/// Broken variant: frames assembled from the raw network vectors without
/// Gram-Schmidt. Still equivariant, but not orthogonal; the orthogonality
/// audit must catch it.
pub fn audit_mutation_no_orthogonalization(
    net: &OrientationNet,
    cfg: &AuditConfig,
) -> Result<CheckResult> {
    no_grad(|| {
        let mut rng = Rng::from_seed(cfg.seed).split(6);
        let mut worst = 0.0f64;
        for _ in 0..cfg.trials.min(10) {
            let cloud = random_cloud(&mut rng, cfg.points);
            let g = knn(&cloud, cfg.k)?;
            let vectors = net.raw_frame_vectors(&cloud.coords_tensor(), &g)?;
            let n = cloud.len();
            let v1 = vectors.slice(1, 0, 1)?.reshape(&[n, 3])?;
            let v2 = vectors.slice(1, 1, 1)?.reshape(&[n, 3])?;
            let v3 = v1.cross(&v2)?;
            let o = Tensor::concat(
                &[
                    &v1.reshape(&[n, 3, 1])?,
                    &v2.reshape(&[n, 3, 1])?,
                    &v3.reshape(&[n, 3, 1])?,
                ],
                2,
            )?;
            worst = worst.max(OrientationSet::new(o)?.rotation_deviation());
        }
        Ok(CheckResult::above(
            "mutation_no_orthogonalization",
            cfg.trials.min(10),
            worst,
            cfg.mutation_threshold,
        ))
    })
}

/// Broken variant: frames frozen to the identity. The feature invariance
/// audit must catch it.
pub fn audit_mutation_identity_frames(
    backbone: &Backbone,
    cfg: &AuditConfig,
) -> Result<CheckResult> {
    no_grad(|| {
        let mut rng = Rng::from_seed(cfg.seed).split(7);
        let mut worst = 0.0f64;
        let trials = cfg.trials.min(10);
        for _ in 0..trials {
            let cloud = random_cloud(&mut rng, cfg.points);
            let rigid = sample_rigid(&mut rng, 0.0);
            let moved = apply(&rigid, &cloud);
            let n = cloud.len();
            let frames = vec![OrientationSet::identity(n); backbone.cfg.num_orientation_frames];
            let g1 = knn(&cloud, cfg.k)?;
            let g2 = knn(&moved, cfg.k)?;
            let o1 = backbone.forward_with_frames(&cloud, None, frames.clone(), g1)?;
            let o2 = backbone.forward_with_frames(&moved, None, frames, g2)?;
            worst = worst.max(max_abs(&o1.features().value(), &o2.features().value()));
        }
        Ok(CheckResult::above(
            "mutation_identity_frames",
            trials,
            worst,
            cfg.mutation_threshold,
        ))
    })
}

/// Broken variant: the head returns raw in-frame vectors `p_i` without
/// applying the orientations. The output equivariance audit must catch it.
pub fn audit_mutation_raw_vectors(
    backbone: &Backbone,
    head: &Head,
    cfg: &AuditConfig,
) -> Result<CheckResult> {
    no_grad(|| {
        let mut rng = Rng::from_seed(cfg.seed).split(8);
        let mut worst = 0.0f64;
        let trials = cfg.trials.min(10);
        for _ in 0..trials {
            let cloud = random_cloud(&mut rng, cfg.points);
            let rigid = sample_rigid(&mut rng, 0.0);
            let moved = apply(&rigid, &cloud);
            let out1 = backbone.forward(&cloud, None)?;
            let out2 = backbone.forward(&moved, None)?;
            let p1 = head.predict_vectors(out1.features())?;
            let p2 = head.predict_vectors(out2.features())?;
            let expected: Vec<f64> = p1
                .value()
                .chunks(3)
                .flat_map(|v| rigid.apply_vector([v[0], v[1], v[2]]))
                .collect();
            worst = worst.max(max_abs(&expected, &p2.value()));
        }
        Ok(CheckResult::above(
            "mutation_raw_vectors",
            trials,
            worst,
            cfg.mutation_threshold,
        ))
    })
}

/// Backbone used by the audits for a given kind, sized from the config.
pub fn audit_backbone(rng: &mut Rng, kind: BackboneKind, cfg: &AuditConfig) -> Result<Backbone> {
    let mut bc = match kind {
        BackboneKind::Generic => BackboneConfig::generic(vec![16, 16], cfg.k),
        BackboneKind::Dgcnn => BackboneConfig::dgcnn(vec![16, 16], cfg.k),
        BackboneKind::Rscnn => BackboneConfig::rscnn(vec![16, 16], cfg.k),
    };
    bc.orientation = cfg.orientation.clone();
    Backbone::init(rng, bc)
}

/// The full audit suite: propositions, orthogonality, gradients and the
/// three mutation checks.
pub fn run_all(cfg: &AuditConfig) -> Result<AuditReport> {
    let mut rng = Rng::from_seed(cfg.seed).split(100);
    let net = OrientationNet::init(&mut rng, &cfg.orientation, 1)?;
    let mut checks = Vec::new();

    checks.push(audit_orientation_equivariance(&net, cfg)?);
    checks.extend(audit_orthogonality(&net, cfg, 10_000)?);

    for kind in [BackboneKind::Generic, BackboneKind::Dgcnn, BackboneKind::Rscnn] {
        let backbone = audit_backbone(&mut rng, kind, cfg)?;
        let name = match kind {
            BackboneKind::Generic => "feature_invariance_generic",
            BackboneKind::Dgcnn => "feature_invariance_dgcnn",
            BackboneKind::Rscnn => "feature_invariance_rscnn",
        };
        checks.push(audit_feature_invariance(&backbone, cfg, name)?);
    }

    let backbone = audit_backbone(&mut rng, BackboneKind::Dgcnn, cfg)?;
    let head = Head::init(&mut rng, backbone.out_dim(), 16, 3)?;
    checks.extend(audit_output_equivariance(&backbone, &head, cfg)?);

    // gradient audit on a static-graph variant: a dynamic feature graph can
    // flip neighbors under parameter perturbation, which makes the loss
    // itself discontinuous and finite differences meaningless
    let mut grad_cfg_backbone = audit_backbone(&mut rng, BackboneKind::Dgcnn, cfg)?;
    grad_cfg_backbone.cfg.feature_knn = false;
    let grad_head = Head::init(&mut rng, grad_cfg_backbone.out_dim(), 16, 3)?;
    checks.push(audit_gradients(&grad_cfg_backbone, &grad_head, cfg)?);

    checks.push(audit_mutation_no_orthogonalization(&net, cfg)?);
    let mut_backbone = audit_backbone(&mut rng, BackboneKind::Generic, cfg)?;
    checks.push(audit_mutation_identity_frames(&mut_backbone, cfg)?);
    checks.push(audit_mutation_raw_vectors(&backbone, &head, cfg)?);

    Ok(AuditReport::from_checks(checks))
}
