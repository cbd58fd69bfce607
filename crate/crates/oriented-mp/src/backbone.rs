//! Oriented message passing backbones.
//!
//! Every layer here consumes neighbor offsets only after projecting them
//! into the receiving point's learned frame, `O_iᵀ(x_j - x_i)`. The
//! projected offsets are invariant to rigid motion of the whole cloud, so
//! the per-point features stay invariant no matter how flexible the message
//! network is. Three flavors are provided: the generic scheme, and oriented
//! adaptations of RS-CNN (relation gating, max pooled) and DGCNN (edge conv
//! with a dynamic feature-space graph).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{knn, knn_features, KnnGraph, OrientationSet, PointCloud};
use crate::nn::{xavier, Mlp, NamedParams, Params};
use crate::orientation::{
    default_level_sizes, GlobalOrientationNet, OrientationConfig, OrientationNet,
};
use crate::rng::Rng;
use crate::tensor::{IndexMatrix, ReduceKind, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Generic,
    Dgcnn,
    Rscnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agg {
    Max,
    Mean,
    Sum,
}

impl Agg {
    fn reduce(self, t: &Tensor, axis: usize) -> Result<Tensor> {
        match self {
            Agg::Max => t.reduce(ReduceKind::Max, axis),
            Agg::Mean => t.reduce(ReduceKind::Mean, axis),
            Agg::Sum => t.reduce(ReduceKind::Sum, axis),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Output width of each message passing layer.
    pub layers: Vec<usize>,
    pub k: usize,
    /// Aggregation over neighbors; defaults to max for DGCNN/RS-CNN and
    /// mean for the generic scheme.
    pub agg: Agg,
    pub num_orientation_frames: usize,
    /// Feed `O_globᵀ(x_i - x̄)` as invariant per-point coordinates.
    pub use_global_coords: bool,
    /// Rebuild the neighbor graph in feature space for DGCNN layers > 1.
    pub feature_knn: bool,
    pub orientation: OrientationConfig,
    /// Width of caller-supplied invariant per-point features (0 = none).
    #[serde(default)]
    pub extra_input_dim: usize,
    /// Override for the global-orientation hierarchy sizes.
    #[serde(default)]
    pub level_sizes: Option<Vec<usize>>,
}

impl BackboneConfig {
    pub fn generic(layers: Vec<usize>, k: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::Generic,
            layers,
            k,
            agg: Agg::Mean,
            num_orientation_frames: 1,
            use_global_coords: false,
            feature_knn: false,
            orientation: OrientationConfig::default(),
            extra_input_dim: 0,
            level_sizes: None,
        }
    }

    pub fn dgcnn(layers: Vec<usize>, k: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::Dgcnn,
            agg: Agg::Max,
            feature_knn: true,
            ..BackboneConfig::generic(layers, k)
        }
    }

    pub fn rscnn(layers: Vec<usize>, k: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::Rscnn,
            agg: Agg::Max,
            ..BackboneConfig::generic(layers, k)
        }
    }

    /// Width of the initial per-point features `h^0`.
    pub fn input_dim(&self) -> usize {
        let base = if self.use_global_coords { 3 } else { 1 };
        base + self.extra_input_dim
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("backbone needs at least one layer"));
        }
        if self.num_orientation_frames == 0 {
            return Err(Error::config("num_orientation_frames must be >= 1"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        Ok(())
    }
}

/// Projects neighbor offsets `r [N,k,3]` with every frame set and
/// concatenates along the last axis: `[N, k, 3F]`.
pub fn project_multi(frames: &[OrientationSet], r: &Tensor) -> Result<Tensor> {
    if frames.is_empty() {
        return Err(Error::config("at least one orientation frame is required"));
    }
    let mut parts = Vec::with_capacity(frames.len());
    for f in frames {
        parts.push(f.project(r)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat(&refs, r.rank() - 1)
}

fn neighbor_offsets(coords: &Tensor, g: &KnnGraph) -> Result<Tensor> {
    let n = coords.shape()[0];
    let xj = coords.gather_rows(&g.idx)?;
    let xi = coords.gather_rows(&IndexMatrix::self_rows(n, g.idx.cols))?;
    xj.sub(&xi) // r_ij = x_j - x_i
}

fn broadcast_rows(t: &Tensor, k: usize) -> Result<Tensor> {
    let n = t.shape()[0];
    t.gather_rows(&IndexMatrix::self_rows(n, k))
}

/// Generic oriented message passing:
/// `h'_i = Agg_j H(h_i, h_j, O_iᵀ(x_j - x_i))`.
pub fn oriented_mp_layer(
    h_net: &Mlp,
    agg: Agg,
    h: &Tensor,
    coords: &Tensor,
    g: &KnnGraph,
    frames: &[OrientationSet],
) -> Result<Tensor> {
    let k = g.idx.cols;
    let proj = project_multi(frames, &neighbor_offsets(coords, g)?)?;
    let hi = broadcast_rows(h, k)?;
    let hj = h.gather_rows(&g.idx)?;
    let msg = h_net.forward(&Tensor::concat(&[&hi, &hj, &proj], 2)?)?;
    agg.reduce(&msg, 1)
}

/// Oriented RS-CNN layer:
/// `h'_i = Agg_j ( M(|O_iᵀr_ij|, O_iᵀr_ij) ⊙ W h_j )`.
/// The norm argument is kept although it equals `|r_ij|` for any orthogonal
/// frame. `W` is a bias-free channel lift so zero neighbor features still
/// map to a zero output.
pub fn rscnn_layer(
    m_net: &Mlp,
    lift: &Tensor,
    agg: Agg,
    h: &Tensor,
    coords: &Tensor,
    g: &KnnGraph,
    frames: &[OrientationSet],
) -> Result<Tensor> {
    let n = coords.shape()[0];
    let k = g.idx.cols;
    let r = neighbor_offsets(coords, g)?;
    let proj = project_multi(frames, &r)?;
    let first = frames[0].project(&r)?;
    let norm = first
        .l2_norm_rows(crate::geometry::NORM_EPS)?
        .reshape(&[n, k, 1])?;
    let gate = m_net.forward(&Tensor::concat(&[&norm, &proj], 2)?)?;
    let lifted = h.gather_rows(&g.idx)?.matmul(lift)?;
    agg.reduce(&gate.mul(&lifted)?, 1)
}

/// Oriented DGCNN first layer:
/// `h^1_i = Agg_j relu(M0(O_iᵀ(x_j - x_i) [, invariant point features]))`.
pub fn dgcnn_first_layer(
    m0_net: &Mlp,
    agg: Agg,
    coords: &Tensor,
    g: &KnnGraph,
    frames: &[OrientationSet],
    point_feats: Option<&Tensor>,
) -> Result<Tensor> {
    let k = g.idx.cols;
    let proj = project_multi(frames, &neighbor_offsets(coords, g)?)?;
    let input = match point_feats {
        Some(f) => Tensor::concat(&[&proj, &broadcast_rows(f, k)?], 2)?,
        None => proj,
    };
    agg.reduce(&m0_net.forward(&input)?.relu(), 1)
}

/// DGCNN feature-space layer on a caller-supplied graph:
/// `h'_i = Agg_j relu(M(h_j - h_i, h_i))`.
pub fn dgcnn_feature_layer_on(
    m_net: &Mlp,
    agg: Agg,
    h: &Tensor,
    g: &KnnGraph,
) -> Result<Tensor> {
    let k = g.idx.cols;
    let hi = broadcast_rows(h, k)?;
    let hj = h.gather_rows(&g.idx)?;
    let diff = hj.sub(&hi)?;
    agg.reduce(&m_net.forward(&Tensor::concat(&[&diff, &hi], 2)?)?.relu(), 1)
}

/// DGCNN feature-space layer with its dynamic graph built from the current
/// feature values (graph construction is outside the autodiff graph).
/// Returns the graph so audits can guard against neighbor ties.
pub fn dgcnn_feature_layer(
    m_net: &Mlp,
    agg: Agg,
    h: &Tensor,
    k: usize,
) -> Result<(Tensor, KnnGraph)> {
    let shape = h.shape();
    let g = knn_features(&h.data(), shape[0], shape[1], k.min(shape[0] - 1))?;
    Ok((dgcnn_feature_layer_on(m_net, agg, h, &g)?, g))
}

enum LayerNet {
    Generic { h: Mlp },
    Rscnn { m: Mlp, lift: Tensor },
    DgcnnFirst { m0: Mlp },
    DgcnnFeature { m: Mlp },
}

impl Params for LayerNet {
    fn collect(&self, prefix: &str, out: &mut NamedParams) {
        match self {
            LayerNet::Generic { h } => h.collect(&format!("{prefix}.h"), out),
            LayerNet::Rscnn { m, lift } => {
                m.collect(&format!("{prefix}.m"), out);
                out.push((format!("{prefix}.lift"), lift.clone()));
            }
            LayerNet::DgcnnFirst { m0 } => m0.collect(&format!("{prefix}.m0"), out),
            LayerNet::DgcnnFeature { m } => m.collect(&format!("{prefix}.m"), out),
        }
    }
}

/// Everything a forward pass produced, including each layer boundary (for
/// the invariance audits) and the neighbor graphs that were used (for kNN
/// tie guards).
pub struct BackboneOutput {
    pub per_layer: Vec<Tensor>,
    pub frames: Vec<OrientationSet>,
    pub global_frame: Option<Tensor>,
    pub centroid: Option<Tensor>,
    pub graphs: Vec<IndexMatrix>,
}

impl BackboneOutput {
    pub fn features(&self) -> &Tensor {
        self.per_layer.last().expect("at least h^0")
    }
}

/// Orientation learner plus the configured message passing stack.
pub struct Backbone {
    pub cfg: BackboneConfig,
    orientation: OrientationNet,
    global: Option<GlobalOrientationNet>,
    layers: Vec<LayerNet>,
}

impl Backbone {
    pub fn init(rng: &mut Rng, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let f3 = 3 * cfg.num_orientation_frames;
        let orientation = OrientationNet::init(rng, &cfg.orientation, cfg.num_orientation_frames)?;
        let global = cfg
            .use_global_coords
            .then(|| GlobalOrientationNet::init(rng, &cfg.orientation, 2, cfg.k))
            .transpose()?;

        let mut layers = Vec::with_capacity(cfg.layers.len());
        let mut d_prev = cfg.input_dim();
        for (l, &w) in cfg.layers.iter().enumerate() {
            let net = match cfg.kind {
                BackboneKind::Generic => LayerNet::Generic {
                    h: Mlp::init(rng, &[2 * d_prev + f3, w, w])?,
                },
                BackboneKind::Rscnn => LayerNet::Rscnn {
                    m: Mlp::init(rng, &[1 + f3, w, w])?,
                    lift: xavier(rng, d_prev, w),
                },
                BackboneKind::Dgcnn if l == 0 => {
                    // sees projected offsets, plus h^0 when it carries
                    // information beyond the constant base column
                    let pf = if cfg.input_dim() > 1 { cfg.input_dim() } else { 0 };
                    LayerNet::DgcnnFirst {
                        m0: Mlp::init(rng, &[f3 + pf, w, w])?,
                    }
                }
                BackboneKind::Dgcnn => LayerNet::DgcnnFeature {
                    m: Mlp::init(rng, &[2 * d_prev, w, w])?,
                },
            };
            layers.push(net);
            d_prev = w;
        }
        Ok(Backbone {
            cfg,
            orientation,
            global,
            layers,
        })
    }

    pub fn out_dim(&self) -> usize {
        *self.cfg.layers.last().expect("validated nonempty")
    }

    pub fn orientation_net(&self) -> &OrientationNet {
        &self.orientation
    }

    /// Learns frames, then runs the layer stack.
    pub fn forward(&self, cloud: &PointCloud, extra: Option<&Tensor>) -> Result<BackboneOutput> {
        let n = cloud.len();
        let k_eff = self.cfg.k.min(n.saturating_sub(1));
        let g = knn(cloud, k_eff)?;
        let frames = self.orientation.learn(&cloud.coords_tensor(), &g)?;
        self.forward_with_frames(cloud, extra, frames, g)
    }

    /// Runs the layer stack with caller-supplied frames. The verification
    /// harness uses this to demonstrate that frozen identity frames break
    /// invariance.
    pub fn forward_with_frames(
        &self,
        cloud: &PointCloud,
        extra: Option<&Tensor>,
        frames: Vec<OrientationSet>,
        g: KnnGraph,
    ) -> Result<BackboneOutput> {
        let n = cloud.len();
        if frames.len() != self.cfg.num_orientation_frames {
            return Err(Error::config(format!(
                "expected {} orientation frame sets, got {}",
                self.cfg.num_orientation_frames,
                frames.len()
            )));
        }
        match extra {
            Some(e) if e.shape() != [n, self.cfg.extra_input_dim] => {
                return Err(Error::shape(format!(
                    "extra features must be [{}, {}], got {:?}",
                    n,
                    self.cfg.extra_input_dim,
                    e.shape()
                )));
            }
            None if self.cfg.extra_input_dim != 0 => {
                return Err(Error::config(format!(
                    "backbone configured with extra_input_dim {} but no features supplied",
                    self.cfg.extra_input_dim
                )));
            }
            _ => {}
        }
        let coords = cloud.coords_tensor();

        let (global_frame, centroid) = match &self.global {
            Some(net) => {
                let sizes = match &self.cfg.level_sizes {
                    Some(s) => s.clone(),
                    None => default_level_sizes(n),
                };
                let (o, xbar) = net.forward(cloud, &sizes)?;
                (Some(o), Some(xbar))
            }
            None => (None, None),
        };

        // initial invariant features
        let base = if let (Some(o), Some(xbar)) = (&global_frame, &centroid) {
            coords.sub(xbar)?.matmul(o)? // O_globᵀ(x_i - x̄), row form
        } else {
            match self.cfg.kind {
                BackboneKind::Rscnn => Tensor::ones(&[n, 1]),
                _ => Tensor::zeros(&[n, 1]),
            }
        };
        let h0 = match extra {
            Some(e) => Tensor::concat(&[&base, e], 1)?,
            None => base,
        };

        let mut per_layer = vec![h0.clone()];
        let mut graphs = vec![g.idx.clone()];
        let mut h = h0;
        for net in &self.layers {
            h = match net {
                LayerNet::Generic { h: h_net } => {
                    oriented_mp_layer(h_net, self.cfg.agg, &h, &coords, &g, &frames)?
                }
                LayerNet::Rscnn { m, lift } => {
                    rscnn_layer(m, lift, self.cfg.agg, &h, &coords, &g, &frames)?
                }
                LayerNet::DgcnnFirst { m0 } => {
                    let feats = (self.cfg.input_dim() > 1).then_some(&per_layer[0]);
                    dgcnn_first_layer(m0, self.cfg.agg, &coords, &g, &frames, feats)?
                }
                LayerNet::DgcnnFeature { m } => {
                    if self.cfg.feature_knn {
                        let (out, fg) = dgcnn_feature_layer(m, self.cfg.agg, &h, self.cfg.k)?;
                        graphs.push(fg.idx.clone());
                        out
                    } else {
                        dgcnn_feature_layer_on(m, self.cfg.agg, &h, &g)?
                    }
                }
            };
            per_layer.push(h.clone());
        }

        Ok(BackboneOutput {
            per_layer,
            frames,
            global_frame,
            centroid,
            graphs,
        })
    }
}

impl Params for Backbone {
    fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.orientation.collect(prefix, out);
        if let Some(g) = &self.global {
            g.collect(prefix, out);
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.mp{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests;
