//! Geometric vector perceptrons and the vector graph convolution used for
//! orientation learning.
//!
//! A GVP maps a (scalars, vectors) feature pair to another pair. The vector
//! path is built purely from channel mixing, row norms and norm-derived
//! gates, so rotating every input vector rotates every output vector by the
//! same matrix while the scalar path is unchanged.

use crate::error::{Error, Result};
use crate::geometry::{KnnGraph, NORM_EPS};
use crate::nn::{xavier, Affine, NamedParams, Params};
use crate::rng::Rng;
use crate::tensor::{IndexMatrix, Tensor};

/// Per-point scalar features `[N, d]` paired with vector features `[N, m, 3]`.
#[derive(Clone, Debug)]
pub struct FeaturePair {
    pub scalars: Tensor,
    pub vectors: Tensor,
}

impl FeaturePair {
    pub fn zeros(n: usize, d: usize, m: usize) -> FeaturePair {
        FeaturePair {
            scalars: Tensor::zeros(&[n, d]),
            vectors: Tensor::zeros(&[n, m, 3]),
        }
    }

    pub fn len(&self) -> usize {
        self.scalars.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mixes vector channels: `v [.., m, 3] x w [m, c] -> [.., c, 3]`.
/// A pure linear combination of vectors, hence exactly equivariant.
fn channel_mix(v: &Tensor, w: &Tensor) -> Result<Tensor> {
    v.transpose_last2()?.matmul(w)?.transpose_last2()
}

/// Geometric vector perceptron: `(s, V) -> (s', V')` with
/// `s' = relu(W_s [s ; |V W_h|_rows])` and `V' = sigmoid(gate(s')) ⊙ (V W_h) W_mu`.
pub struct Gvp {
    pub d_in: usize,
    pub m_in: usize,
    pub d_out: usize,
    pub m_out: usize,
    hidden: usize,
    w_h: Tensor,
    w_mu: Tensor,
    w_s: Affine,
    gate: Affine,
}

impl Gvp {
    pub fn init(rng: &mut Rng, d_in: usize, m_in: usize, d_out: usize, m_out: usize) -> Result<Gvp> {
        if m_in == 0 || m_out == 0 {
            return Err(Error::config(
                "gvp requires at least one vector channel on both sides",
            ));
        }
        let hidden = m_in.max(m_out);
        Ok(Gvp {
            d_in,
            m_in,
            d_out,
            m_out,
            hidden,
            w_h: xavier(rng, m_in, hidden),
            w_mu: xavier(rng, hidden, m_out),
            w_s: Affine::init(rng, d_in + hidden, d_out, true),
            gate: Affine::init(rng, d_out, m_out, true),
        })
    }

    /// Accepts any leading batch dims: `s [.., d_in]`, `v [.., m_in, 3]`.
    pub fn forward(&self, s: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let srank = s.rank();
        let vrank = v.rank();
        if srank < 1 || *s.shape().last().unwrap() != self.d_in {
            return Err(Error::shape(format!(
                "gvp scalar input {:?} does not end in d_in={}",
                s.shape(),
                self.d_in
            )));
        }
        if vrank < 2 || v.shape()[vrank - 2] != self.m_in || v.shape()[vrank - 1] != 3 {
            return Err(Error::shape(format!(
                "gvp vector input {:?} does not end in [m_in={}, 3]",
                v.shape(),
                self.m_in
            )));
        }

        let v_h = channel_mix(v, &self.w_h)?;
        let norms = v_h.l2_norm_rows(NORM_EPS)?;
        let s_cat = Tensor::concat(&[s, &norms], srank - 1)?;
        let s_out = self.w_s.forward(&s_cat)?.relu();

        let v_mu = channel_mix(&v_h, &self.w_mu)?;
        let gate = self.gate.forward(&s_out)?.sigmoid();
        let mut gshape = gate.shape().to_vec();
        gshape.push(1);
        let v_out = v_mu.mul(&gate.reshape(&gshape)?)?;
        Ok((s_out, v_out))
    }
}

impl Params for Gvp {
    fn collect(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.wh"), self.w_h.clone()));
        out.push((format!("{prefix}.wmu"), self.w_mu.clone()));
        self.w_s.collect(&format!("{prefix}.ws"), out);
        self.gate.collect(&format!("{prefix}.gate"), out);
    }
}

/// One vector graph convolution layer. Messages combine the receiving
/// point's features with the edge distance and edge offset
/// `x_i - x_j`; mean aggregation plus residual, then a residual GVP
/// feed-forward. When the layer changes channel counts the feed-forward
/// residual is skipped (a residual across differing widths is undefined).
pub struct VGConvLayer {
    pub d_in: usize,
    pub m_in: usize,
    pub d_out: usize,
    pub m_out: usize,
    msg: Gvp,
    ff: Gvp,
}

impl VGConvLayer {
    pub fn init(rng: &mut Rng, d_in: usize, m_in: usize, d_out: usize, m_out: usize) -> Result<Self> {
        Ok(VGConvLayer {
            d_in,
            m_in,
            d_out,
            m_out,
            msg: Gvp::init(rng, d_in + 1, m_in + 1, d_in, m_in)?,
            ff: Gvp::init(rng, d_in, m_in, d_out, m_out)?,
        })
    }

    /// General form: receivers at `recv_xyz [M,3]` with features `recv`,
    /// aggregating from source points `src_xyz [P,3]` along `idx [M,k]`.
    /// The flat network passes the same cloud for both sides.
    pub fn forward(
        &self,
        recv_xyz: &Tensor,
        recv: &FeaturePair,
        src_xyz: &Tensor,
        idx: &IndexMatrix,
    ) -> Result<FeaturePair> {
        let m_pts = recv_xyz.shape()[0];
        let k = idx.cols;
        if recv.scalars.shape() != [m_pts, self.d_in] {
            return Err(Error::shape(format!(
                "layer expects scalars [{}, {}], got {:?}",
                m_pts,
                self.d_in,
                recv.scalars.shape()
            )));
        }
        if recv.vectors.shape() != [m_pts, self.m_in, 3] {
            return Err(Error::shape(format!(
                "layer expects vectors [{}, {}, 3], got {:?}",
                m_pts,
                self.m_in,
                recv.vectors.shape()
            )));
        }

        let self_idx = IndexMatrix::self_rows(m_pts, k);
        let xj = src_xyz.gather_rows(idx)?;
        let xi = recv_xyz.gather_rows(&self_idx)?;
        let edge = xi.sub(&xj)?; // x_i - x_j
        let dist = edge.l2_norm_rows(NORM_EPS)?.reshape(&[m_pts, k, 1])?;
        let edge_v = edge.reshape(&[m_pts, k, 1, 3])?;

        let hi = recv.scalars.gather_rows(&self_idx)?;
        let vi = recv
            .vectors
            .reshape(&[m_pts, self.m_in * 3])?
            .gather_rows(&self_idx)?
            .reshape(&[m_pts, k, self.m_in, 3])?;

        let s_in = Tensor::concat(&[&hi, &dist], 2)?;
        let v_in = Tensor::concat(&[&vi, &edge_v], 2)?;
        let (ms, mv) = self.msg.forward(&s_in, &v_in)?;

        let h_mid = recv.scalars.add(&ms.mean_axis(1)?)?;
        let v_mid = recv.vectors.add(&mv.mean_axis(1)?)?;

        let (fs, fv) = self.ff.forward(&h_mid, &v_mid)?;
        if self.d_out == self.d_in && self.m_out == self.m_in {
            Ok(FeaturePair {
                scalars: h_mid.add(&fs)?,
                vectors: v_mid.add(&fv)?,
            })
        } else {
            Ok(FeaturePair {
                scalars: fs,
                vectors: fv,
            })
        }
    }
}

impl Params for VGConvLayer {
    fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.msg.collect(&format!("{prefix}.msg"), out);
        self.ff.collect(&format!("{prefix}.ff"), out);
    }
}

/// A stack of V-GConv layers run from all-zero initial features.
pub struct VGConvStack {
    pub layers: Vec<VGConvLayer>,
}

impl VGConvStack {
    /// `depth` layers at hidden widths `(d_s, m_v)`; the last layer projects
    /// the vector channels to `final_vector_channels`.
    pub fn init(
        rng: &mut Rng,
        d_s: usize,
        m_v: usize,
        depth: usize,
        final_vector_channels: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("v-gconv stack needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let m_out = if l + 1 == depth { final_vector_channels } else { m_v };
            layers.push(VGConvLayer::init(rng, d_s, m_v, d_s, m_out)?);
        }
        VGConvStack::new(layers)
    }

    pub fn new(layers: Vec<VGConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("v-gconv stack needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].d_out != w[1].d_in || w[0].m_out != w[1].m_in {
                return Err(Error::config(format!(
                    "v-gconv layers do not chain: ({}, {}) -> ({}, {})",
                    w[0].d_out, w[0].m_out, w[1].d_in, w[1].m_in
                )));
            }
        }
        Ok(VGConvStack { layers })
    }

    pub fn output_vector_channels(&self) -> usize {
        self.layers.last().expect("nonempty").m_out
    }

    /// Runs the stack over one cloud with zero initial features.
    pub fn forward_flat(&self, coords: &Tensor, g: &KnnGraph) -> Result<FeaturePair> {
        let n = coords.shape()[0];
        let first = &self.layers[0];
        let mut f = FeaturePair::zeros(n, first.d_in, first.m_in);
        for layer in &self.layers {
            f = layer.forward(coords, &f, coords, &g.idx)?;
        }
        Ok(f)
    }
}

impl Params for VGConvStack {
    fn collect(&self, prefix: &str, out: &mut NamedParams) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("{prefix}.vg{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests;
