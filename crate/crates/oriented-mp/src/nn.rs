//! Affine layers, MLPs and parameter bookkeeping shared by the networks.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Named trainable tensors, in deterministic construction order.
pub type NamedParams = Vec<(String, Tensor)>;

pub trait Params {
    fn collect(&self, prefix: &str, out: &mut NamedParams);

    fn parameters(&self) -> NamedParams {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }
}

/// Xavier-uniform weight matrix: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
/// Keeps early activations O(1) so sigmoid gates start unsaturated.
pub fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_data(
        &[fan_in, fan_out],
        rng.uniform_vec(fan_in * fan_out, -a, a),
        true,
    )
    .expect("consistent size")
    .requiring_grad()
}

/// `y = x W (+ b)`; the bias is optional because bias vectors on equivariant
/// vector paths would break rotation equivariance.
pub struct Affine {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Affine {
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize, bias: bool) -> Affine {
        Affine {
            weight: xavier(rng, d_in, d_out),
            bias: bias.then(|| Tensor::zeros(&[d_out]).requiring_grad()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl Params for Affine {
    fn collect(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.w"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.b"), b.clone()));
        }
    }
}

/// Dense multilayer perceptron with relu between layers and linear output.
pub struct Mlp {
    pub layers: Vec<Affine>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`, at least two entries.
    pub fn init(rng: &mut Rng, dims: &[usize]) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::config(format!(
                "mlp needs at least input and output dims, got {:?}",
                dims
            )));
        }
        Ok(Mlp {
            layers: dims
                .windows(2)
                .map(|w| Affine::init(rng, w[0], w[1], true))
                .collect(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("nonempty").in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

impl Params for Mlp {
    fn collect(&self, prefix: &str, out: &mut NamedParams) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("{prefix}.l{i}"), out);
        }
    }
}
