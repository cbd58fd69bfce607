//! Prediction heads on top of invariant features.
//!
//! Invariant heads are plain MLPs (optionally after pooling); they inherit
//! invariance from the features. The equivariant head predicts a vector in
//! each point's own frame and rotates it out with the learned orientation,
//! `e_i = O_i p_i`, which is what makes normals and displacements transform
//! correctly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::OrientationSet;
use crate::nn::{Mlp, NamedParams, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    /// Column means accumulated in sorted value order, which makes global
    /// readouts bitwise invariant to point permutations.
    Mean,
    Max,
}

/// affine - relu - affine readout.
pub struct Head {
    mlp: Mlp,
}

impl Head {
    pub fn init(rng: &mut Rng, d_in: usize, hidden: usize, d_out: usize) -> Result<Head> {
        Ok(Head {
            mlp: Mlp::init(rng, &[d_in, hidden, d_out])?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Per-point values or logits `[N, c]`; rows permute with the points.
    pub fn invariant_pointwise(&self, h: &Tensor) -> Result<Tensor> {
        self.mlp.forward(h)
    }

    /// Pool over points, then read out: a `[c]` vector invariant to rigid
    /// motion (through the features) and to permutation (through the pool).
    pub fn invariant_global(&self, h: &Tensor, pool: Pool) -> Result<Tensor> {
        if h.shape()[0] == 0 {
            return Err(Error::argument("cannot pool an empty cloud"));
        }
        let pooled = match pool {
            Pool::Mean => h.mean_rows_sorted()?,
            Pool::Max => h.max_axis(0)?,
        };
        self.mlp.forward(&pooled)
    }

    /// The in-frame vector predictions `p_i = MLP(h_i)`, before applying
    /// orientations. Exposed separately so audits can check norm
    /// preservation and demonstrate the broken raw-output variant.
    pub fn predict_vectors(&self, h: &Tensor) -> Result<Tensor> {
        if self.mlp.out_dim() != 3 {
            return Err(Error::config(format!(
                "equivariant head must output 3 channels, has {}",
                self.mlp.out_dim()
            )));
        }
        self.mlp.forward(h)
    }

    /// `e_i = O_i p_i`: rotation-equivariant, translation-invariant vectors.
    pub fn equivariant(&self, h: &Tensor, frames: &OrientationSet) -> Result<Tensor> {
        frames.rotate(&self.predict_vectors(h)?)
    }
}

impl Params for Head {
    fn collect(&self, prefix: &str, out: &mut NamedParams) {
        self.mlp.collect(&format!("{prefix}.head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::geometry::{apply, knn, sample_rigid};
    use crate::orientation::OrientationConfig;
    use crate::test_util::{max_abs_diff, random_cloud, rotate_last3};

    fn small_backbone(seed: u64) -> Backbone {
        let mut cfg = BackboneConfig::generic(vec![8, 8], 5);
        cfg.orientation = OrientationConfig {
            layers: 2,
            scalar_channels: 8,
            vector_channels: 4,
        };
        Backbone::init(&mut Rng::from_seed(seed), cfg).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut rng = Rng::from_seed(1);
        let head = Head::init(&mut rng, 4, 8, 3).unwrap();
        for (_, p) in head.parameters() {
            p.set_data(&vec![0.0; p.numel()]).unwrap();
        }
        let h = Tensor::from_data(&[5, 4], rng.uniform_vec(20, -1.0, 1.0), false).unwrap();
        assert!(head.invariant_pointwise(&h).unwrap().value().iter().all(|v| *v == 0.0));
        assert!(head
            .invariant_global(&h, Pool::Mean)
            .unwrap()
            .value()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn pointwise_rows_permute_with_points() {
        let mut rng = Rng::from_seed(2);
        let head = Head::init(&mut rng, 3, 6, 2).unwrap();
        let vals = rng.uniform_vec(4 * 3, -1.0, 1.0);
        let h = Tensor::from_data(&[4, 3], vals.clone(), false).unwrap();
        let out = head.invariant_pointwise(&h).unwrap().value();

        let perm = [2usize, 0, 3, 1];
        let mut pvals = vec![0.0; 12];
        for (new, &old) in perm.iter().enumerate() {
            pvals[new * 3..new * 3 + 3].copy_from_slice(&vals[old * 3..old * 3 + 3]);
        }
        let hp = Tensor::from_data(&[4, 3], pvals, false).unwrap();
        let out_p = head.invariant_pointwise(&hp).unwrap().value();
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..2 {
                assert_eq!(out_p[new * 2 + c].to_bits(), out[old * 2 + c].to_bits());
            }
        }
    }

    #[test]
    fn global_mean_pool_is_bitwise_permutation_invariant() {
        let mut rng = Rng::from_seed(3);
        let head = Head::init(&mut rng, 3, 6, 2).unwrap();
        let vals = rng.uniform_vec(6 * 3, -1.0, 1.0);
        let h = Tensor::from_data(&[6, 3], vals.clone(), false).unwrap();
        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let mut pvals = vec![0.0; 18];
        for (new, &old) in perm.iter().enumerate() {
            pvals[new * 3..new * 3 + 3].copy_from_slice(&vals[old * 3..old * 3 + 3]);
        }
        let hp = Tensor::from_data(&[6, 3], pvals, false).unwrap();
        for pool in [Pool::Mean, Pool::Max] {
            let a = head.invariant_global(&h, pool).unwrap().value();
            let b = head.invariant_global(&hp, pool).unwrap().value();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn single_point_pooling_is_identity_on_the_row() {
        let mut rng = Rng::from_seed(4);
        let head = Head::init(&mut rng, 3, 6, 2).unwrap();
        let h = Tensor::from_data(&[1, 3], vec![0.5, -1.0, 2.0], false).unwrap();
        let pooled = head.invariant_global(&h, Pool::Mean).unwrap();
        let pointwise = head.invariant_pointwise(&h).unwrap();
        assert!(max_abs_diff(&pooled.reshape(&[1, 2]).unwrap(), &pointwise) < 1e-15);
    }

    #[test]
    fn equivariant_identity_case_and_norm_preservation() {
        let mut rng = Rng::from_seed(5);
        let head = Head::init(&mut rng, 4, 8, 3).unwrap();
        let h = Tensor::from_data(&[6, 4], rng.uniform_vec(24, -1.0, 1.0), false).unwrap();
        let p = head.predict_vectors(&h).unwrap();
        let e_id = head.equivariant(&h, &OrientationSet::identity(6)).unwrap();
        assert!(max_abs_diff(&p, &e_id) < 1e-15);

        // |O p| = |p| for learned (orthonormal) frames
        let v1 = Tensor::from_data(&[6, 3], rng.uniform_vec(18, -1.0, 1.0), false).unwrap();
        let v2 = Tensor::from_data(&[6, 3], rng.uniform_vec(18, -1.0, 1.0), false).unwrap();
        let frames = crate::geometry::gram_schmidt(&v1, &v2).unwrap();
        let e = head.equivariant(&h, &frames).unwrap();
        let np = p.l2_norm_rows(1e-300).unwrap();
        let ne = e.l2_norm_rows(1e-300).unwrap();
        assert!(max_abs_diff(&np, &ne) < 1e-12);
    }

    #[test]
    fn heads_compose_equivariantly_with_the_backbone() {
        let backbone = small_backbone(6);
        let mut rng = Rng::from_seed(60);
        let head = Head::init(&mut rng, 8, 8, 3).unwrap();
        let ghead = Head::init(&mut rng, 8, 8, 4).unwrap();
        for _ in 0..6 {
            let cloud = random_cloud(&mut rng, 16);
            let rigid = sample_rigid(&mut rng, 2.0);
            let moved = apply(&rigid, &cloud);
            let g1 = knn(&cloud, 5).unwrap();
            let g2 = knn(&moved, 5).unwrap();
            if g1.idx != g2.idx {
                continue;
            }

            let out1 = backbone.forward(&cloud, None).unwrap();
            let out2 = backbone.forward(&moved, None).unwrap();

            // equivariant head: e(RX + t) = R e(X)
            let e1 = head.equivariant(out1.features(), &out1.frames[0]).unwrap();
            let e2 = head.equivariant(out2.features(), &out2.frames[0]).unwrap();
            assert!(max_abs_diff(&rotate_last3(&e1, &rigid), &e2) < 1e-8);

            // invariant global head: logits unchanged
            let l1 = ghead.invariant_global(out1.features(), Pool::Mean).unwrap();
            let l2 = ghead.invariant_global(out2.features(), Pool::Mean).unwrap();
            assert!(max_abs_diff(&l1, &l2) < 1e-8);
        }
    }

    #[test]
    fn empty_cloud_pooling_is_an_argument_error() {
        let mut rng = Rng::from_seed(7);
        let head = Head::init(&mut rng, 3, 4, 2).unwrap();
        let h = Tensor::zeros(&[0, 3]);
        assert!(matches!(
            head.invariant_global(&h, Pool::Mean).unwrap_err(),
            Error::Argument(_)
        ));
    }
}
