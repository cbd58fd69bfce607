//! Helpers shared by unit tests: random clouds, rotated tensors, deviations.

use crate::geometry::{PointCloud, RigidTransform};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Standard-normal cloud of `n` points.
pub(crate) fn random_cloud(rng: &mut Rng, n: usize) -> PointCloud {
    PointCloud::from_points(
        (0..n)
            .map(|_| {
                [
                    rng.normal(0.0, 1.0),
                    rng.normal(0.0, 1.0),
                    rng.normal(0.0, 1.0),
                ]
            })
            .collect(),
    )
}

/// Applies the rotation part of `g` to every trailing 3-vector of `t`.
pub(crate) fn rotate_last3(t: &Tensor, g: &RigidTransform) -> Tensor {
    let vals = t.value();
    let mut out = Vec::with_capacity(vals.len());
    for chunk in vals.chunks(3) {
        out.extend_from_slice(&g.apply_vector([chunk[0], chunk[1], chunk[2]]));
    }
    Tensor::from_data(t.shape(), out, false).expect("same size")
}

pub(crate) fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "comparing different shapes");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
