//! Rotation-equivariant point cloud analysis via learned per-point
//! orientations.
//!
//! The crate learns an orthonormal frame for every point of a cloud with a
//! vector-feature graph network, projects neighbor offsets into those frames
//! before message passing (which makes the passed messages invariant to
//! rigid motion), and reads out invariant or equivariant properties. It is
//! self-contained: a small f64 autodiff engine, data generators, a training
//! loop and a verification harness that turns the equivariance identities
//! into executable randomized audits.
//!
//! Entry points:
//! - [`tensor`]: reverse-mode autodiff over dense f64 tensors.
//! - [`geometry`]: rigid transforms, kNN graphs, farthest point sampling and
//!   the differentiable Gram-Schmidt frame constructor.
//! - [`gvp`]: geometric vector perceptrons and the vector graph convolution.
//! - [`orientation`]: per-point and global orientation learning.
//! - [`backbone`]: oriented message passing networks (generic / DGCNN / RS-CNN).
//! - [`readout`]: invariant and equivariant prediction heads.
//! - [`data`]: N-body simulator, synthetic shapes, binary dataset container.
//! - [`train`]: losses, Adam, training loops and metrics.
//! - [`verify`]: randomized equivariance and gradient audits.
//! - [`cli`]: the command implementations behind the `oriented-mp` binary.

pub mod backbone;
pub mod data;
pub mod error;
pub mod gvp;
pub mod nn;
pub mod orientation;
pub mod readout;
pub mod geometry;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod test_util;
