//! Data generation and the on-disk dataset format.

pub mod file;
pub mod nbody;
pub mod shapes;

pub use file::{DatasetFile, FieldSpec};
pub use nbody::{gen_nbody_dataset, simulate_nbody, NBodyTrajectory};
pub use shapes::{gen_shapes, RotationMode, ShapeClass, NUM_CLASSES};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// A labeled shape cloud decoded from a dataset record.
pub fn shape_samples(file: &DatasetFile) -> Result<Vec<PointCloud>> {
    let mut out = Vec::with_capacity(file.records.len());
    for r in 0..file.records.len() {
        let points = file.field(r, "points")?;
        let normals = file.field(r, "normals")?;
        let label = file.field(r, "label")?[0] as usize;
        let mut cloud = PointCloud::from_points(to_vec3(points));
        cloud.normals = Some(to_vec3(normals));
        cloud.label = Some(label);
        out.push(cloud);
    }
    Ok(out)
}

/// An n-body prediction sample: initial state plus target positions.
pub struct NBodySample {
    pub cloud: PointCloud,
    pub target: Vec<[f64; 3]>,
}

pub fn nbody_samples(file: &DatasetFile) -> Result<Vec<NBodySample>> {
    let mut out = Vec::with_capacity(file.records.len());
    for r in 0..file.records.len() {
        let positions = file.field(r, "positions")?;
        let velocities = file.field(r, "velocities")?;
        let charges = file.field(r, "charges")?.to_vec();
        let target = to_vec3(file.field(r, "target")?);
        if positions.len() != velocities.len() || charges.len() * 3 != positions.len() {
            return Err(Error::shape(format!(
                "inconsistent n-body record {r}: {} position values, {} charges",
                positions.len(),
                charges.len()
            )));
        }
        let mut cloud = PointCloud::from_points(to_vec3(positions));
        cloud.velocities = Some(to_vec3(velocities));
        cloud.charges = Some(charges);
        out.push(NBodySample { cloud, target });
    }
    Ok(out)
}

fn to_vec3(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}
