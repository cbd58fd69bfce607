//! Charged-particle simulator and dataset generation.
//!
//! Unit-mass particles with charges ±1 interact through a softened
//! Coulomb force `F_ij = q_i q_j (x_i - x_j) / (|x_i - x_j|^2 + eps^2)^{3/2}`
//! and are integrated with velocity Verlet (leapfrog). Pairwise forces are
//! applied antisymmetrically, so total momentum is conserved to rounding;
//! the symplectic integrator keeps energy drift bounded.

use crate::data::file::{DatasetFile, FieldSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Softening length of the force law; bounds forces during close encounters.
pub const SOFTENING: f64 = 0.1;

/// Default integrator step.
pub const DEFAULT_DT: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct NBodyTrajectory {
    /// `positions[t][i]`, t = 0..=n_steps.
    pub positions: Vec<Vec<[f64; 3]>>,
    pub velocities: Vec<Vec<[f64; 3]>>,
    pub charges: Vec<f64>,
}

impl NBodyTrajectory {
    pub fn states(&self) -> usize {
        self.positions.len()
    }
}

/// Pairwise softened Coulomb forces, one resultant per particle.
/// Each pair force is computed once and applied with opposite signs.
pub fn forces(pos: &[[f64; 3]], charges: &[f64]) -> Vec<[f64; 3]> {
    let n = pos.len();
    let mut out = vec![[0.0; 3]; n];
    let eps2 = SOFTENING * SOFTENING;
    for i in 0..n {
        for j in i + 1..n {
            let d = [
                pos[i][0] - pos[j][0],
                pos[i][1] - pos[j][1],
                pos[i][2] - pos[j][2],
            ];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + eps2;
            let scale = charges[i] * charges[j] / (r2 * r2.sqrt());
            for a in 0..3 {
                let f = scale * d[a];
                out[i][a] += f;
                out[j][a] -= f;
            }
        }
    }
    out
}

/// Kinetic plus softened pair potential (the exact conserved quantity of
/// the continuous dynamics; the integrator keeps it approximately).
pub fn total_energy(pos: &[[f64; 3]], vel: &[[f64; 3]], charges: &[f64]) -> f64 {
    let eps2 = SOFTENING * SOFTENING;
    let mut e = 0.0;
    for v in vel {
        e += 0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    }
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let d = [
                pos[i][0] - pos[j][0],
                pos[i][1] - pos[j][1],
                pos[i][2] - pos[j][2],
            ];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + eps2;
            e += charges[i] * charges[j] / r2.sqrt();
        }
    }
    e
}

pub fn total_momentum(vel: &[[f64; 3]]) -> [f64; 3] {
    let mut p = [0.0; 3];
    for v in vel {
        for a in 0..3 {
            p[a] += v[a];
        }
    }
    p
}

/// Balanced ±1 charges; when `n` is odd the leftover sign is random.
fn sample_charges(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut q = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        q.push(1.0);
        q.push(-1.0);
    }
    if n % 2 == 1 {
        q.push(if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
    }
    rng.shuffle(&mut q);
    q
}

/// Velocity-Verlet integration from Gaussian initial conditions:
/// positions ~ N(0,1) per axis, velocities ~ N(0, 0.5) per axis.
/// Returns `n_steps + 1` states including the initial one.
pub fn simulate_nbody(
    rng: &mut Rng,
    n_particles: usize,
    n_steps: usize,
    dt: f64,
) -> Result<NBodyTrajectory> {
    if n_particles < 2 {
        return Err(Error::argument(format!(
            "n-body simulation needs at least 2 particles, got {n_particles}"
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::argument(format!("dt must be positive, got {dt}")));
    }
    let charges = sample_charges(rng, n_particles);
    let pos: Vec<[f64; 3]> = (0..n_particles)
        .map(|_| [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)])
        .collect();
    let vel: Vec<[f64; 3]> = (0..n_particles)
        .map(|_| [rng.normal(0.0, 0.5), rng.normal(0.0, 0.5), rng.normal(0.0, 0.5)])
        .collect();
    simulate_from(pos, vel, charges, n_steps, dt)
}

/// Integration from explicit initial conditions (used by covariance tests).
pub fn simulate_from(
    mut pos: Vec<[f64; 3]>,
    mut vel: Vec<[f64; 3]>,
    charges: Vec<f64>,
    n_steps: usize,
    dt: f64,
) -> Result<NBodyTrajectory> {
    let mut traj = NBodyTrajectory {
        positions: Vec::with_capacity(n_steps + 1),
        velocities: Vec::with_capacity(n_steps + 1),
        charges,
    };
    traj.positions.push(pos.clone());
    traj.velocities.push(vel.clone());
    let mut acc = forces(&pos, &traj.charges); // unit masses: a = F
    for _ in 0..n_steps {
        for i in 0..pos.len() {
            for a in 0..3 {
                vel[i][a] += 0.5 * dt * acc[i][a];
                pos[i][a] += dt * vel[i][a];
            }
        }
        acc = forces(&pos, &traj.charges);
        for i in 0..pos.len() {
            for a in 0..3 {
                vel[i][a] += 0.5 * dt * acc[i][a];
            }
        }
        traj.positions.push(pos.clone());
        traj.velocities.push(vel.clone());
    }
    Ok(traj)
}

pub fn nbody_fields(n_particles: usize) -> Vec<FieldSpec> {
    vec![
        FieldSpec::new("positions", &[n_particles, 3]),
        FieldSpec::new("velocities", &[n_particles, 3]),
        FieldSpec::new("charges", &[n_particles]),
        FieldSpec::new("target", &[n_particles, 3]),
    ]
}

/// One record per trajectory: the initial state plus the positions
/// `horizon` steps later. Also returns the MSE of the linear
/// extrapolation baseline `x + v * horizon * dt`, the reference score.
pub fn gen_nbody_dataset(
    seed: u64,
    n_traj: usize,
    n_particles: usize,
    n_steps: usize,
    horizon: usize,
    dt: f64,
) -> Result<(DatasetFile, f64)> {
    if horizon > n_steps {
        return Err(Error::argument(format!(
            "horizon {horizon} exceeds simulated steps {n_steps}"
        )));
    }
    let root = Rng::from_seed(seed);
    let mut file = DatasetFile::new(seed, nbody_fields(n_particles));
    let mut baseline_se = 0.0;
    let mut count = 0usize;
    for t in 0..n_traj {
        let mut rng = root.split(t as u64);
        let traj = simulate_nbody(&mut rng, n_particles, n_steps, dt)?;
        let x0 = &traj.positions[0];
        let v0 = &traj.velocities[0];
        let xt = &traj.positions[horizon];
        let flat = |v: &Vec<[f64; 3]>| v.iter().flatten().copied().collect::<Vec<f64>>();
        file.push_record(vec![flat(x0), flat(v0), traj.charges.clone(), flat(xt)])?;
        let t_span = horizon as f64 * dt;
        for i in 0..n_particles {
            for a in 0..3 {
                let pred = x0[i][a] + v0[i][a] * t_span;
                let err = pred - xt[i][a];
                baseline_se += err * err;
                count += 1;
            }
        }
    }
    let baseline_mse = if count > 0 { baseline_se / count as f64 } else { 0.0 };
    Ok((file, baseline_mse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_rotation;

    #[test]
    fn opposite_charges_attract_with_softened_magnitude() {
        let pos = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let f = forces(&pos, &[1.0, -1.0]);
        // force on particle 0 points toward particle 1 (+x)
        assert!(f[0][0] > 0.0);
        let expected = 1.0 / (1.0 + SOFTENING * SOFTENING).powf(1.5);
        assert!((f[0][0] - expected).abs() < 1e-12);
        assert!((f[0][0] - 1.0).abs() < 0.02, "magnitude close to 1");
    }

    #[test]
    fn like_charges_repel_and_obey_newtons_third_law() {
        let pos = [[0.2, -0.3, 0.4], [-0.5, 0.8, 0.1]];
        let f = forces(&pos, &[1.0, 1.0]);
        // repulsive: force on 0 points away from 1
        let d = [pos[0][0] - pos[1][0], pos[0][1] - pos[1][1], pos[0][2] - pos[1][2]];
        let dot = f[0][0] * d[0] + f[0][1] * d[1] + f[0][2] * d[2];
        assert!(dot > 0.0);
        for a in 0..3 {
            assert_eq!(f[0][a], -f[1][a], "exact antisymmetry");
        }
    }

    #[test]
    fn energy_drift_stays_below_one_percent() {
        let mut rng = Rng::from_seed(0);
        let traj = simulate_nbody(&mut rng, 5, 1000, 1e-3).unwrap();
        let e0 = total_energy(&traj.positions[0], &traj.velocities[0], &traj.charges);
        let e1 = total_energy(
            traj.positions.last().unwrap(),
            traj.velocities.last().unwrap(),
            &traj.charges,
        );
        assert!(e0.abs() > 0.1, "test seed must give non-degenerate energy");
        assert!(
            (e1 - e0).abs() < 0.01 * e0.abs(),
            "drift {} vs energy {}",
            e1 - e0,
            e0
        );
    }

    #[test]
    fn momentum_is_conserved_per_step() {
        let mut rng = Rng::from_seed(9);
        let traj = simulate_nbody(&mut rng, 7, 200, 1e-3).unwrap();
        let p0 = total_momentum(&traj.velocities[0]);
        for t in 1..traj.states() {
            let p = total_momentum(&traj.velocities[t]);
            for a in 0..3 {
                assert!((p[a] - p0[a]).abs() < 1e-9, "step {t}");
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let a = simulate_nbody(&mut Rng::from_seed(3), 5, 50, 1e-3).unwrap();
        let b = simulate_nbody(&mut Rng::from_seed(3), 5, 50, 1e-3).unwrap();
        for t in 0..a.states() {
            for i in 0..5 {
                for c in 0..3 {
                    assert_eq!(
                        a.positions[t][i][c].to_bits(),
                        b.positions[t][i][c].to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn dynamics_commute_with_rotation() {
        // simulate(R x0, R v0) = R simulate(x0, v0)
        let mut rng = Rng::from_seed(10);
        let base = simulate_nbody(&mut rng, 5, 100, 1e-3).unwrap();
        let g = sample_rotation(&mut rng);
        let rx: Vec<[f64; 3]> = base.positions[0].iter().map(|&p| g.apply_vector(p)).collect();
        let rv: Vec<[f64; 3]> = base.velocities[0].iter().map(|&v| g.apply_vector(v)).collect();
        let rotated = simulate_from(rx, rv, base.charges.clone(), 100, 1e-3).unwrap();
        for t in 0..=100 {
            for i in 0..5 {
                let expect = g.apply_vector(base.positions[t][i]);
                for a in 0..3 {
                    assert!(
                        (rotated.positions[t][i][a] - expect[a]).abs() < 1e-6,
                        "t={t} i={i}"
                    );
                }
            }
        }
    }

    #[test]
    fn charges_are_balanced() {
        for n in [4usize, 5, 10] {
            let mut rng = Rng::from_seed(n as u64);
            let q = sample_charges(&mut rng, n);
            let pos = q.iter().filter(|&&c| c > 0.0).count();
            let neg = q.iter().filter(|&&c| c < 0.0).count();
            assert_eq!(pos + neg, n);
            assert!(pos.abs_diff(neg) <= 1);
        }
    }

    #[test]
    fn horizon_zero_targets_equal_inputs() {
        let (file, baseline) = gen_nbody_dataset(5, 3, 4, 10, 0, 1e-3).unwrap();
        for r in 0..3 {
            assert_eq!(file.field(r, "positions").unwrap(), file.field(r, "target").unwrap());
        }
        assert_eq!(baseline, 0.0);
    }

    #[test]
    fn dataset_regeneration_is_bitwise_identical() {
        let (a, ba) = gen_nbody_dataset(77, 5, 5, 120, 100, 1e-3).unwrap();
        let (b, bb) = gen_nbody_dataset(77, 5, 5, 120, 100, 1e-3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ba.to_bits(), bb.to_bits());
        assert!(ba.is_finite() && ba > 0.0);
    }
}
