//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use rand::Rng;

use posedepth::skeleton::{Pose3D, SkeletonTopology};
use posedepth::synth::{sample_pose, stream_rng, SynthConfig};

/// Synthetic poses cycling through the action presets, each given a random
/// global rotation and an offset in front of the camera.
pub fn random_poses(n: usize, seed: u64) -> Vec<Pose3D> {
    let cfg = SynthConfig::default();
    let topo = SkeletonTopology::h36m();
    let mut rng = stream_rng(seed, 7);
    (0..n)
        .map(|i| {
            let preset = &cfg.joint_angle_ranges[i % cfg.joint_angle_ranges.len()];
            let pose = sample_pose(&cfg, &topo, preset, &mut rng);
            let (a, b) = (rng.random_range(-3.2..3.2), rng.random_range(-1.6..1.6));
            let offset = [
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
                rng.random_range(2000.0..6000.0),
            ];
            Pose3D::new(
                pose.joints
                    .iter()
                    .map(|p| {
                        let q = rotate_y(*p, a);
                        let q = rotate_x(q, b);
                        [q[0] + offset[0], q[1] + offset[1], q[2] + offset[2]]
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Poses with joints drawn uniformly in a cube; no anatomical structure.
pub fn uniform_poses(n: usize, seed: u64) -> Vec<Pose3D> {
    let mut rng = stream_rng(seed, 8);
    (0..n)
        .map(|_| {
            Pose3D::new(
                (0..17)
                    .map(|_| std::array::from_fn(|_| rng.random_range(-1000.0..1000.0)))
                    .collect(),
            )
        })
        .collect()
}

pub fn rotate_x(p: [f64; 3], a: f64) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]]
}

pub fn rotate_y(p: [f64; 3], a: f64) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]]
}

pub fn rotate_z(p: [f64; 3], a: f64) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}
