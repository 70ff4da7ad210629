//! Synthetic paired data: forward kinematics over the skeleton tree,
//! pinhole projection, and simulated detector / annotator noise.
//!
//! Every sample derives its own random stream from `(seed, index)`, so a
//! dataset is a pure function of its config regardless of generation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbi::{label_fbi, BoneStatus, FbiLabelConfig, FbiMatrix};
use crate::io::{json_hash, CODE_VERSION};
use crate::skeleton::{Pose2D, Pose3D, SkeletonTopology};

pub const NUM_ACTIONS: usize = 15;
/// Action tag carried by out-of-domain samples.
pub const OUT_OF_DOMAIN_ACTION: usize = NUM_ACTIONS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal_length: f64,
    pub principal_point: [f64; 2],
    pub subject_distance: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            focal_length: 1000.0,
            principal_point: [500.0, 500.0],
            subject_distance: 5000.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_length > 0.0) || !self.focal_length.is_finite() {
            return Err(Error::Config(format!(
                "focal_length must be positive, got {}",
                self.focal_length
            )));
        }
        if !(self.subject_distance > 0.0) || !self.subject_distance.is_finite() {
            return Err(Error::Config(format!(
                "subject_distance must be positive, got {}",
                self.subject_distance
            )));
        }
        Ok(())
    }

    /// Inverse projection of pixel `(u, v)` at camera depth `depth` (mm).
    pub fn lift(&self, uv: [f64; 2], depth: f64) -> [f64; 3] {
        let f = self.focal_length;
        let [u0, v0] = self.principal_point;
        [(uv[0] - u0) * depth / f, (uv[1] - v0) * depth / f, depth]
    }
}

/// Closed interval of angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub min: f64,
    pub max: f64,
}

impl AngleRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { min: v, max: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }

    fn mirrored(&self) -> Self {
        Self::new(-self.max, -self.min)
    }

    pub fn is_disjoint(&self, other: &AngleRange) -> bool {
        self.max < other.min || other.max < self.min
    }
}

/// Local rotation ranges of one bone relative to its parent's frame.
///
/// `flex` swings the bone toward the body's front, `abduct` rolls it about
/// the depth axis, `twist` spins it about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointRanges {
    pub flex: AngleRange,
    pub abduct: AngleRange,
    pub twist: AngleRange,
}

impl JointRanges {
    pub const REST: JointRanges = JointRanges {
        flex: AngleRange::fixed(0.0),
        abduct: AngleRange::fixed(0.0),
        twist: AngleRange::fixed(0.0),
    };

    pub const fn flex(min: f64, max: f64) -> Self {
        Self {
            flex: AngleRange::new(min, max),
            ..Self::REST
        }
    }

    // Abduction and twist flip sign between the body's left and right sides.
    fn mirrored(&self) -> Self {
        Self {
            flex: self.flex,
            abduct: self.abduct.mirrored(),
            twist: self.twist.mirrored(),
        }
    }
}

/// One pose regime: global orientation plus per-joint local ranges
/// (indexed by child joint; the root entry is unused).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPreset {
    pub name: String,
    pub root_yaw: AngleRange,
    pub root_pitch: AngleRange,
    pub joints: Vec<JointRanges>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Length of the bone ending at each joint (mm); root entry unused.
    pub bone_lengths: Vec<f64>,
    /// Unit direction of each bone in the rest pose, parent frame.
    pub rest_directions: Vec<[f64; 3]>,
    /// One preset per action bin.
    pub joint_angle_ranges: Vec<ActionPreset>,
    /// Preset whose ranges are disjoint from every training preset.
    pub out_of_domain: ActionPreset,
    pub noise_2d_std: f64,
    pub coarse_z_noise_std: f64,
    pub fbi_flip_prob: f64,
    pub fbi: FbiLabelConfig,
    pub seed: u64,
    pub count: usize,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            bone_lengths: DEFAULT_BONE_LENGTHS.to_vec(),
            rest_directions: REST_DIRECTIONS.to_vec(),
            joint_angle_ranges: default_action_presets(),
            out_of_domain: out_of_domain_preset(),
            noise_2d_std: 3.0,
            coarse_z_noise_std: 30.0,
            fbi_flip_prob: 0.05,
            fbi: FbiLabelConfig::default(),
            seed: 0,
            count: 20_000,
            train_fraction: 0.8,
        }
    }
}

// Bone ending at: pelvis, r_hip, r_knee, r_ankle, l_hip, l_knee, l_ankle,
// spine, thorax, neck, head, l_shoulder, l_elbow, l_wrist, r_shoulder,
// r_elbow, r_wrist.
const DEFAULT_BONE_LENGTHS: [f64; 17] = [
    0.0, 130.0, 450.0, 430.0, 130.0, 450.0, 430.0, 230.0, 250.0, 120.0, 110.0, 150.0, 280.0,
    250.0, 150.0, 280.0, 250.0,
];

// Rest pose faces the camera: the subject's left is +x, up is -y.
const REST_DIRECTIONS: [[f64; 3]; 17] = [
    [0.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
];

/// Limb-level ranges of a regime, expanded into per-joint presets.
struct Regime {
    name: &'static str,
    spine: JointRanges,
    neck: JointRanges,
    hip: JointRanges,
    knee: JointRanges,
    shoulder: JointRanges,
    elbow: JointRanges,
}

impl Regime {
    /// Right-side ranges as given, left side mirrored.
    fn joints(&self) -> Vec<JointRanges> {
        let collar = JointRanges {
            flex: AngleRange::new(-0.1, 0.1),
            abduct: AngleRange::new(-0.1, 0.15),
            twist: AngleRange::fixed(0.0),
        };
        let head = JointRanges {
            flex: AngleRange::new(-0.2, 0.3),
            abduct: AngleRange::new(-0.2, 0.2),
            twist: AngleRange::fixed(0.0),
        };
        vec![
            JointRanges::REST,
            JointRanges::REST,
            self.hip,
            self.knee,
            JointRanges::REST,
            self.hip.mirrored(),
            self.knee.mirrored(),
            self.spine,
            JointRanges::flex(-0.1, 0.15),
            self.neck,
            head,
            collar.mirrored(),
            self.shoulder.mirrored(),
            self.elbow.mirrored(),
            collar,
            self.shoulder,
            self.elbow,
        ]
    }
}

fn regimes() -> [Regime; 5] {
    let r = |a: f64, b: f64| AngleRange::new(a, b);
    [
        Regime {
            name: "stand",
            spine: JointRanges { flex: r(-0.1, 0.15), abduct: r(-0.1, 0.1), twist: r(-0.2, 0.2) },
            neck: JointRanges::flex(-0.1, 0.2),
            hip: JointRanges { flex: r(-0.2, 0.3), abduct: r(0.0, 0.2), twist: r(-0.2, 0.2) },
            knee: JointRanges::flex(-0.3, 0.0),
            shoulder: JointRanges { flex: r(-0.3, 0.5), abduct: r(0.0, 0.4), twist: r(-0.3, 0.3) },
            elbow: JointRanges::flex(0.0, 0.8),
        },
        Regime {
            name: "walk",
            spine: JointRanges { flex: r(0.0, 0.2), abduct: r(-0.1, 0.1), twist: r(-0.3, 0.3) },
            neck: JointRanges::flex(-0.1, 0.2),
            hip: JointRanges { flex: r(-0.5, 0.6), abduct: r(0.0, 0.1), twist: r(-0.1, 0.1) },
            knee: JointRanges::flex(-1.0, 0.0),
            shoulder: JointRanges { flex: r(-0.6, 0.6), abduct: r(0.0, 0.2), twist: r(-0.2, 0.2) },
            elbow: JointRanges::flex(0.1, 0.9),
        },
        Regime {
            name: "reach",
            spine: JointRanges { flex: r(0.0, 0.3), abduct: r(-0.2, 0.2), twist: r(-0.3, 0.3) },
            neck: JointRanges::flex(-0.3, 0.1),
            hip: JointRanges { flex: r(-0.1, 0.3), abduct: r(0.0, 0.2), twist: r(-0.2, 0.2) },
            knee: JointRanges::flex(-0.4, 0.0),
            shoulder: JointRanges { flex: r(0.8, 2.6), abduct: r(0.0, 1.2), twist: r(-0.4, 0.4) },
            elbow: JointRanges::flex(0.0, 0.6),
        },
        Regime {
            name: "sit",
            spine: JointRanges { flex: r(0.1, 0.35), abduct: r(-0.1, 0.1), twist: r(-0.2, 0.2) },
            neck: JointRanges::flex(0.0, 0.3),
            hip: JointRanges { flex: r(1.2, 1.7), abduct: r(0.0, 0.3), twist: r(-0.2, 0.2) },
            knee: JointRanges::flex(-1.8, -1.2),
            shoulder: JointRanges { flex: r(0.0, 0.8), abduct: r(0.0, 0.3), twist: r(-0.3, 0.3) },
            elbow: JointRanges::flex(0.5, 1.5),
        },
        Regime {
            name: "gesture",
            spine: JointRanges { flex: r(-0.1, 0.2), abduct: r(-0.2, 0.2), twist: r(-0.4, 0.4) },
            neck: JointRanges::flex(-0.2, 0.2),
            hip: JointRanges { flex: r(-0.2, 0.4), abduct: r(0.0, 0.5), twist: r(-0.2, 0.2) },
            knee: JointRanges::flex(-0.6, 0.0),
            shoulder: JointRanges { flex: r(-0.5, 1.5), abduct: r(0.5, 1.5), twist: r(-0.4, 0.4) },
            elbow: JointRanges::flex(0.0, 2.0),
        },
    ]
}

/// Fifteen presets: five limb regimes, each action owning a disjoint 24° yaw sector.
pub fn default_action_presets() -> Vec<ActionPreset> {
    let regimes = regimes();
    let sector = 2.0 * std::f64::consts::PI / NUM_ACTIONS as f64;
    // Keep sectors closed intervals yet disjoint.
    let gap = 1e-6;
    (0..NUM_ACTIONS)
        .map(|k| {
            let regime = &regimes[k % regimes.len()];
            let lo = -std::f64::consts::PI + k as f64 * sector;
            ActionPreset {
                name: format!("A{}-{}", k + 1, regime.name),
                root_yaw: AngleRange::new(lo, lo + sector - gap),
                root_pitch: AngleRange::new(-0.1, 0.1),
                joints: regime.joints(),
            }
        })
        .collect()
}

/// Deep forward bends with arms overhead: pitch and spine-flex ranges
/// disjoint from every training preset.
pub fn out_of_domain_preset() -> ActionPreset {
    let r = AngleRange::new;
    let regime = Regime {
        name: "ood-bend",
        spine: JointRanges { flex: r(0.6, 1.0), abduct: r(-0.2, 0.2), twist: r(-0.3, 0.3) },
        neck: JointRanges::flex(-0.5, -0.2),
        hip: JointRanges { flex: r(-0.3, 0.5), abduct: r(0.0, 0.4), twist: r(-0.2, 0.2) },
        knee: JointRanges::flex(-0.8, 0.0),
        shoulder: JointRanges { flex: r(2.7, 3.0), abduct: r(0.0, 0.5), twist: r(-0.3, 0.3) },
        elbow: JointRanges::flex(0.0, 0.4),
    };
    ActionPreset {
        name: regime.name.to_string(),
        root_yaw: AngleRange::new(-std::f64::consts::PI, std::f64::consts::PI),
        root_pitch: AngleRange::new(0.2, 0.4),
        joints: regime.joints(),
    }
}

impl SynthConfig {
    pub fn validate(&self, topo: &SkeletonTopology) -> Result<()> {
        let j = topo.num_joints();
        let bad = |msg: String| Err(Error::Config(msg));
        if self.bone_lengths.len() != j {
            return bad(format!("bone_lengths has {} entries, expected {j}", self.bone_lengths.len()));
        }
        if self.rest_directions.len() != j {
            return bad(format!(
                "rest_directions has {} entries, expected {j}",
                self.rest_directions.len()
            ));
        }
        if self.bone_lengths.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("bone lengths must be finite and non-negative".into());
        }
        if self.joint_angle_ranges.is_empty() {
            return bad("joint_angle_ranges needs at least one preset".into());
        }
        for preset in self.joint_angle_ranges.iter().chain([&self.out_of_domain]) {
            if preset.joints.len() != j {
                return bad(format!("preset {} has {} joints, expected {j}", preset.name, preset.joints.len()));
            }
            let ranges = preset.joints.iter().flat_map(|r| [r.flex, r.abduct, r.twist]);
            for range in ranges.chain([preset.root_yaw, preset.root_pitch]) {
                if !(range.min <= range.max) || !range.min.is_finite() || !range.max.is_finite() {
                    return bad(format!("preset {} has an empty angle range {range:?}", preset.name));
                }
            }
        }
        if !(self.noise_2d_std >= 0.0) || !(self.coarse_z_noise_std >= 0.0) {
            return bad("noise standard deviations must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.fbi_flip_prob) {
            return bad(format!("fbi_flip_prob must be in [0, 1], got {}", self.fbi_flip_prob));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        self.fbi.validate()
    }

    pub fn num_actions(&self) -> usize {
        self.joint_angle_ranges.len()
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn rot_x(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation that swings a hanging bone (+y) toward the front (-z) for positive flex.
fn local_rotation(flex: f64, abduct: f64, twist: f64) -> Mat3 {
    mat_mul(&mat_mul(&rot_y(twist), &rot_z(abduct)), &rot_x(-flex))
}

/// Forward kinematics from the root: a root-relative camera-frame pose.
pub fn sample_pose(
    cfg: &SynthConfig,
    topo: &SkeletonTopology,
    preset: &ActionPreset,
    rng: &mut impl Rng,
) -> Pose3D {
    let n = topo.num_joints();
    let yaw = preset.root_yaw.sample(rng);
    let pitch = preset.root_pitch.sample(rng);
    let root_frame = mat_mul(&rot_y(yaw), &rot_x(-pitch));

    let mut frames = vec![IDENTITY; n];
    let mut joints = vec![[0.0; 3]; n];
    frames[topo.root()] = root_frame;
    for j in topo.topological_order() {
        let Some(p) = topo.parent(j) else { continue };
        let ranges = &preset.joints[j];
        let (flex, abduct, twist) = (
            ranges.flex.sample(rng),
            ranges.abduct.sample(rng),
            ranges.twist.sample(rng),
        );
        frames[j] = mat_mul(&frames[p], &local_rotation(flex, abduct, twist));
        let rest = cfg.rest_directions[j];
        let len = cfg.bone_lengths[j];
        let offset = mat_vec(&frames[j], &[rest[0] * len, rest[1] * len, rest[2] * len]);
        let pj = joints[p];
        joints[j] = [pj[0] + offset[0], pj[1] + offset[1], pj[2] + offset[2]];
    }
    Pose3D::new(joints)
}

/// Pinhole projection after placing the root at depth `subject_distance`.
pub fn project(pose: &Pose3D, cam: &CameraModel) -> Result<Pose2D> {
    let f = cam.focal_length;
    let [u0, v0] = cam.principal_point;
    pose.joints
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let depth = p[2] + cam.subject_distance;
            if !(depth > 0.0) {
                return Err(Error::BehindCamera { joint: j, depth });
            }
            Ok([f * p[0] / depth + u0, f * p[1] / depth + v0])
        })
        .collect::<Result<Vec<_>>>()
        .map(Pose2D::new)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One paired example. `pose3d_gt` is root-relative; `coarse_z_*` are
/// root-relative joint depths in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub action: usize,
    pub split: Split,
    pub pose3d_gt: Pose3D,
    pub pose2d: Pose2D,
    pub pose2d_noisy: Pose2D,
    pub coarse_z_gt: Vec<f64>,
    pub coarse_z_noisy: Vec<f64>,
    pub fbi_gt: FbiMatrix,
    pub fbi_noisy: FbiMatrix,
}

/// JSON-lines record; coordinates flattened.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub action: usize,
    pub split: Split,
    pub pose3d_gt: Vec<f64>,
    pub pose2d: Vec<f64>,
    pub pose2d_noisy: Vec<f64>,
    pub coarse_z_gt: Vec<f64>,
    pub coarse_z_noisy: Vec<f64>,
    pub fbi_gt: FbiMatrix,
    pub fbi_noisy: FbiMatrix,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        SampleRecord {
            id: s.id,
            action: s.action,
            split: s.split,
            pose3d_gt: s.pose3d_gt.to_flat(),
            pose2d: s.pose2d.to_flat(),
            pose2d_noisy: s.pose2d_noisy.to_flat(),
            coarse_z_gt: s.coarse_z_gt.clone(),
            coarse_z_noisy: s.coarse_z_noisy.clone(),
            fbi_gt: s.fbi_gt.clone(),
            fbi_noisy: s.fbi_noisy.clone(),
        }
    }
}

impl TryFrom<SampleRecord> for Sample {
    type Error = Error;

    fn try_from(r: SampleRecord) -> Result<Self> {
        Ok(Sample {
            id: r.id,
            action: r.action,
            split: r.split,
            pose3d_gt: Pose3D::from_flat(&r.pose3d_gt)?,
            pose2d: Pose2D::from_flat(&r.pose2d)?,
            pose2d_noisy: Pose2D::from_flat(&r.pose2d_noisy)?,
            coarse_z_gt: r.coarse_z_gt,
            coarse_z_noisy: r.coarse_z_noisy,
            fbi_gt: r.fbi_gt,
            fbi_noisy: r.fbi_noisy,
        })
    }
}

/// ChaCha8 generator on an independent stream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Clean sample for one index: pose, projection, labels. Noisy fields are
/// copies of the clean ones until [`corrupt`] runs.
pub fn clean_sample(
    cfg: &SynthConfig,
    cam: &CameraModel,
    topo: &SkeletonTopology,
    preset: &ActionPreset,
    id: u64,
    action: usize,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let pose = sample_pose(cfg, topo, preset, rng);
    let pose2d = project(&pose, cam)?;
    let fbi = label_fbi(&pose, topo, &cfg.fbi)?;
    let z = pose.depths();
    Ok(Sample {
        id,
        action,
        split: Split::Train,
        pose2d_noisy: pose2d.clone(),
        pose2d,
        coarse_z_noisy: z.clone(),
        coarse_z_gt: z,
        fbi_noisy: fbi.clone(),
        fbi_gt: fbi,
        pose3d_gt: pose,
    })
}

/// Adds Gaussian noise to the 2D joints and coarse depths and resamples each
/// FBI class uniformly with probability `fbi_flip_prob`. Ground truth is untouched.
pub fn corrupt(sample: &mut Sample, cfg: &SynthConfig, rng: &mut impl Rng) {
    let noise = |std: f64| Normal::new(0.0, std).expect("validated std");
    if cfg.noise_2d_std > 0.0 {
        let n = noise(cfg.noise_2d_std);
        sample.pose2d_noisy = Pose2D::new(
            sample
                .pose2d
                .joints
                .iter()
                .map(|p| [p[0] + n.sample(rng), p[1] + n.sample(rng)])
                .collect(),
        );
    } else {
        sample.pose2d_noisy = sample.pose2d.clone();
    }
    if cfg.coarse_z_noise_std > 0.0 {
        let n = noise(cfg.coarse_z_noise_std);
        sample.coarse_z_noisy = sample.coarse_z_gt.iter().map(|z| z + n.sample(rng)).collect();
    } else {
        sample.coarse_z_noisy = sample.coarse_z_gt.clone();
    }
    sample.fbi_noisy = if cfg.fbi_flip_prob > 0.0 {
        FbiMatrix(
            sample
                .fbi_gt
                .statuses()
                .iter()
                .map(|&s| {
                    if rng.random_bool(cfg.fbi_flip_prob) {
                        BoneStatus::ALL[rng.random_range(0..3)]
                    } else {
                        s
                    }
                })
                .collect(),
        )
    } else {
        sample.fbi_gt.clone()
    };
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub code_version: String,
    pub topology_hash: String,
    pub config_hash: String,
    pub config: SynthConfig,
    pub camera: CameraModel,
    pub train_count: usize,
    pub test_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub const DATASET_FORMAT: &str = "posedepth-dataset/1";

/// Generates `cfg.count` samples, cycling through the action presets, and
/// splits them with a seeded permutation.
pub fn make_dataset(cfg: &SynthConfig, cam: &CameraModel, topo: &SkeletonTopology) -> Result<Dataset> {
    cfg.validate(topo)?;
    cam.validate()?;
    if cfg.count < 2 {
        return Err(Error::Config(format!("count must be at least 2, got {}", cfg.count)));
    }
    let mut samples = (0..cfg.count)
        .map(|i| {
            let action = i % cfg.num_actions();
            generate_one(cfg, cam, topo, &cfg.joint_angle_ranges[action], i as u64, action)
        })
        .collect::<Result<Vec<_>>>()?;

    let n_train = ((cfg.count as f64 * cfg.train_fraction).floor() as usize).clamp(1, cfg.count - 1);
    let mut order: Vec<usize> = (0..cfg.count).collect();
    let mut rng = stream_rng(cfg.seed, u64::MAX);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut is_train = vec![false; cfg.count];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    for (s, train) in samples.iter_mut().zip(&is_train) {
        s.split = if *train { Split::Train } else { Split::Test };
    }
    let (train, test): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.split == Split::Train);

    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.into(),
            code_version: CODE_VERSION.into(),
            topology_hash: topo.content_hash(),
            config_hash: json_hash(&(cfg, cam))?,
            config: cfg.clone(),
            camera: *cam,
            train_count: train.len(),
            test_count: test.len(),
        },
        train,
        test,
    })
}

/// Samples drawn from the out-of-domain preset, seeded apart from the main set.
pub fn make_out_of_domain(
    cfg: &SynthConfig,
    cam: &CameraModel,
    topo: &SkeletonTopology,
    count: usize,
) -> Result<Vec<Sample>> {
    cfg.validate(topo)?;
    let ood_seed = cfg.seed ^ 0x00d0_00d0_00d0_00d0;
    let shifted = SynthConfig { seed: ood_seed, ..cfg.clone() };
    (0..count)
        .map(|i| {
            let mut s =
                generate_one(&shifted, cam, topo, &cfg.out_of_domain, i as u64, OUT_OF_DOMAIN_ACTION)?;
            s.split = Split::Test;
            Ok(s)
        })
        .collect()
}

fn generate_one(
    cfg: &SynthConfig,
    cam: &CameraModel,
    topo: &SkeletonTopology,
    preset: &ActionPreset,
    index: u64,
    action: usize,
) -> Result<Sample> {
    let mut pose_rng = stream_rng(cfg.seed, 2 * index);
    let mut sample = clean_sample(cfg, cam, topo, preset, index, action, &mut pose_rng)?;
    let mut noise_rng = stream_rng(cfg.seed, 2 * index + 1);
    corrupt(&mut sample, cfg, &mut noise_rng);
    Ok(sample)
}

impl Dataset {
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        let mut all: Vec<&Sample> = self.train.iter().chain(&self.test).collect();
        all.sort_by_key(|s| s.id);
        all.into_iter()
    }

    /// Header line plus one record per sample in id order.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let records: Vec<SampleRecord> = self.all_samples().map(SampleRecord::from).collect();
        crate::io::to_jsonl(&self.header, &records)
    }

    pub fn from_jsonl(path: &std::path::Path) -> Result<Self> {
        let mut rows = crate::io::read_jsonl_values(path)?.into_iter();
        let (_, header) = rows
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty dataset file", path.display())))?;
        let header: DatasetHeader = serde_json::from_value(header)
            .map_err(|e| Error::Format(format!("{}:1: bad header: {e}", path.display())))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::Format(format!("unsupported dataset format {}", header.format)));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (line, value) in rows {
            let record: SampleRecord = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("{}:{line}: {e}", path.display())))?;
            let sample = Sample::try_from(record)?;
            match sample.split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        Ok(Dataset { header, train, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::norm3;

    fn topo() -> SkeletonTopology {
        SkeletonTopology::h36m()
    }

    fn small_cfg(count: usize) -> SynthConfig {
        SynthConfig {
            count,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        SynthConfig::default().validate(&topo()).unwrap();
        CameraModel::default().validate().unwrap();
    }

    #[test]
    fn collapsed_ranges_give_rest_pose() {
        let cfg = SynthConfig::default();
        let preset = ActionPreset {
            name: "rest".into(),
            root_yaw: AngleRange::fixed(0.0),
            root_pitch: AngleRange::fixed(0.0),
            joints: vec![JointRanges::REST; 17],
        };
        let mut rng = stream_rng(1, 0);
        let a = sample_pose(&cfg, &topo(), &preset, &mut rng);
        let b = sample_pose(&cfg, &topo(), &preset, &mut rng);
        assert_eq!(a, b);
        // Standing upright: head straight above pelvis, ankles below.
        assert_eq!(a.joints[10], [0.0, -710.0, 0.0]);
        assert_eq!(a.joints[3], [-130.0, 880.0, 0.0]);
    }

    #[test]
    fn sampled_bone_lengths_match_config() {
        let cfg = SynthConfig::default();
        let t = topo();
        for (k, preset) in cfg.joint_angle_ranges.iter().enumerate() {
            let mut rng = stream_rng(5, k as u64);
            for _ in 0..20 {
                let pose = sample_pose(&cfg, &t, preset, &mut rng);
                for j in 1..17 {
                    let p = t.parent(j).unwrap();
                    let a = pose.joints[p];
                    let b = pose.joints[j];
                    let len = norm3(&[b[0] - a[0], b[1] - a[1], b[2] - a[2]]);
                    assert!((len - cfg.bone_lengths[j]).abs() <= 1e-9 * cfg.bone_lengths[j]);
                }
            }
        }
    }

    #[test]
    fn presets_have_disjoint_yaw_sectors_and_ood_is_disjoint() {
        let cfg = SynthConfig::default();
        let presets = &cfg.joint_angle_ranges;
        assert_eq!(presets.len(), 15);
        for i in 0..presets.len() {
            for j in i + 1..presets.len() {
                assert!(presets[i].root_yaw.is_disjoint(&presets[j].root_yaw));
            }
            assert!(presets[i].root_pitch.is_disjoint(&cfg.out_of_domain.root_pitch));
            assert!(presets[i].joints[7].flex.is_disjoint(&cfg.out_of_domain.joints[7].flex));
        }
    }

    #[test]
    fn projection_examples() {
        let cam = CameraModel {
            focal_length: 1000.0,
            principal_point: [0.0, 0.0],
            subject_distance: 5000.0,
        };
        let pose = Pose3D::new(vec![[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]]);
        let uv = project(&pose, &cam).unwrap();
        assert_eq!(uv.joints[0], [0.0, 0.0]);
        assert!((uv.joints[1][0] - 20.0).abs() < 1e-12);

        let cam2 = CameraModel { principal_point: [320.0, 240.0], ..cam };
        let axis = project(&Pose3D::new(vec![[0.0, 0.0, 700.0]]), &cam2).unwrap();
        assert_eq!(axis.joints[0], [320.0, 240.0]);
    }

    #[test]
    fn doubling_focal_length_doubles_offsets() {
        let cfg = SynthConfig::default();
        let cam = CameraModel::default();
        let cam2 = CameraModel { focal_length: 2.0 * cam.focal_length, ..cam };
        let mut rng = stream_rng(3, 3);
        let pose = sample_pose(&cfg, &topo(), &cfg.joint_angle_ranges[4], &mut rng);
        let a = project(&pose, &cam).unwrap();
        let b = project(&pose, &cam2).unwrap();
        for (p, q) in a.joints.iter().zip(&b.joints) {
            for k in 0..2 {
                let c = cam.principal_point[k];
                assert!((2.0 * (p[k] - c) - (q[k] - c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn behind_camera_is_reported_with_joint() {
        let cam = CameraModel::default();
        let pose = Pose3D::new(vec![[0.0, 0.0, 0.0], [0.0, 0.0, -5000.0]]);
        match project(&pose, &cam) {
            Err(Error::BehindCamera { joint, .. }) => assert_eq!(joint, 1),
            other => panic!("expected BehindCamera, got {other:?}"),
        }
    }

    #[test]
    fn projection_lift_round_trip() {
        let cfg = SynthConfig::default();
        let cam = CameraModel::default();
        let mut rng = stream_rng(9, 0);
        for k in 0..50 {
            let pose = sample_pose(&cfg, &topo(), &cfg.joint_angle_ranges[k % 15], &mut rng);
            let uv = project(&pose, &cam).unwrap();
            for (p, q) in pose.joints.iter().zip(&uv.joints) {
                let lifted = cam.lift(*q, p[2] + cam.subject_distance);
                for i in 0..2 {
                    assert!((lifted[i] - p[i]).abs() <= 1e-9 * p[i].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn zero_noise_leaves_sample_unchanged() {
        let cfg = SynthConfig {
            noise_2d_std: 0.0,
            coarse_z_noise_std: 0.0,
            fbi_flip_prob: 0.0,
            ..SynthConfig::default()
        };
        let mut rng = stream_rng(2, 2);
        let clean = clean_sample(&cfg, &CameraModel::default(), &topo(), &cfg.joint_angle_ranges[0], 0, 0, &mut rng).unwrap();
        let mut noisy = clean.clone();
        corrupt(&mut noisy, &cfg, &mut rng);
        assert_eq!(noisy, clean);
    }

    #[test]
    fn full_flip_keeps_one_hot_rows() {
        let cfg = SynthConfig { fbi_flip_prob: 1.0, ..SynthConfig::default() };
        let mut rng = stream_rng(4, 4);
        for _ in 0..100 {
            let mut s = clean_sample(&cfg, &CameraModel::default(), &topo(), &cfg.joint_angle_ranges[1], 0, 1, &mut rng).unwrap();
            let gt = s.clone();
            corrupt(&mut s, &cfg, &mut rng);
            let rows = s.fbi_noisy.one_hot_rows();
            assert_eq!(FbiMatrix::from_one_hot_rows(&rows).unwrap(), s.fbi_noisy);
            assert_eq!(s.pose3d_gt, gt.pose3d_gt);
            assert_eq!(s.fbi_gt, gt.fbi_gt);
            assert_eq!(s.coarse_z_gt, gt.coarse_z_gt);
        }
    }

    #[test]
    fn noise_std_matches_configuration() {
        let cfg = SynthConfig { noise_2d_std: 2.0, ..SynthConfig::default() };
        let mut rng = stream_rng(8, 8);
        let base = clean_sample(&cfg, &CameraModel::default(), &topo(), &cfg.joint_angle_ranges[0], 0, 0, &mut rng).unwrap();
        let mut residuals = Vec::new();
        // 17 joints per draw; 5883 draws cover 10^5 joints.
        while residuals.len() < 100_000 {
            let mut s = base.clone();
            corrupt(&mut s, &cfg, &mut rng);
            for (a, b) in s.pose2d_noisy.joints.iter().zip(&s.pose2d.joints) {
                residuals.push(a[0] - b[0]);
            }
        }
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        let std = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 2.0).abs() < 0.05 * 2.0, "std {std}");
    }

    #[test]
    fn split_and_determinism() {
        let t = topo();
        let cam = CameraModel::default();
        let d = make_dataset(&small_cfg(10), &cam, &t).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (8, 2));
        let again = make_dataset(&small_cfg(10), &cam, &t).unwrap();
        assert_eq!(d, again);
        assert_eq!(d.to_jsonl().unwrap(), again.to_jsonl().unwrap());
        assert!(make_dataset(&small_cfg(1), &cam, &t).is_err());
    }

    #[test]
    fn ground_truth_fbi_matches_labeler() {
        let t = topo();
        let cfg = small_cfg(150);
        let d = make_dataset(&cfg, &CameraModel::default(), &t).unwrap();
        for s in d.all_samples() {
            assert_eq!(s.fbi_gt, label_fbi(&s.pose3d_gt, &t, &cfg.fbi).unwrap());
            assert_eq!(s.coarse_z_gt, s.pose3d_gt.depths());
            assert_eq!(s.action, s.id as usize % 15);
            assert_eq!(s.pose3d_gt.joints[0], [0.0; 3]);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let t = topo();
        let d = make_dataset(&small_cfg(12), &CameraModel::default(), &t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        crate::io::write_atomic(&path, &d.to_jsonl().unwrap()).unwrap();
        let back = Dataset::from_jsonl(&path).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn invalid_configs_rejected() {
        let t = topo();
        let mut cfg = SynthConfig::default();
        cfg.fbi_flip_prob = 1.5;
        assert!(cfg.validate(&t).is_err());
        let mut cfg = SynthConfig::default();
        cfg.noise_2d_std = -1.0;
        assert!(cfg.validate(&t).is_err());
        let mut cfg = SynthConfig::default();
        cfg.joint_angle_ranges[0].joints[2].flex = AngleRange::new(1.0, 0.0);
        assert!(cfg.validate(&t).is_err());
    }
}
