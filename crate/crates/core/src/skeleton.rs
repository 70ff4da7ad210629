//! Skeleton data model: joint topology, 2D/3D poses and the MPJPE metric.
//!
//! Coordinates live in the camera frame: x to the right, y down, z growing
//! away from the camera. All 3D quantities are millimeters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 17;
pub const NUM_FBI_BONES: usize = 14;

/// Joint names of the 17-joint Human3.6M layout, in index order.
pub const H36M_JOINTS: [&str; NUM_JOINTS] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

const H36M_PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(5),
    Some(0),
    Some(7),
    Some(8),
    Some(9),
    Some(8),
    Some(11),
    Some(12),
    Some(8),
    Some(14),
    Some(15),
];

// Limbs first, then the torso chain and the shoulder girdle.
const H36M_FBI_BONES: [(usize, usize); NUM_FBI_BONES] = [
    (1, 2),
    (2, 3),
    (4, 5),
    (5, 6),
    (11, 12),
    (12, 13),
    (14, 15),
    (15, 16),
    (0, 7),
    (7, 8),
    (8, 9),
    (9, 10),
    (8, 11),
    (8, 14),
];

/// Joint set, parent links and the ordered list of FBI bones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyFile", into = "TopologyFile")]
pub struct SkeletonTopology {
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    fbi_bones: Vec<(usize, usize)>,
    root: usize,
}

/// On-disk form: `{"joints": [...], "parents": [...], "fbi_bones": [[p,c],...], "root": idx}`,
/// with `-1` marking the root's parent.
#[derive(Serialize, Deserialize)]
struct TopologyFile {
    joints: Vec<String>,
    parents: Vec<i64>,
    fbi_bones: Vec<[usize; 2]>,
    root: usize,
}

impl TryFrom<TopologyFile> for SkeletonTopology {
    type Error = Error;

    fn try_from(file: TopologyFile) -> Result<Self> {
        let parents = file
            .parents
            .iter()
            .map(|&p| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(Error::Topology(format!("invalid parent index {p}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        SkeletonTopology::new(
            file.joints,
            parents,
            file.fbi_bones.iter().map(|b| (b[0], b[1])).collect(),
            file.root,
        )
    }
}

impl From<SkeletonTopology> for TopologyFile {
    fn from(t: SkeletonTopology) -> Self {
        TopologyFile {
            joints: t.joint_names,
            parents: t.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            fbi_bones: t.fbi_bones.iter().map(|&(p, c)| [p, c]).collect(),
            root: t.root,
        }
    }
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        Self::h36m()
    }
}

impl SkeletonTopology {
    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        fbi_bones: Vec<(usize, usize)>,
        root: usize,
    ) -> Result<Self> {
        let n = joint_names.len();
        if n == 0 {
            return Err(Error::Topology("no joints".into()));
        }
        if parents.len() != n {
            return Err(Error::Topology(format!(
                "{} parents for {} joints",
                parents.len(),
                n
            )));
        }
        if root >= n {
            return Err(Error::Topology(format!("root {root} out of range")));
        }
        for (j, p) in parents.iter().enumerate() {
            match (j == root, p) {
                (true, Some(_)) => return Err(Error::Topology("root has a parent".into())),
                (false, None) => {
                    return Err(Error::Topology(format!("joint {j} has no parent")))
                }
                (false, Some(p)) if *p >= n => {
                    return Err(Error::Topology(format!("joint {j} parent {p} out of range")))
                }
                _ => {}
            }
        }
        // Every chain of parents must reach the root within n steps.
        for start in 0..n {
            let mut j = start;
            let mut steps = 0;
            while let Some(p) = parents[j] {
                j = p;
                steps += 1;
                if steps > n {
                    return Err(Error::Topology(format!("cycle through joint {start}")));
                }
            }
            if j != root {
                return Err(Error::Topology(format!("joint {start} not connected to root")));
            }
        }
        for &(p, c) in &fbi_bones {
            if p >= n || c >= n || p == c {
                return Err(Error::Topology(format!("invalid fbi bone ({p}, {c})")));
            }
        }
        Ok(Self {
            joint_names,
            parents,
            fbi_bones,
            root,
        })
    }

    /// The 17-joint Human3.6M skeleton with its 14 FBI bones.
    pub fn h36m() -> Self {
        Self::new(
            H36M_JOINTS.iter().map(|s| s.to_string()).collect(),
            H36M_PARENTS.to_vec(),
            H36M_FBI_BONES.to_vec(),
            0,
        )
        .expect("built-in topology is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn num_fbi_bones(&self) -> usize {
        self.fbi_bones.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn fbi_bones(&self) -> &[(usize, usize)] {
        &self.fbi_bones
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.num_joints();
        let mut order = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        order.push(self.root);
        placed[self.root] = true;
        while order.len() < n {
            for j in 0..n {
                if !placed[j] && self.parents[j].is_some_and(|p| placed[p]) {
                    placed[j] = true;
                    order.push(j);
                }
            }
        }
        order
    }

    /// Stable hex digest of the JSON form; stamped into dataset headers.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("topology serializes");
        crate::io::sha256_hex(json.as_bytes())
    }
}

/// Camera-frame 3D joint positions in millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub joints: Vec<[f64; 3]>,
}

/// Image-plane joint positions in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub joints: Vec<[f64; 2]>,
}

impl Pose3D {
    pub fn new(joints: Vec<[f64; 3]>) -> Self {
        Self { joints }
    }

    pub fn zeros(num_joints: usize) -> Self {
        Self {
            joints: vec![[0.0; 3]; num_joints],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::Format(format!(
                "flat 3D pose length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Ok(Self {
            joints: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        Self {
            joints: self
                .joints
                .iter()
                .map(|j| [j[0] + offset[0], j[1] + offset[1], j[2] + offset[2]])
                .collect(),
        }
    }

    pub fn depths(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j[2]).collect()
    }
}

impl Pose2D {
    pub fn new(joints: Vec<[f64; 2]>) -> Self {
        Self { joints }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::Format(format!(
                "flat 2D pose length {} is odd",
                flat.len()
            )));
        }
        Ok(Self {
            joints: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        })
    }
}

/// Translates the pose so the root joint sits at the origin.
pub fn root_relative(pose: &Pose3D, topo: &SkeletonTopology) -> Pose3D {
    let r = pose.joints[topo.root()];
    let mut out = pose.translated([-r[0], -r[1], -r[2]]);
    // Exact zero even when r contains signed zeros or rounding noise.
    out.joints[topo.root()] = [0.0; 3];
    out
}

/// Mean per-joint Euclidean distance (mm). Both poses are taken as given;
/// see [`mpjpe_aligned`] for the root-aligned protocol.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    if pred.num_joints() != gt.num_joints() {
        return Err(Error::Dimension {
            what: "mpjpe joint count",
            expected: gt.num_joints(),
            got: pred.num_joints(),
        });
    }
    if gt.num_joints() == 0 {
        return Err(Error::Dimension {
            what: "mpjpe joint count",
            expected: 1,
            got: 0,
        });
    }
    let total: f64 = pred
        .joints
        .iter()
        .zip(&gt.joints)
        .map(|(a, b)| distance3(a, b))
        .sum();
    Ok(total / gt.num_joints() as f64)
}

/// MPJPE after root-relative alignment of both poses.
pub fn mpjpe_aligned(pred: &Pose3D, gt: &Pose3D, topo: &SkeletonTopology) -> Result<f64> {
    if pred.num_joints() != topo.num_joints() || gt.num_joints() != topo.num_joints() {
        return Err(Error::Dimension {
            what: "mpjpe joint count",
            expected: topo.num_joints(),
            got: pred.num_joints().min(gt.num_joints()),
        });
    }
    mpjpe(&root_relative(pred, topo), &root_relative(gt, topo))
}

/// Vector from parent to child of FBI bone `i`.
pub fn bone_vector(pose: &Pose3D, topo: &SkeletonTopology, i: usize) -> Result<[f64; 3]> {
    let &(p, c) = topo.fbi_bones().get(i).ok_or(Error::IndexOutOfRange {
        what: "fbi bones",
        index: i,
        len: topo.num_fbi_bones(),
    })?;
    if p >= pose.num_joints() || c >= pose.num_joints() {
        return Err(Error::Dimension {
            what: "pose joint count",
            expected: topo.num_joints(),
            got: pose.num_joints(),
        });
    }
    let (a, b) = (pose.joints[p], pose.joints[c]);
    Ok([b[0] - a[0], b[1] - a[1], b[2] - a[2]])
}

pub(crate) fn distance3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

pub(crate) fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
