//! Forward-or-backward bone information (FBI).
//!
//! Each FBI bone gets one of three statuses relative to the camera: the
//! child joint is nearer the camera (forward), farther away (backward), or
//! the bone lies roughly in the image plane (parallel).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{bone_vector, norm3, Pose3D, SkeletonTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum BoneStatus {
    Forward = 0,
    Backward = 1,
    Parallel = 2,
}

impl BoneStatus {
    pub const ALL: [BoneStatus; 3] = [BoneStatus::Forward, BoneStatus::Backward, BoneStatus::Parallel];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut row = [0.0; 3];
        row[self.index()] = 1.0;
        row
    }

    /// Swaps forward and backward; parallel stays.
    pub fn mirrored(self) -> Self {
        match self {
            BoneStatus::Forward => BoneStatus::Backward,
            BoneStatus::Backward => BoneStatus::Forward,
            BoneStatus::Parallel => BoneStatus::Parallel,
        }
    }
}

impl From<BoneStatus> for u8 {
    fn from(s: BoneStatus) -> u8 {
        s as u8
    }
}

impl TryFrom<u8> for BoneStatus {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(BoneStatus::Forward),
            1 => Ok(BoneStatus::Backward),
            2 => Ok(BoneStatus::Parallel),
            v => Err(Error::Format(format!("FBI class index {v} not in 0..3"))),
        }
    }
}

impl TryFrom<usize> for BoneStatus {
    type Error = Error;

    fn try_from(v: usize) -> Result<Self> {
        u8::try_from(v)
            .map_err(|_| Error::Format(format!("FBI class index {v} not in 0..3")))
            .and_then(BoneStatus::try_from)
    }
}

/// The m×3 one-hot FBI matrix, stored as one status per bone.
///
/// Serialized as a plain list of class indices, e.g. `[0,2,1,...]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FbiMatrix(pub Vec<BoneStatus>);

impl FbiMatrix {
    pub fn num_bones(&self) -> usize {
        self.0.len()
    }

    pub fn statuses(&self) -> &[BoneStatus] {
        &self.0
    }

    /// Row-major m×3 one-hot matrix.
    pub fn one_hot_rows(&self) -> Vec<[f64; 3]> {
        self.0.iter().map(|s| s.one_hot()).collect()
    }

    pub fn to_one_hot_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|s| s.one_hot()).collect()
    }

    /// Rebuilds a matrix from one-hot rows; rejects rows that are not one-hot.
    pub fn from_one_hot_rows(rows: &[[f64; 3]]) -> Result<Self> {
        rows.iter()
            .enumerate()
            .map(|(i, row)| {
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || zeros != 2 {
                    return Err(Error::Format(format!("FBI row {i} is not one-hot: {row:?}")));
                }
                BoneStatus::try_from(row.iter().position(|&v| v == 1.0).unwrap())
            })
            .collect::<Result<Vec<_>>>()
            .map(FbiMatrix)
    }

    pub fn class_indices(&self) -> Vec<usize> {
        self.0.iter().map(|s| s.index()).collect()
    }

    pub fn from_class_indices(indices: &[usize]) -> Result<Self> {
        indices
            .iter()
            .map(|&i| BoneStatus::try_from(i))
            .collect::<Result<Vec<_>>>()
            .map(FbiMatrix)
    }
}

/// Threshold τ: a bone whose |Δz| is at most τ·length counts as parallel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbiLabelConfig {
    pub parallel_fraction: f64,
}

impl Default for FbiLabelConfig {
    fn default() -> Self {
        Self {
            parallel_fraction: 0.15,
        }
    }
}

impl FbiLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.parallel_fraction) {
            return Err(Error::Config(format!(
                "parallel_fraction must be in [0, 1), got {}",
                self.parallel_fraction
            )));
        }
        Ok(())
    }
}

pub fn classify_bone(bone: [f64; 3], cfg: &FbiLabelConfig) -> BoneStatus {
    let length = norm3(&bone);
    let dz = bone[2];
    if length == 0.0 || dz.abs() <= cfg.parallel_fraction * length {
        BoneStatus::Parallel
    } else if dz < 0.0 {
        BoneStatus::Forward
    } else {
        BoneStatus::Backward
    }
}

pub fn label_fbi(pose: &Pose3D, topo: &SkeletonTopology, cfg: &FbiLabelConfig) -> Result<FbiMatrix> {
    (0..topo.num_fbi_bones())
        .map(|i| bone_vector(pose, topo, i).map(|b| classify_bone(b, cfg)))
        .collect::<Result<Vec<_>>>()
        .map(FbiMatrix)
}

/// Fraction of bones whose argmax class matches the ground truth.
/// Ties resolve to the lowest class index.
pub fn fbi_accuracy(pred: &[[f64; 3]], gt: &FbiMatrix) -> Result<f64> {
    if pred.len() != gt.num_bones() {
        return Err(Error::Dimension {
            what: "fbi bone count",
            expected: gt.num_bones(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let correct = pred
        .iter()
        .zip(gt.statuses())
        .filter(|(row, s)| argmax3(row) == s.index())
        .count();
    Ok(correct as f64 / pred.len() as f64)
}

pub fn argmax3(row: &[f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if row[k] > row[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_convention() {
        let cfg = FbiLabelConfig::default();
        assert_eq!(classify_bone([0.0, 0.0, -100.0], &cfg), BoneStatus::Forward);
        assert_eq!(classify_bone([0.0, 0.0, -100.0], &cfg).one_hot(), [1.0, 0.0, 0.0]);
        assert_eq!(classify_bone([0.0, 0.0, 100.0], &cfg), BoneStatus::Backward);
        assert_eq!(classify_bone([100.0, 0.0, 0.0], &cfg).one_hot(), [0.0, 0.0, 1.0]);
        assert_eq!(classify_bone([0.0; 3], &cfg), BoneStatus::Parallel);
        assert_eq!(classify_bone([0.0, 100.0, 16.0], &cfg), BoneStatus::Backward);
        // Exactly at the threshold counts as parallel.
        assert_eq!(classify_bone([4.0, 0.0, 3.0], &FbiLabelConfig { parallel_fraction: 0.6 }), BoneStatus::Parallel);
    }

    #[test]
    fn config_validation() {
        assert!(FbiLabelConfig { parallel_fraction: 1.0 }.validate().is_err());
        assert!(FbiLabelConfig { parallel_fraction: -0.1 }.validate().is_err());
        assert!(FbiLabelConfig { parallel_fraction: 0.0 }.validate().is_ok());
    }

    #[test]
    fn accuracy_counts() {
        let gt = FbiMatrix(vec![BoneStatus::Forward; 14]);
        let rows = gt.one_hot_rows();
        assert_eq!(fbi_accuracy(&rows, &gt).unwrap(), 1.0);
        let wrong = vec![[0.0, 1.0, 0.0]; 14];
        assert_eq!(fbi_accuracy(&wrong, &gt).unwrap(), 0.0);
        let mut half = rows.clone();
        for row in half.iter_mut().take(7) {
            *row = [0.1, 0.2, 0.7];
        }
        assert_eq!(fbi_accuracy(&half, &gt).unwrap(), 0.5);
        // A three-way tie resolves to class 0.
        let tie = vec![[1.0 / 3.0; 3]; 14];
        assert_eq!(fbi_accuracy(&tie, &gt).unwrap(), 1.0);
        assert!(fbi_accuracy(&rows[..13], &gt).is_err());
    }

    #[test]
    fn json_is_class_index_list() {
        let m = FbiMatrix(vec![BoneStatus::Forward, BoneStatus::Parallel, BoneStatus::Backward]);
        assert_eq!(serde_json::to_string(&m).unwrap(), "[0,2,1]");
        let back: FbiMatrix = serde_json::from_str("[0,2,1]").unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<FbiMatrix>("[3]").is_err());
    }

    #[test]
    fn one_hot_round_trip_and_rejects() {
        let m = FbiMatrix(vec![BoneStatus::Backward, BoneStatus::Parallel]);
        assert_eq!(FbiMatrix::from_one_hot_rows(&m.one_hot_rows()).unwrap(), m);
        assert!(FbiMatrix::from_one_hot_rows(&[[0.5, 0.5, 0.0]]).is_err());
    }
}
