//! Per-coordinate z-scoring fitted on training data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Sample;

/// Standard deviations below this are treated as 1 (constant coordinates,
/// e.g. the root of a root-relative pose).
const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut rows_vec = Vec::new();
        for row in rows {
            if count == 0 {
                sum = vec![0.0; row.len()];
            } else if row.len() != sum.len() {
                return Err(Error::Dimension {
                    what: "standardizer row",
                    expected: sum.len(),
                    got: row.len(),
                });
            }
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            rows_vec.push(row);
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut var = vec![0.0; mean.len()];
        for row in rows_vec {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn destandardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn standardize_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, v), (m, s)) in out.iter_mut().zip(x).zip(self.mean.iter().zip(&self.std)) {
            *o = (v - m) / s;
        }
    }
}

/// Statistics for every channel the networks consume or predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseStats {
    /// Noisy 2D joints (network input), 2J coordinates.
    pub pose2d: Standardizer,
    /// Root-relative joint depths, J values.
    pub depth: Standardizer,
    /// Root-relative 3D pose, 3J coordinates.
    pub pose3d: Standardizer,
}

impl PoseStats {
    pub fn fit(train: &[Sample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let p2: Vec<Vec<f64>> = train.iter().map(|s| s.pose2d_noisy.to_flat()).collect();
        let p3: Vec<Vec<f64>> = train.iter().map(|s| s.pose3d_gt.to_flat()).collect();
        Ok(Self {
            pose2d: Standardizer::fit(p2.iter().map(|r| r.as_slice()))?,
            depth: Standardizer::fit(train.iter().map(|s| s.coarse_z_gt.as_slice()))?,
            pose3d: Standardizer::fit(p3.iter().map(|r| r.as_slice()))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_columns_get_unit_std() {
        let rows = [vec![0.0, 1.0], vec![0.0, 3.0]];
        let s = Standardizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(s.mean, vec![0.0, 2.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.standardize(&[0.0, 3.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn empty_and_ragged_rejected() {
        assert!(Standardizer::fit(std::iter::empty()).is_err());
        let rows = [vec![0.0, 1.0], vec![0.0]];
        assert!(Standardizer::fit(rows.iter().map(|r| r.as_slice())).is_err());
    }

    proptest! {
        #[test]
        fn destandardize_inverts_standardize(
            rows in prop::collection::vec(prop::collection::vec(-3000.0f64..3000.0, 6), 2..20),
            x in prop::collection::vec(-3000.0f64..3000.0, 6),
        ) {
            let s = Standardizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
            let back = s.destandardize(&s.standardize(&x));
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
