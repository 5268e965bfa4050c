//! Size-penalized accuracy objective and accuracy/size Pareto fronts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per megabyte in printed reports.
pub const BYTES_PER_MB: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub accuracy: f64,
    pub size_bytes: u64,
    pub target_bytes: u64,
    pub fitness: f64,
}

/// `F = acc * (S / T)^gamma` with `gamma = 0` when `S <= T`, else `-1`.
pub fn fitness(accuracy: f64, size_bytes: u64, target_bytes: u64) -> Result<FitnessRecord> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::InvalidArgument(format!("accuracy {accuracy} outside [0, 1]")));
    }
    if size_bytes == 0 || target_bytes == 0 {
        return Err(Error::InvalidArgument("sizes must be positive".into()));
    }
    let fitness = if size_bytes <= target_bytes {
        accuracy
    } else {
        accuracy * target_bytes as f64 / size_bytes as f64
    };
    Ok(FitnessRecord {
        accuracy,
        size_bytes,
        target_bytes,
        fitness,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub accuracy: f64,
    pub size_bytes: u64,
}

impl ParetoPoint {
    pub fn new(accuracy: f64, size_bytes: u64) -> Self {
        Self {
            accuracy,
            size_bytes,
        }
    }

    /// At least as accurate and as small, strictly better in one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.accuracy >= other.accuracy
            && self.size_bytes <= other.size_bytes
            && (self.accuracy > other.accuracy || self.size_bytes < other.size_bytes)
    }
}

/// Indices of the non-dominated points, ordered by size ascending.
///
/// Duplicate points keep only their earliest occurrence.
pub fn pareto_indices(points: &[ParetoPoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .size_bytes
            .cmp(&points[b].size_bytes)
            .then(points[b].accuracy.total_cmp(&points[a].accuracy))
    });
    let mut best = f64::NEG_INFINITY;
    let mut front = Vec::new();
    for i in order {
        if points[i].accuracy > best {
            best = points[i].accuracy;
            front.push(i);
        }
    }
    front
}

pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    pareto_indices(points).into_iter().map(|i| points[i]).collect()
}
