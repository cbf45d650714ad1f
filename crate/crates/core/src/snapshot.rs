//! Immutable per-epoch view of the projected validation subsample.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::guidance::{ClassStats, LossBreakdown};

pub type PointId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPoint {
    pub point_id: PointId,
    pub position: [f32; 2],
    pub label: usize,
    pub predicted_label: usize,
    pub misclassified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSnapshot {
    pub epoch: u32,
    pub points: Vec<SnapshotPoint>,
    pub class_stats: ClassStats,
    pub breakdown: LossBreakdown,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub layout_id: Option<u64>,
}

impl LatentSnapshot {
    pub fn point(&self, id: PointId) -> Option<&SnapshotPoint> {
        self.points.iter().find(|p| p.point_id == id)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.label).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.class_stats.classes.iter().map(|s| s.class).collect()
    }

    pub fn subsample_accuracy(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let wrong = self.points.iter().filter(|p| p.misclassified).count();
        1.0 - wrong as f64 / self.points.len() as f64
    }
}
