//! Per-voxel affordance values on a sparse structure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{Occupancy, VoxelIndex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeatmapError {
    #[error("positions ({0}) and values ({1}) differ in length")]
    Length(usize, usize),
    #[error("positions must be strictly sorted and inside r={0}")]
    Positions(usize),
    #[error("value {0} at {1:?} is not a probability")]
    NotProbability(f64, VoxelIndex),
    #[error("non-finite heat value")]
    NonFinite,
}

/// What the stored values mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatKind {
    /// Post-sigmoid probabilities in `[0, 1]`.
    Probability,
    /// Pre-sigmoid logits.
    Logit,
    /// Arbitrary non-probability weights (e.g. a rescaled probability map).
    Weight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceHeatmap {
    pub resolution: usize,
    pub kind: HeatKind,
    pub positions: Vec<VoxelIndex>,
    pub values: Vec<f64>,
}

impl AffordanceHeatmap {
    pub fn new(
        resolution: usize,
        kind: HeatKind,
        positions: Vec<VoxelIndex>,
        values: Vec<f64>,
    ) -> Result<Self, HeatmapError> {
        let heat = Self {
            resolution,
            kind,
            positions,
            values,
        };
        heat.validate()?;
        Ok(heat)
    }

    pub fn validate(&self) -> Result<(), HeatmapError> {
        if self.positions.len() != self.values.len() {
            return Err(HeatmapError::Length(
                self.positions.len(),
                self.values.len(),
            ));
        }
        if self.positions.windows(2).any(|w| w[0] >= w[1])
            || self
                .positions
                .iter()
                .any(|p| p.iter().any(|&c| c >= self.resolution))
        {
            return Err(HeatmapError::Positions(self.resolution));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(HeatmapError::NonFinite);
        }
        if self.kind == HeatKind::Probability {
            if let Some((p, v)) = self
                .positions
                .iter()
                .zip(&self.values)
                .find(|(_, v)| !(0.0..=1.0).contains(*v))
            {
                return Err(HeatmapError::NotProbability(*v, *p));
            }
        }
        Ok(())
    }

    /// All-zero probability map over an occupancy.
    pub fn zeros(occupancy: &Occupancy) -> Self {
        Self {
            resolution: occupancy.resolution(),
            kind: HeatKind::Probability,
            positions: occupancy.indices().to_vec(),
            values: vec![0.0; occupancy.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn get(&self, index: &VoxelIndex) -> Option<f64> {
        self.positions
            .binary_search(index)
            .ok()
            .map(|i| self.values[i])
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn support(&self) -> Occupancy {
        Occupancy::new(self.resolution, self.positions.clone()).expect("validated positions")
    }

    /// Every value multiplied by `c`. The result is a [`HeatKind::Weight`] map
    /// unless it is still a valid probability map.
    pub fn scaled(&self, c: f64) -> Self {
        let values: Vec<f64> = self.values.iter().map(|v| v * c).collect();
        let kind = match self.kind {
            HeatKind::Probability if values.iter().all(|v| (0.0..=1.0).contains(v)) => {
                HeatKind::Probability
            }
            HeatKind::Logit => HeatKind::Logit,
            _ => HeatKind::Weight,
        };
        Self {
            resolution: self.resolution,
            kind,
            positions: self.positions.clone(),
            values,
        }
    }

    /// Positions whose value is at least `tau`.
    pub fn threshold(&self, tau: f64) -> Occupancy {
        let idx = self
            .positions
            .iter()
            .zip(&self.values)
            .filter(|(_, &v)| v >= tau)
            .map(|(p, _)| *p)
            .collect();
        Occupancy::new(self.resolution, idx).expect("validated positions")
    }

    pub fn is_subset_of(&self, occupancy: &Occupancy) -> bool {
        self.resolution == occupancy.resolution()
            && self.positions.iter().all(|p| occupancy.contains(p))
    }
}
