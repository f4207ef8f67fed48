//! Occupancy-aware fusion weights for multi-scan conditioning.
//!
//! Each partial scan gets a binary near-surface mask at native resolution;
//! masks are mean-pooled to every network level and normalized across scans
//! per voxel, so reliable (observed) geometry dominates the fused control
//! features. Voxels unobserved by every scan fall back to uniform weights
//! via the 1e-2 guard.

use crate::error::{Error, Result};
use crate::volume::{occupancy_from_tsdf, pool_mask, VoxelField};

/// Per-level, per-condition normalized weight grids. `levels[i][j]` holds the
/// weights of condition `j` at level `i` (resolution `S / 2^i`).
#[derive(Debug, Clone)]
pub struct OccupancyPyramid {
    levels: Vec<Vec<Vec<f32>>>,
    resolutions: Vec<usize>,
}

impl OccupancyPyramid {
    /// Builds the pyramid for `num_levels` network levels from raw TSDF
    /// scans, thresholding each at its `tau`.
    pub fn from_scans(scans: &[&VoxelField], taus: &[f32], num_levels: usize) -> Result<Self> {
        if scans.is_empty() {
            return Err(Error::Parameter("at least one condition required".into()));
        }
        if taus.len() != scans.len() {
            return Err(Error::Parameter(format!(
                "got {} taus for {} conditions",
                taus.len(),
                scans.len()
            )));
        }
        let res = scans[0].resolution();
        for s in scans {
            if s.resolution() != res {
                return Err(Error::Shape(format!(
                    "condition resolution mismatch: {} vs {res}",
                    s.resolution()
                )));
            }
        }
        let native: Vec<_> = scans
            .iter()
            .zip(taus)
            .map(|(s, &tau)| occupancy_from_tsdf(s, tau))
            .collect::<Result<Vec<_>>>()?;

        let mut levels = Vec::with_capacity(num_levels);
        let mut resolutions = Vec::with_capacity(num_levels);
        for level in 0..num_levels {
            let factor = 1usize << level;
            let pooled: Vec<_> = native
                .iter()
                .map(|m| pool_mask(m, factor))
                .collect::<Result<Vec<_>>>()?;
            let level_res = res / factor;
            let n = level_res * level_res * level_res;
            let m = scans.len();
            let mut per_cond = vec![vec![0.0f32; n]; m];
            for v in 0..n {
                let mut denom = 0.0f32;
                for p in &pooled {
                    denom += p.weights()[v];
                }
                if denom > 0.0 {
                    for (j, p) in pooled.iter().enumerate() {
                        per_cond[j][v] = p.weights()[v] / denom;
                    }
                } else {
                    // All masks empty here: the 1e-2 guard normalizes every
                    // replaced weight to exactly 1/M.
                    let uniform = 1.0 / m as f32;
                    for w in per_cond.iter_mut() {
                        w[v] = uniform;
                    }
                }
            }
            levels.push(per_cond);
            resolutions.push(level_res);
        }
        Ok(Self { levels, resolutions })
    }

    /// Uniform 1/M weights at every voxel of every level (the
    /// "simple average" fusion ablation).
    pub fn uniform(num_conditions: usize, resolution: usize, num_levels: usize) -> Self {
        let w = 1.0 / num_conditions as f32;
        let mut levels = Vec::with_capacity(num_levels);
        let mut resolutions = Vec::with_capacity(num_levels);
        for level in 0..num_levels {
            let level_res = resolution >> level;
            let n = level_res * level_res * level_res;
            levels.push(vec![vec![w; n]; num_conditions]);
            resolutions.push(level_res);
        }
        Self { levels, resolutions }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_conditions(&self) -> usize {
        self.levels[0].len()
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.resolutions[level]
    }

    /// Weights of condition `j` at `level`.
    pub fn weights(&self, level: usize, j: usize) -> &[f32] {
        &self.levels[level][j]
    }
}
