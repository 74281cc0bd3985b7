use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network hyperparameters. Per-level lists are ordered finest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub channels_2d: Vec<usize>,
    pub channels_3d: Vec<usize>,
    /// Fraction of points kept by furthest-point sampling at each level.
    pub point_ratio: f64,
    pub corr_radius: usize,
    pub knn: usize,
    pub event_bins: usize,
    pub latent_dim: usize,
    /// Replaces attention fusion with concatenation plus a 1x1 mixing.
    pub concat_fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            channels_2d: vec![16, 32, 48, 64, 96],
            channels_3d: vec![16, 32, 48, 64, 96],
            point_ratio: 0.5,
            corr_radius: 4,
            knn: 16,
            event_bins: 10,
            latent_dim: 32,
            concat_fusion: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration for toy experiments and tests.
    pub fn tiny() -> Self {
        Self {
            levels: 3,
            channels_2d: vec![8, 12, 16],
            channels_3d: vec![8, 12, 16],
            point_ratio: 0.5,
            corr_radius: 3,
            knn: 8,
            event_bins: 10,
            latent_dim: 8,
            concat_fusion: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return bad(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.channels_2d.len() != self.levels || self.channels_3d.len() != self.levels {
            return bad(format!(
                "channel lists must have {} entries (got {} and {})",
                self.levels,
                self.channels_2d.len(),
                self.channels_3d.len()
            ));
        }
        if self.channels_2d.iter().chain(&self.channels_3d).any(|&c| c < 2) {
            return bad("every level needs at least 2 channels".into());
        }
        if !(self.point_ratio > 0.0 && self.point_ratio <= 1.0) {
            return bad(format!("point_ratio {} outside (0, 1]", self.point_ratio));
        }
        if self.knn == 0 || self.event_bins == 0 || self.latent_dim == 0 {
            return bad("knn, event_bins and latent_dim must be positive".into());
        }
        Ok(())
    }

    /// Point count at each level (finest first) for `n` input points.
    pub fn point_counts(&self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.levels);
        let mut cur = n;
        for _ in 0..self.levels {
            cur = ((cur as f64 * self.point_ratio).round() as usize).max(1);
            out.push(cur);
        }
        out
    }
}
