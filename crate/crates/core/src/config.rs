use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AvError, Result};

/// Stage-I (classification head) settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_lr: f64,
    pub feature_dim: usize,
    pub rng_seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            epochs: 50,
            batch_size: 8,
            adam_lr: 1e-4,
            feature_dim: 100,
            rng_seed: 0,
        }
    }
}

/// How the label-free transform weights its neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborWeighting {
    /// Smooth-kNN membership strengths, as used for the training graph.
    Membership,
    InverseDistance,
}

/// Stage-II (anchored embedding) settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub k_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub init_sigma: f64,
    pub opt_lr: f64,
    pub epochs: usize,
    pub negative_sample_rate: usize,
    /// Membership penalty exponent for edges joining two different labels.
    pub far_dist: f64,
    /// Membership penalty exponent for edges touching an unlabeled point.
    pub unknown_dist: f64,
    pub rng_seed: u64,
    /// Move both endpoints of an attractive edge instead of only the head.
    pub move_both: bool,
    pub transform_weighting: NeighborWeighting,
    pub layout_scale: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            k_neighbors: 20,
            min_dist: 0.1,
            spread: 1.0,
            init_sigma: 0.01,
            opt_lr: 1e-2,
            epochs: 500,
            negative_sample_rate: 5,
            far_dist: 5.0,
            unknown_dist: 1.0,
            rng_seed: 0,
            move_both: false,
            transform_weighting: NeighborWeighting::Membership,
            layout_scale: 16.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub head: HeadConfig,
    pub embed: EmbedConfig,
}

impl PipelineConfig {
    /// Sets every seed in the configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.head.rng_seed = seed;
        self.embed.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.head;
        if h.batch_size == 0 {
            return Err(AvError::input("head.batch_size must be positive"));
        }
        if h.feature_dim == 0 {
            return Err(AvError::input("head.feature_dim must be positive"));
        }
        if !(h.adam_lr.is_finite() && h.adam_lr > 0.0) {
            return Err(AvError::input("head.adam_lr must be positive"));
        }
        let e = &self.embed;
        if e.k_neighbors == 0 {
            return Err(AvError::input("embed.k_neighbors must be positive"));
        }
        let positive = [
            ("embed.min_dist", e.min_dist),
            ("embed.spread", e.spread),
            ("embed.opt_lr", e.opt_lr),
            ("embed.far_dist", e.far_dist),
            ("embed.layout_scale", e.layout_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(AvError::input(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("embed.init_sigma", e.init_sigma),
            ("embed.unknown_dist", e.unknown_dist),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AvError::input(format!("{name} must be non-negative, got {v}")));
            }
        }
        if e.min_dist >= e.spread {
            return Err(AvError::input("embed.min_dist must be smaller than embed.spread"));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AvError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
