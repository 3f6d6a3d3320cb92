//! Pipeline configuration as a single JSON document. Missing fields take
//! the KITTI-style defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attn::AttnConfig;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::heads::{HeadConfig, LossWeights};
use crate::pcio::RangeSpec;
use crate::roipool::PoolConfig;
use crate::voxel::{ConvMapSpec, VoxelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdvConfig {
    pub range: RangeSpec,
    /// Level-1 voxel size in meters.
    pub voxel_size: Vec3,
    /// Downsampling steps producing levels 2, 3, ...
    pub convs: Vec<ConvMapSpec>,
    pub pool: PoolConfig,
    pub attn: AttnConfig,
    pub head: HeadConfig,
    pub loss: LossWeights,
    pub nms_threshold: f64,
}

impl Default for PdvConfig {
    fn default() -> Self {
        Self {
            range: RangeSpec::kitti(),
            voxel_size: [0.05, 0.05, 0.1],
            convs: vec![ConvMapSpec::with_stride(2); 3],
            pool: PoolConfig::default(),
            attn: AttnConfig::default(),
            head: HeadConfig::default(),
            loss: LossWeights::default(),
            nms_threshold: 0.1,
        }
    }
}

impl PdvConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        self.base_spec()?;
        for c in &self.convs {
            c.validate()?;
        }
        self.pool.validate()?;
        self.attn.validate()?;
        self.loss.validate()?;
        if self.attn.encoder.d_model != self.pool.feature_width() {
            return Err(Error::Config(format!(
                "encoder width {} must equal pooled feature width {}",
                self.attn.encoder.d_model,
                self.pool.feature_width()
            )));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::Config(format!("nms threshold must be in [0, 1], got {}", self.nms_threshold)));
        }
        Ok(())
    }

    /// Level-1 grid covering the range.
    pub fn base_spec(&self) -> Result<VoxelSpec> {
        VoxelSpec::from_range(&self.range, self.voxel_size)
    }
}
