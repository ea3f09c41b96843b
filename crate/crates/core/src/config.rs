//! Every tunable of the pipeline in one TOML-serialisable structure.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::association::AssociationParams;
use crate::background::BackgroundParams;
use crate::posegraph::OptimizerParams;
use crate::raycast::RaycastParams;
use crate::reloc::RelocParams;
use crate::tracking::TrackingParams;
use crate::tsdf::ObjectParams;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error(transparent)]
    Write(#[from] toml::ser::Error),
    #[error("invalid value for {key}: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Corner detector with binary descriptors.
    #[default]
    HarrisBrief,
    /// Ground-truth landmarks; synthetic sequences only.
    Oracle,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PipelineConfig {
    /// Frames between detections; detections arrive on multiples of it.
    pub detection_cadence: usize,
    /// Apply detections on arrival from a worker thread instead of on their
    /// own frame. Runs are then not reproducible frame for frame.
    pub async_detections: bool,
    /// The run stops with a partial result after this many lost frames in a row.
    pub max_consecutive_lost: usize,
    /// Optimise the pose graph once more after the last frame.
    pub final_optimisation: bool,
    /// Halve input images this many times before processing.
    pub input_downsample: usize,
    pub seed: u64,
    pub features: FeatureKind,
    pub objects: ObjectParams,
    pub background: BackgroundParams,
    pub raycast: RaycastParams,
    pub tracking: TrackingParams,
    pub association: AssociationParams,
    pub reloc: RelocParams,
    pub optimizer: OptimizerParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detection_cadence: 30,
            async_detections: false,
            max_consecutive_lost: 90,
            final_optimisation: true,
            input_downsample: 0,
            seed: 0,
            features: FeatureKind::default(),
            objects: ObjectParams::default(),
            background: BackgroundParams::default(),
            raycast: RaycastParams::default(),
            tracking: TrackingParams::default(),
            association: AssociationParams::default(),
            reloc: RelocParams::default(),
            optimizer: OptimizerParams::default(),
        }
    }
}

fn positive(key: &'static str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            key,
            message: format!("{v} must be positive"),
        })
    }
}

fn fraction(key: &'static str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            key,
            message: format!("{v} must lie in [0, 1]"),
        })
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let o = &self.objects;
        let b = &self.background;
        let t = &self.tracking;
        let a = &self.association;
        let r = &self.reloc;
        positive("detection_cadence", self.detection_cadence as f64)?;
        positive("objects.init_resolution", o.init_resolution as f64)?;
        positive("objects.max_resolution", o.max_resolution as f64)?;
        if o.max_resolution < o.init_resolution {
            return Err(ConfigError::Invalid {
                key: "objects.max_resolution",
                message: "smaller than init_resolution".into(),
            });
        }
        positive("objects.max_size", o.max_size)?;
        positive("objects.min_size", o.min_size)?;
        positive("objects.size_margin", o.size_margin)?;
        positive("objects.max_init_distance", o.max_init_distance)?;
        positive("objects.truncation_voxels", o.truncation_voxels)?;
        positive("objects.gate_rmse", o.gate_rmse)?;
        fraction("objects.percentile_low", o.percentile_low / 100.0)?;
        fraction("objects.percentile_high", o.percentile_high / 100.0)?;
        fraction("objects.max_overlap_iou", o.max_overlap_iou)?;
        fraction("objects.gate_valid_fraction", o.gate_valid_fraction)?;
        fraction("objects.existence_delete_below", o.existence_delete_below)?;
        positive("background.resolution", b.resolution as f64)?;
        positive("background.voxel_size", b.voxel_size)?;
        positive("background.reset_distance", b.reset_distance)?;
        positive("background.truncation_voxels", b.truncation_voxels)?;
        positive("raycast.max_range", self.raycast.max_range)?;
        positive("tracking.levels", t.levels as f64)?;
        positive("tracking.max_distance", t.max_distance)?;
        positive("tracking.max_condition", t.max_condition)?;
        positive("tracking.lost_rmse", t.lost_rmse)?;
        fraction("tracking.normal_agreement", t.normal_agreement)?;
        fraction("tracking.lost_valid_fraction", t.lost_valid_fraction)?;
        fraction("tracking.lost_instance_coverage", t.lost_instance_coverage)?;
        positive("association.max_detections", a.max_detections as f64)?;
        fraction("association.min_class_prob", a.min_class_prob)?;
        fraction("association.min_overlap", a.min_overlap)?;
        positive("reloc.min_view_angle_deg", r.min_view_angle_deg)?;
        positive("reloc.object_threshold", r.object_threshold)?;
        positive("reloc.joint_threshold", r.joint_threshold)?;
        positive("reloc.iterations", r.iterations as f64)?;
        fraction("reloc.ratio_test", r.ratio_test)?;
        positive("optimizer.huber_threshold", self.optimizer.huber_threshold)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: PipelineConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: "<string>".into(),
            source,
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let c: PipelineConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = PipelineConfig::from_toml("seed = 7\n[objects]\ninit_resolution = 32\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.objects.init_resolution, 32);
        assert_eq!(c.objects.max_resolution, 128);
        assert_eq!(c.background.resolution, 256);
    }

    #[test]
    fn rejects_bad_values() {
        let e = PipelineConfig::from_toml("[background]\nvoxel_size = -1.0\n").unwrap_err();
        assert!(e.to_string().contains("background.voxel_size"), "{e}");
        assert!(PipelineConfig::from_toml("[tracking]\nnormal_agreement = 2.0\n").is_err());
        assert!(PipelineConfig::from_toml("nonsense = [").is_err());
    }

    #[test]
    fn documented_defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.objects.percentile_low, c.objects.percentile_high), (10.0, 90.0));
        assert_eq!(c.objects.size_margin, 1.5);
        assert_eq!((c.objects.init_resolution, c.objects.max_resolution), (64, 128));
        assert_eq!(c.objects.max_size, 3.0);
        assert_eq!(c.objects.max_init_distance, 5.0);
        assert_eq!(c.objects.max_overlap_iou, 0.5);
        assert_eq!(c.objects.truncation_voxels, 4.0);
        assert_eq!((c.objects.gate_valid_fraction, c.objects.gate_rmse), (0.5, 0.03));
        assert_eq!((c.objects.existence_delete_below, c.objects.existence_min_pixels), (0.1, 2500));
        let a = &c.association;
        assert_eq!((a.max_detections, a.border_band, a.min_class_prob, a.min_area, a.min_overlap), (100, 20, 0.5, 2500, 0.2));
        let b = &c.background;
        assert_eq!((b.resolution, b.voxel_size, b.forward_offset, b.reset_distance), (256, 0.02, 2.56, 1.28));
        let t = &c.tracking;
        assert_eq!((t.levels, t.iterations, t.max_distance, t.normal_agreement), (3, 5, 0.1, 0.8));
        assert_eq!((t.lost_rmse, t.lost_instance_coverage, t.lost_valid_fraction), (0.05, 0.1, 0.5));
        let r = &c.reloc;
        assert_eq!((r.min_view_angle_deg, r.class_gate), (15.0, 0.6));
        assert_eq!((r.object_min_inliers, r.object_threshold, r.joint_min_inliers, r.joint_threshold), (5, 0.02, 50, 0.05));
        assert_eq!((c.detection_cadence, c.max_consecutive_lost), (30, 90));
    }
}
