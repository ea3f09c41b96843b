//! Per-object truncated signed distance volumes.

mod grid;
mod mesh;
mod volume;

pub use grid::{Voxel, VoxelGrid, MAX_WEIGHT, VOXEL_BYTES};
pub use mesh::{extract_mesh, marching_cubes, TriangleMesh};
pub use volume::{
    check_distribution, init_object, mask_cloud, percentile, percentile_box, Aabb, InitRejection,
    IntegrationOutcome, ObjectParams, ObjectVolume, ResizeKind, ResizeOutcome, SemanticMode,
    TargetQuality,
};

#[derive(Debug, thiserror::Error)]
pub enum TsdfError {
    #[error("class distribution sums to {0}, expected 1")]
    InvalidDistribution(f64),
    #[error("class distribution has {got} entries, volume has {expected}")]
    ClassCountMismatch { expected: usize, got: usize },
    #[error("volume dump is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    TomlRead(#[from] toml::de::Error),
    #[error(transparent)]
    TomlWrite(#[from] toml::ser::Error),
}
