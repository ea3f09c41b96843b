use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::grid::{Voxel, VoxelGrid, VOXEL_BYTES};
use super::TsdfError;
use crate::geometry::{Intrinsics, Pose};
use crate::image::{valid_depth, DepthImage, Mask};

/// Tunables for object volume creation, growth and fusion.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ObjectParams {
    pub init_resolution: usize,
    pub max_resolution: usize,
    pub max_size: f64,
    /// Smallest edge length for a fresh volume, guards against a degenerate
    /// (single point or planar) percentile box.
    pub min_size: f64,
    pub size_margin: f64,
    pub percentile_low: f64,
    pub percentile_high: f64,
    pub erosion_radius: usize,
    pub max_init_distance: f64,
    pub max_overlap_iou: f64,
    /// Truncation distance in voxels.
    pub truncation_voxels: f64,
    pub gate_valid_fraction: f64,
    pub gate_rmse: f64,
    pub existence_min_pixels: usize,
    pub existence_delete_below: f64,
    pub semantic_mode: SemanticMode,
}

impl Default for ObjectParams {
    fn default() -> Self {
        Self {
            init_resolution: 64,
            max_resolution: 128,
            max_size: 3.0,
            min_size: 0.05,
            size_margin: 1.5,
            percentile_low: 10.0,
            percentile_high: 90.0,
            erosion_radius: 2,
            max_init_distance: 5.0,
            max_overlap_iou: 0.5,
            truncation_voxels: 4.0,
            gate_valid_fraction: 0.5,
            gate_rmse: 0.03,
            existence_min_pixels: 2500,
            existence_delete_below: 0.1,
            semantic_mode: SemanticMode::Average,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum SemanticMode {
    #[default]
    Average,
    Multiplicative,
}

/// Why a detection did not spawn a new volume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitRejection {
    EmptyCloud,
    TooFar { distance: f64 },
    Overlap { existing_id: u32, iou: f64 },
}

/// Tracking quality of the pixels that belong to one volume.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TargetQuality {
    pub valid_fraction: f64,
    pub rmse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntegrationOutcome {
    Integrated { voxels: usize },
    Gated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeKind {
    Unchanged,
    Grown,
    Reinitialised,
}

/// Result of a resize. `new_from_old` maps old volume coordinates into the
/// new volume frame and must be pushed into the pose graph.
#[derive(Clone, Copy, Debug)]
pub struct ResizeOutcome {
    pub kind: ResizeKind,
    pub new_from_old: Pose,
}

/// World-space axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn cube(centre: Vector3<f64>, edge: f64) -> Self {
        let h = Vector3::repeat(0.5 * edge);
        Self {
            min: centre - h,
            max: centre + h,
        }
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<Self> {
        let mut it = pts.into_iter();
        let first = it.next()?;
        let mut b = Self {
            min: *first,
            max: *first,
        };
        for p in it {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        Some(b)
    }

    pub fn volume(&self) -> f64 {
        let d = (self.max - self.min).map(|x| x.max(0.0));
        d.x * d.y * d.z
    }

    pub fn iou(&self, other: &Aabb) -> f64 {
        let inter = Aabb {
            min: self.min.sup(&other.min),
            max: self.max.inf(&other.max),
        }
        .volume();
        let union = self.volume() + other.volume() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Linear-interpolation percentile of an unsorted sample, `q` in [0, 100].
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = (q / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Per-axis low/high percentile box of a point cloud.
pub fn percentile_box(points: &[Vector3<f64>], low: f64, high: f64) -> Option<Aabb> {
    if points.is_empty() {
        return None;
    }
    let mut min = Vector3::zeros();
    let mut max = Vector3::zeros();
    let mut buf: Vec<f64> = Vec::with_capacity(points.len());
    for a in 0..3 {
        buf.clear();
        buf.extend(points.iter().map(|p| p[a]));
        min[a] = percentile(&mut buf, low);
        max[a] = percentile(&mut buf, high);
    }
    Some(Aabb { min, max })
}

/// Backprojects the valid-depth pixels of an eroded mask into world points.
pub fn mask_cloud(
    mask: &Mask,
    depth: &DepthImage,
    camera_pose: &Pose,
    k: &Intrinsics,
    erosion_radius: usize,
) -> Vec<Vector3<f64>> {
    let eroded = mask.eroded(erosion_radius);
    let mut pts = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !eroded.get(x, y) {
                continue;
            }
            let d = *depth.get(x, y);
            if valid_depth(d) {
                let pc = k.backproject_unchecked(x as f64, y as f64, d as f64);
                pts.push(camera_pose.transform_point(&pc));
            }
        }
    }
    pts
}

#[derive(Clone, Debug)]
pub struct ObjectVolume {
    pub id: u32,
    /// Object to world.
    pub pose: Pose,
    grid: VoxelGrid,
    /// Associated / not-associated observation counts.
    pub existence: (u32, u32),
    pub class_distribution: Vec<f64>,
    pub detection_count: u32,
}

impl ObjectVolume {
    /// Empty volume with identity orientation centred at `centre`.
    pub fn new(id: u32, centre: Vector3<f64>, size: f64, resolution: usize, num_classes: usize) -> Self {
        assert!(resolution % 2 == 0 && resolution > 0);
        Self {
            id,
            pose: Pose::from_translation(centre),
            grid: VoxelGrid::new(resolution, size / resolution as f64),
            existence: (1, 1),
            class_distribution: vec![1.0 / num_classes.max(1) as f64; num_classes.max(1)],
            detection_count: 0,
        }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut VoxelGrid {
        &mut self.grid
    }

    pub fn resolution(&self) -> usize {
        self.grid.resolution()
    }

    pub fn voxel_size(&self) -> f64 {
        self.grid.voxel_size()
    }

    pub fn size(&self) -> f64 {
        self.grid.size()
    }

    pub fn truncation(&self, params: &ObjectParams) -> f64 {
        params.truncation_voxels * self.voxel_size()
    }

    /// World axis-aligned box enclosing the (possibly rotated) cube.
    pub fn world_aabb(&self) -> Aabb {
        let h = self.grid.half_extent();
        let corners = (0..8).map(|c| {
            let l = Vector3::new(
                if c & 1 == 0 { -h } else { h },
                if c & 2 == 0 { -h } else { h },
                if c & 4 == 0 { -h } else { h },
            );
            self.pose.transform_point(&l)
        });
        let pts: Vec<_> = corners.collect();
        Aabb::from_points(&pts).expect("eight corners")
    }

    pub fn foreground_probability(&self, i: usize, j: usize, k: usize) -> f64 {
        self.grid.voxel(i, j, k).foreground_probability()
    }

    /// Trilinear foreground probability at a world point.
    pub fn foreground_probability_at(&self, world: &Vector3<f64>) -> Option<f64> {
        let p = self.pose.inverse().transform_point(world);
        self.grid.sample_foreground(&p)
    }

    pub fn memory_bytes(&self) -> usize {
        self.grid.bytes()
    }

    pub fn passes_gate(quality: &TargetQuality, params: &ObjectParams) -> bool {
        quality.valid_fraction >= params.gate_valid_fraction && quality.rmse < params.gate_rmse
    }

    /// Depth fusion over the whole volume, skipped when the tracking gate
    /// fails.
    pub fn integrate_depth(
        &mut self,
        depth: &DepthImage,
        camera_pose: &Pose,
        k: &Intrinsics,
        quality: &TargetQuality,
        params: &ObjectParams,
    ) -> IntegrationOutcome {
        if !Self::passes_gate(quality, params) {
            return IntegrationOutcome::Gated;
        }
        let voxels = self.integrate_depth_ungated(depth, camera_pose, k, params);
        IntegrationOutcome::Integrated { voxels }
    }

    pub fn integrate_depth_ungated(
        &mut self,
        depth: &DepthImage,
        camera_pose: &Pose,
        k: &Intrinsics,
        params: &ObjectParams,
    ) -> usize {
        let mu = self.truncation(params);
        self.grid.integrate(&self.pose, camera_pose, depth, k, mu)
    }

    pub fn fuse_foreground(
        &mut self,
        mask: &Mask,
        depth: &DepthImage,
        camera_pose: &Pose,
        k: &Intrinsics,
        params: &ObjectParams,
    ) -> usize {
        let mu = self.truncation(params);
        self.grid
            .fuse_foreground(&self.pose, camera_pose, depth, mask, k, mu)
    }

    pub fn existence_probability(&self) -> f64 {
        let (e, d) = (self.existence.0 as f64, self.existence.1 as f64);
        e / (e + d)
    }

    /// Updates the existence counts; returns `true` when the volume should be
    /// deleted.
    pub fn update_existence(&mut self, visible_pixels: usize, associated: bool, params: &ObjectParams) -> bool {
        if visible_pixels > params.existence_min_pixels {
            if associated {
                self.existence.0 += 1;
            } else {
                self.existence.1 += 1;
            }
        }
        self.existence_probability() < params.existence_delete_below
    }

    pub fn fuse_semantics(&mut self, dist: &[f64], mode: SemanticMode) -> Result<(), TsdfError> {
        check_distribution(dist)?;
        if dist.len() != self.class_distribution.len() {
            return Err(TsdfError::ClassCountMismatch {
                expected: self.class_distribution.len(),
                got: dist.len(),
            });
        }
        if self.detection_count == 0 {
            self.class_distribution.copy_from_slice(dist);
        } else {
            match mode {
                SemanticMode::Average => {
                    let k = self.detection_count as f64;
                    for (p, q) in self.class_distribution.iter_mut().zip(dist) {
                        *p = (*p * k + q) / (k + 1.0);
                    }
                }
                SemanticMode::Multiplicative => {
                    let mut z = 0.0;
                    for (p, q) in self.class_distribution.iter_mut().zip(dist) {
                        *p *= q;
                        z += *p;
                    }
                    if z > 0.0 {
                        self.class_distribution.iter_mut().for_each(|p| *p /= z);
                    } else {
                        // contradictory certainties; fall back to the new evidence
                        self.class_distribution.copy_from_slice(dist);
                    }
                }
            }
        }
        self.detection_count += 1;
        Ok(())
    }

    pub fn label(&self) -> usize {
        self.class_distribution
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }

    /// Grows or recentres the volume so that it covers both the new mask
    /// cloud and the cloud raycast from the current reconstruction (world
    /// points).
    pub fn resize(
        &mut self,
        mask_cloud: &[Vector3<f64>],
        recon_cloud: &[Vector3<f64>],
        params: &ObjectParams,
    ) -> ResizeOutcome {
        let unchanged = ResizeOutcome {
            kind: ResizeKind::Unchanged,
            new_from_old: Pose::identity(),
        };
        let to_obj = self.pose.inverse();
        let local = |c: &[Vector3<f64>]| -> Vec<Vector3<f64>> {
            c.iter().map(|p| to_obj.transform_point(p)).collect()
        };
        let boxes: Vec<Aabb> = [local(mask_cloud), local(recon_cloud)]
            .iter()
            .filter_map(|c| percentile_box(c, params.percentile_low, params.percentile_high))
            .collect();
        let Some(first) = boxes.first() else {
            return unchanged;
        };
        let mut b = *first;
        for o in &boxes[1..] {
            b.min = b.min.inf(&o.min);
            b.max = b.max.sup(&o.max);
        }
        let centre = 0.5 * (b.min + b.max);
        let need = (params.size_margin * (b.max - b.min).amax())
            .min(params.max_size)
            .max(params.min_size);
        let half = self.grid.half_extent();
        let fits = (0..3).all(|a| centre[a].abs() + 0.5 * need <= half + 1e-12);
        if fits {
            return unchanged;
        }

        let v = self.voxel_size();
        let shift = centre.map(|c| (c / v).round());
        let offset = shift * v;
        let reach = (0..3)
            .map(|a| (centre[a] - offset[a]).abs() + 0.5 * need)
            .fold(0.0, f64::max);
        let mut needed = (2.0 * reach / v - 1e-9).ceil() as usize;
        needed += needed % 2;
        let old_res = self.resolution();
        let new_res = old_res.max(needed);
        let mut cap = params
            .max_resolution
            .min((params.max_size / v + 1e-9).floor() as usize);
        cap -= cap % 2;

        if new_res > cap {
            // start again at the base resolution, keeping identity and beliefs
            let new_from_old = Pose::from_translation(-centre);
            let res = params.init_resolution;
            self.grid = VoxelGrid::new(res, need / res as f64);
            self.pose = self.pose.compose(&new_from_old.inverse());
            return ResizeOutcome {
                kind: ResizeKind::Reinitialised,
                new_from_old,
            };
        }

        let mut grid = VoxelGrid::new(new_res, v);
        let delta = [0, 1, 2].map(|a| new_res as i64 / 2 - old_res as i64 / 2 - shift[a] as i64);
        let nr = new_res as i64;
        for k in 0..old_res {
            let nk = k as i64 + delta[2];
            if nk < 0 || nk >= nr {
                continue;
            }
            for j in 0..old_res {
                let nj = j as i64 + delta[1];
                if nj < 0 || nj >= nr {
                    continue;
                }
                for i in 0..old_res {
                    let ni = i as i64 + delta[0];
                    if ni < 0 || ni >= nr {
                        continue;
                    }
                    *grid.voxel_mut(ni as usize, nj as usize, nk as usize) = self.grid.voxel(i, j, k);
                }
            }
        }
        let new_from_old = Pose::from_translation(-offset);
        self.grid = grid;
        self.pose = self.pose.compose(&new_from_old.inverse());
        ResizeOutcome {
            kind: ResizeKind::Grown,
            new_from_old,
        }
    }

    /// Writes `<stem>.vox` (raw little-endian voxels, x fastest) and
    /// `<stem>.toml` (metadata).
    pub fn save(&self, stem: &Path) -> Result<(), TsdfError> {
        let meta = VolumeMeta::from(self);
        fs::write(stem.with_extension("toml"), toml::to_string(&meta)?)?;
        let mut out = std::io::BufWriter::new(fs::File::create(stem.with_extension("vox"))?);
        for v in self.grid.voxels() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, TsdfError> {
        let meta: VolumeMeta = toml::from_str(&fs::read_to_string(stem.with_extension("toml"))?)?;
        let mut raw = Vec::new();
        fs::File::open(stem.with_extension("vox"))?.read_to_end(&mut raw)?;
        let r = meta.resolution;
        if raw.len() != r * r * r * VOXEL_BYTES {
            return Err(TsdfError::Corrupt(format!(
                "expected {} voxel bytes, found {}",
                r * r * r * VOXEL_BYTES,
                raw.len()
            )));
        }
        let voxels: Vec<Voxel> = raw.chunks_exact(VOXEL_BYTES).map(Voxel::from_le_bytes).collect();
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            meta.rotation_xyzw[3],
            meta.rotation_xyzw[0],
            meta.rotation_xyzw[1],
            meta.rotation_xyzw[2],
        ));
        Ok(Self {
            id: meta.id,
            pose: Pose::from_quaternion(Vector3::from(meta.translation), &q),
            grid: VoxelGrid::from_voxels(r, meta.size / r as f64, voxels),
            existence: (meta.existence[0], meta.existence[1]),
            class_distribution: meta.class_distribution,
            detection_count: meta.detection_count,
        })
    }
}

/// Candidate volume for a new detection, or the reason it was refused.
pub fn init_object(
    id: u32,
    mask: &Mask,
    depth: &DepthImage,
    camera_pose: &Pose,
    k: &Intrinsics,
    existing: &[ObjectVolume],
    num_classes: usize,
    params: &ObjectParams,
) -> Result<ObjectVolume, InitRejection> {
    let cloud = mask_cloud(mask, depth, camera_pose, k, params.erosion_radius);
    let b = percentile_box(&cloud, params.percentile_low, params.percentile_high)
        .ok_or(InitRejection::EmptyCloud)?;
    let centre = 0.5 * (b.min + b.max);
    let size = (params.size_margin * (b.max - b.min).amax())
        .min(params.max_size)
        .max(params.min_size);
    let distance = (centre - camera_pose.translation).norm();
    if distance > params.max_init_distance {
        return Err(InitRejection::TooFar { distance });
    }
    let candidate = Aabb::cube(centre, size);
    for o in existing {
        let iou = candidate.iou(&o.world_aabb());
        if iou >= params.max_overlap_iou {
            return Err(InitRejection::Overlap {
                existing_id: o.id,
                iou,
            });
        }
    }
    Ok(ObjectVolume::new(id, centre, size, params.init_resolution, num_classes))
}

pub fn check_distribution(dist: &[f64]) -> Result<(), TsdfError> {
    let sum: f64 = dist.iter().sum();
    if dist.is_empty() || (sum - 1.0).abs() > 1e-6 || dist.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(TsdfError::InvalidDistribution(sum));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct VolumeMeta {
    id: u32,
    translation: [f64; 3],
    rotation_xyzw: [f64; 4],
    size: f64,
    resolution: usize,
    voxel_size: f64,
    existence: [u32; 2],
    detection_count: u32,
    class_distribution: Vec<f64>,
}

impl From<&ObjectVolume> for VolumeMeta {
    fn from(v: &ObjectVolume) -> Self {
        let q = v.pose.quaternion();
        Self {
            id: v.id,
            translation: v.pose.translation.into(),
            rotation_xyzw: [q.i, q.j, q.k, q.w],
            size: v.size(),
            resolution: v.resolution(),
            voxel_size: v.voxel_size(),
            existence: [v.existence.0, v.existence.1],
            detection_count: v.detection_count,
            class_distribution: v.class_distribution.clone(),
        }
    }
}
