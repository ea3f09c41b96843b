//! Sparse keypoint snapshots per object and 3D-3D RANSAC relocalisation.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{align_points, Intrinsics, Pose};
use crate::image::{valid_depth, DepthImage, Image, Mask, RgbImage};

pub type Descriptor = [u8; 32];

#[derive(Debug, thiserror::Error)]
pub enum RelocError {
    #[error("need at least 3 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("point set is collinear or coincident")]
    Degenerate,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt snapshot file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum RelocFailure {
    #[error("no object passes the class gate or has snapshots")]
    NoCandidates,
    #[error("no object reached the per-object inlier count")]
    PerObjectFail,
    #[error("joint registration reached too few inliers")]
    JointFail,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RelocParams {
    /// Minimum angle between stored view directions of one object, degrees.
    pub min_view_angle_deg: f64,
    /// Class-distribution dot product an object must exceed to be tried.
    pub class_gate: f64,
    pub object_min_inliers: usize,
    pub object_threshold: f64,
    pub joint_min_inliers: usize,
    pub joint_threshold: f64,
    pub iterations: usize,
    pub ratio_test: f64,
    pub seed: u64,
}

impl Default for RelocParams {
    fn default() -> Self {
        Self {
            min_view_angle_deg: 15.0,
            class_gate: 0.6,
            object_min_inliers: 5,
            object_threshold: 0.02,
            joint_min_inliers: 50,
            joint_threshold: 0.05,
            iterations: 200,
            ratio_test: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub pixel: Vector2<f64>,
    /// Camera frame.
    pub point: Vector3<f64>,
    pub descriptor: Descriptor,
}

/// Everything an extractor may look at for one frame.
pub struct FeatureFrame<'a> {
    pub rgb: &'a RgbImage,
    pub depth: &'a DepthImage,
    pub intrinsics: &'a Intrinsics,
    /// Only the oracle extractor reads this.
    pub true_pose: Option<&'a Pose>,
}

pub trait FeatureExtractor: Send + Sync {
    fn detect(&self, frame: &FeatureFrame) -> Vec<Feature>;

    /// Index pairs (into `a`, into `b`).
    fn match_descriptors(&self, a: &[Descriptor], b: &[Descriptor]) -> Vec<(usize, usize)>;
}

pub fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.chunks_exact(8)
        .zip(b.chunks_exact(8))
        .map(|(x, y)| {
            let x = u64::from_le_bytes(x.try_into().unwrap());
            let y = u64::from_le_bytes(y.try_into().unwrap());
            (x ^ y).count_ones()
        })
        .sum()
}

const PATCH_RADIUS: i32 = 13;
const BORDER: usize = 16;

/// Harris corners with a binary intensity-comparison descriptor.
#[derive(Clone, Debug)]
pub struct HarrisBrief {
    /// Square root of the Harris response, intensity levels per pixel.
    pub threshold: f64,
    pub harris_k: f64,
    pub suppression_radius: usize,
    pub max_features: usize,
    pub ratio: f64,
    pub max_distance: u32,
    pairs: Vec<[(i32, i32); 2]>,
}

impl Default for HarrisBrief {
    fn default() -> Self {
        Self::new(10.0, 0.8)
    }
}

impl HarrisBrief {
    pub fn new(threshold: f64, ratio: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0b51_ef00);
        let n = Normal::new(0.0, PATCH_RADIUS as f64 / 2.5).unwrap();
        let mut s = || (n.sample(&mut rng).round() as i32).clamp(-PATCH_RADIUS, PATCH_RADIUS);
        let pairs = (0..256).map(|_| [(s(), s()), (s(), s())]).collect();
        Self {
            threshold,
            harris_k: 0.04,
            suppression_radius: 3,
            max_features: 500,
            ratio,
            max_distance: 80,
            pairs,
        }
    }
}

fn grey(rgb: &RgbImage) -> Image<f32> {
    Image::from_vec(
        rgb.width,
        rgb.height,
        rgb.data
            .iter()
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect(),
    )
}

/// Mean over a (2r+1)^2 window, clamped at the borders.
fn box_filter(img: &Image<f32>, r: usize) -> Image<f32> {
    let (w, h) = (img.width, img.height);
    let mut integral = vec![0.0f64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += *img.get(x, y) as f64;
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = Image::new(w, h, 0.0f32);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            out.set(x, y, (s / ((y1 - y0) * (x1 - x0)) as f64) as f32);
        }
    }
    out
}

impl HarrisBrief {
    pub fn response(&self, g: &Image<f32>) -> Image<f32> {
        let (w, h) = (g.width, g.height);
        let mut ixx = Image::new(w, h, 0.0f32);
        let mut iyy = Image::new(w, h, 0.0f32);
        let mut ixy = Image::new(w, h, 0.0f32);
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let p = |dx: i32, dy: i32| *g.get((x as i32 + dx) as usize, (y as i32 + dy) as usize);
                let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1)) / 8.0;
                let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1)) / 8.0;
                ixx.set(x, y, gx * gx);
                iyy.set(x, y, gy * gy);
                ixy.set(x, y, gx * gy);
            }
        }
        let (sxx, syy, sxy) = (box_filter(&ixx, 2), box_filter(&iyy, 2), box_filter(&ixy, 2));
        let k = self.harris_k as f32;
        Image::from_vec(
            w,
            h,
            (0..w * h)
                .map(|i| {
                    let (a, b, c) = (sxx.data[i], syy.data[i], sxy.data[i]);
                    let r = a * b - c * c - k * (a + b) * (a + b);
                    r.max(0.0).sqrt()
                })
                .collect(),
        )
    }

    fn describe(&self, smooth: &Image<f32>, x: usize, y: usize) -> Descriptor {
        let mut d = [0u8; 32];
        for (bit, [a, b]) in self.pairs.iter().enumerate() {
            let pa = *smooth.get((x as i32 + a.0) as usize, (y as i32 + a.1) as usize);
            let pb = *smooth.get((x as i32 + b.0) as usize, (y as i32 + b.1) as usize);
            if pa < pb {
                d[bit / 8] |= 1 << (bit % 8);
            }
        }
        d
    }
}

impl FeatureExtractor for HarrisBrief {
    fn detect(&self, frame: &FeatureFrame) -> Vec<Feature> {
        let g = grey(frame.rgb);
        let (w, h) = (g.width, g.height);
        if w <= 2 * BORDER || h <= 2 * BORDER {
            return Vec::new();
        }
        let resp = self.response(&g);
        let smooth = box_filter(&g, 2);
        let r = self.suppression_radius as i32;
        let mut cands = Vec::new();
        for y in BORDER..h - BORDER {
            for x in BORDER..w - BORDER {
                let s = *resp.get(x, y);
                if (s as f64) < self.threshold {
                    continue;
                }
                let d = *frame.depth.get(x, y);
                if !valid_depth(d) {
                    continue;
                }
                // strict maximum against earlier pixels, non-strict against later ones
                let mut is_max = true;
                'nms: for dy in -r..=r {
                    for dx in -r..=r {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let o = *resp.get((x as i32 + dx) as usize, (y as i32 + dy) as usize);
                        let before = (dy, dx) < (0, 0);
                        if o > s || (before && o == s) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if is_max {
                    cands.push((s, x, y, d));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
        cands.truncate(self.max_features);
        cands
            .into_iter()
            .map(|(_, x, y, d)| Feature {
                pixel: Vector2::new(x as f64, y as f64),
                point: frame.intrinsics.backproject_unchecked(x as f64, y as f64, d as f64),
                descriptor: self.describe(&smooth, x, y),
            })
            .collect()
    }

    fn match_descriptors(&self, a: &[Descriptor], b: &[Descriptor]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, da) in a.iter().enumerate() {
            let (mut best, mut second, mut best_j) = (u32::MAX, u32::MAX, 0);
            for (j, db) in b.iter().enumerate() {
                let d = hamming(da, db);
                if d < best {
                    second = best;
                    best = d;
                    best_j = j;
                } else if d < second {
                    second = d;
                }
            }
            if best <= self.max_distance && (second == u32::MAX || (best as f64) < self.ratio * second as f64) {
                out.push((i, best_j));
            }
        }
        out
    }
}

/// Ground-truth keypoints: known world landmarks projected with the true
/// camera pose; the descriptor encodes the landmark id.
#[derive(Clone, Debug)]
pub struct OracleExtractor {
    pub landmarks: Vec<(u64, Vector3<f64>)>,
    /// Maximum disagreement between landmark depth and measured depth.
    pub occlusion_tolerance: f64,
}

impl OracleExtractor {
    pub fn new(landmarks: Vec<(u64, Vector3<f64>)>) -> Self {
        Self {
            landmarks,
            occlusion_tolerance: 0.01,
        }
    }

    pub fn descriptor(id: u64) -> Descriptor {
        let mut d = [0u8; 32];
        d[..8].copy_from_slice(&id.to_le_bytes());
        d[8] = 1;
        d
    }
}

impl FeatureExtractor for OracleExtractor {
    fn detect(&self, frame: &FeatureFrame) -> Vec<Feature> {
        let Some(pose) = frame.true_pose else {
            return Vec::new();
        };
        let inv = pose.inverse();
        let k = frame.intrinsics;
        let mut out = Vec::new();
        for &(id, p) in &self.landmarks {
            let c = inv.transform_point(&p);
            if c.z <= 0.0 {
                continue;
            }
            let u = k.project_unchecked(&c);
            let Some((x, y)) = k.pixel_of(&u) else {
                continue;
            };
            let d = *frame.depth.get(x, y);
            if !valid_depth(d) || (d as f64 - c.z).abs() > self.occlusion_tolerance {
                continue;
            }
            out.push(Feature {
                pixel: u,
                point: c,
                descriptor: Self::descriptor(id),
            });
        }
        out
    }

    fn match_descriptors(&self, a: &[Descriptor], b: &[Descriptor]) -> Vec<(usize, usize)> {
        let index: HashMap<&Descriptor, usize> = b.iter().enumerate().map(|(j, d)| (d, j)).collect();
        a.iter()
            .enumerate()
            .filter_map(|(i, d)| index.get(d).map(|&j| (i, j)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub object_id: u32,
    /// Unit vector from the camera centre to the object origin, object frame.
    pub view_direction: Vector3<f64>,
    /// Object-frame points with descriptors.
    pub keypoints: Vec<(Vector3<f64>, Descriptor)>,
    pub class_dist: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SnapshotStore {
    pub snapshots: Vec<Snapshot>,
}

const MAGIC: &[u8; 4] = b"OSNP";
const VERSION: u32 = 1;

impl SnapshotStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn for_object(&self, id: u32) -> impl Iterator<Item = &Snapshot> {
        self.snapshots.iter().filter(move |s| s.object_id == id)
    }

    pub fn has_object(&self, id: u32) -> bool {
        self.for_object(id).next().is_some()
    }

    /// Stores the view unless one within `min_angle_deg` exists. Only
    /// features inside `mask` become keypoints.
    #[allow(clippy::too_many_arguments)]
    pub fn maybe_add_snapshot(
        &mut self,
        object_id: u32,
        object_pose: &Pose,
        camera_pose: &Pose,
        features: &[Feature],
        mask: Option<&Mask>,
        class_dist: &[f64],
        min_angle_deg: f64,
    ) -> bool {
        let to_obj = object_pose.inverse().compose(camera_pose);
        // camera centre to object origin, in the object frame
        let dir = -to_obj.translation;
        let Some(dir) = dir.try_normalize(1e-12) else {
            return false;
        };
        let cos_min = min_angle_deg.to_radians().cos();
        if self.for_object(object_id).any(|s| s.view_direction.dot(&dir) > cos_min) {
            return false;
        }
        let keypoints: Vec<_> = features
            .iter()
            .filter(|f| {
                mask.is_none_or(|m| {
                    let (x, y) = (f.pixel.x.round(), f.pixel.y.round());
                    x >= 0.0
                        && y >= 0.0
                        && (x as usize) < m.width
                        && (y as usize) < m.height
                        && *m.get(x as usize, y as usize)
                })
            })
            .map(|f| (to_obj.transform_point(&f.point), f.descriptor))
            .collect();
        self.snapshots.push(Snapshot {
            object_id,
            view_direction: dir,
            keypoints,
            class_dist: class_dist.to_vec(),
        });
        true
    }

    pub fn remove_object(&mut self, id: u32) {
        self.snapshots.retain(|s| s.object_id != id);
    }

    /// Re-expresses an object's snapshots after its frame moved by
    /// `new_from_old` (points p' = T p).
    pub fn recentre_object(&mut self, id: u32, new_from_old: &Pose) {
        for s in self.snapshots.iter_mut().filter(|s| s.object_id == id) {
            s.view_direction = new_from_old.transform_vector(&s.view_direction);
            for (p, _) in &mut s.keypoints {
                *p = new_from_old.transform_point(p);
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.snapshots.len() as u32).to_le_bytes())?;
        for s in &self.snapshots {
            w.write_all(&s.object_id.to_le_bytes())?;
            for v in s.view_direction.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(s.class_dist.len() as u32).to_le_bytes())?;
            for p in &s.class_dist {
                w.write_all(&p.to_le_bytes())?;
            }
            w.write_all(&(s.keypoints.len() as u32).to_le_bytes())?;
            for (p, d) in &s.keypoints {
                for v in p.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(d)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, RelocError> {
        fn u32_(r: &mut impl Read) -> std::io::Result<u32> {
            let mut b = [0; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn f64_(r: &mut impl Read) -> std::io::Result<f64> {
            let mut b = [0; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        }
        fn v3(r: &mut impl Read) -> std::io::Result<Vector3<f64>> {
            Ok(Vector3::new(f64_(r)?, f64_(r)?, f64_(r)?))
        }
        let mut m = [0; 4];
        r.read_exact(&mut m)?;
        if &m != MAGIC {
            return Err(RelocError::Corrupt("bad magic".into()));
        }
        let v = u32_(r)?;
        if v != VERSION {
            return Err(RelocError::Corrupt(format!("unsupported version {v}")));
        }
        let n = u32_(r)?;
        let mut snapshots = Vec::new();
        for _ in 0..n {
            let object_id = u32_(r)?;
            let view_direction = v3(r)?;
            let nc = u32_(r)?;
            let class_dist = (0..nc).map(|_| f64_(r)).collect::<Result<_, _>>()?;
            let nk = u32_(r)?;
            let mut keypoints = Vec::new();
            for _ in 0..nk {
                let p = v3(r)?;
                let mut d = [0u8; 32];
                r.read_exact(&mut d)?;
                keypoints.push((p, d));
            }
            snapshots.push(Snapshot {
                object_id,
                view_direction,
                keypoints,
                class_dist,
            });
        }
        Ok(Self { snapshots })
    }

    pub fn save(&self, path: &Path) -> Result<(), RelocError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RelocError> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Rigid transform T with dst ~ T src, rejecting sets without a unique
/// rotation.
pub fn estimate_rigid_3d3d(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Pose, RelocError> {
    assert_eq!(src.len(), dst.len());
    if src.len() < 3 {
        return Err(RelocError::TooFewPoints(src.len()));
    }
    if is_degenerate(src) || is_degenerate(dst) {
        return Err(RelocError::Degenerate);
    }
    Ok(align_points(src, dst))
}

fn is_degenerate(p: &[Vector3<f64>]) -> bool {
    let n = p.len() as f64;
    let c = p.iter().sum::<Vector3<f64>>() / n;
    let cov = p.iter().fold(nalgebra::Matrix3::zeros(), |acc, q| acc + (q - c) * (q - c).transpose());
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    // the second spread must be non-negligible against the first
    ev[0] <= 1e-18 || ev[1] <= 1e-12 * ev[0]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub pose: Pose,
    pub inliers: Vec<usize>,
}

fn inliers_of(pose: &Pose, src: &[Vector3<f64>], dst: &[Vector3<f64>], threshold: f64) -> Vec<usize> {
    let t2 = threshold * threshold;
    (0..src.len())
        .filter(|&i| (pose.transform_point(&src[i]) - dst[i]).norm_squared() < t2)
        .collect()
}

/// Three-point RANSAC maximising the inlier count, then least-squares refits
/// on the inlier set until it stops changing.
pub fn ransac_rigid(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    threshold: f64,
    min_inliers: usize,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Option<RansacResult> {
    let n = src.len();
    if n < 3 || n < min_inliers {
        return None;
    }
    let mut best: Option<(Pose, usize)> = None;
    for _ in 0..iterations {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let mut c = rng.random_range(0..n - 2);
        for s in [a.min(b), a.max(b)] {
            if c >= s {
                c += 1;
            }
        }
        let idx = [a, b, c];
        let s3: Vec<_> = idx.iter().map(|&i| src[i]).collect();
        let d3: Vec<_> = idx.iter().map(|&i| dst[i]).collect();
        let Ok(model) = estimate_rigid_3d3d(&s3, &d3) else {
            continue;
        };
        let count = inliers_of(&model, src, dst, threshold).len();
        if best.as_ref().is_none_or(|(_, bc)| count > *bc) {
            best = Some((model, count));
        }
    }
    let (mut pose, _) = best?;
    let mut inliers = inliers_of(&pose, src, dst, threshold);
    for _ in 0..5 {
        if inliers.len() < 3 {
            break;
        }
        let s: Vec<_> = inliers.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = inliers.iter().map(|&i| dst[i]).collect();
        let Ok(refit) = estimate_rigid_3d3d(&s, &d) else {
            break;
        };
        let next = inliers_of(&refit, src, dst, threshold);
        if next.len() < inliers.len() {
            break;
        }
        pose = refit;
        let done = next == inliers;
        inliers = next;
        if done {
            break;
        }
    }
    (inliers.len() >= min_inliers).then_some(RansacResult { pose, inliers })
}

/// What relocalisation needs to know about each mapped object.
#[derive(Clone, Debug)]
pub struct RelocObject {
    pub id: u32,
    /// Object to world.
    pub pose: Pose,
    pub class_dist: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Relocalisation {
    /// Camera to world.
    pub camera_pose: Pose,
    pub inliers: usize,
    /// Per matched object: id, camera-from-object estimate, inlier count.
    pub objects: Vec<(u32, Pose, usize)>,
}

/// `detection_dist` is the merged class distribution of the frame's
/// unassigned detections; when absent the class gate is skipped.
pub fn relocalize(
    store: &SnapshotStore,
    features: &[Feature],
    objects: &[RelocObject],
    detection_dist: Option<&[f64]>,
    extractor: &dyn FeatureExtractor,
    params: &RelocParams,
) -> Result<Relocalisation, RelocFailure> {
    let candidates: Vec<&RelocObject> = objects
        .iter()
        .filter(|o| store.has_object(o.id))
        .filter(|o| {
            detection_dist.is_none_or(|d| {
                o.class_dist.iter().zip(d).map(|(a, b)| a * b).sum::<f64>() > params.class_gate
            })
        })
        .collect();
    if candidates.is_empty() {
        return Err(RelocFailure::NoCandidates);
    }
    let frame_desc: Vec<Descriptor> = features.iter().map(|f| f.descriptor).collect();
    let mut joint_cam = Vec::new();
    let mut joint_world = Vec::new();
    let mut matched = Vec::new();
    for o in candidates {
        let (points, descs): (Vec<Vector3<f64>>, Vec<Descriptor>) =
            store.for_object(o.id).flat_map(|s| s.keypoints.iter().copied()).unzip();
        let pairs = extractor.match_descriptors(&frame_desc, &descs);
        let src: Vec<_> = pairs.iter().map(|&(_, j)| points[j]).collect();
        let dst: Vec<_> = pairs.iter().map(|&(i, _)| features[i].point).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ (o.id as u64).wrapping_mul(0x9e37_79b9));
        let Some(r) = ransac_rigid(&src, &dst, params.object_threshold, params.object_min_inliers, params.iterations, &mut rng)
        else {
            continue;
        };
        matched.push((o.id, r.pose, r.inliers.len()));
        joint_cam.extend(dst.iter().copied());
        joint_world.extend(src.iter().map(|p| o.pose.transform_point(p)));
    }
    if matched.is_empty() {
        return Err(RelocFailure::PerObjectFail);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x6a09_e667);
    let r = ransac_rigid(
        &joint_cam,
        &joint_world,
        params.joint_threshold,
        params.joint_min_inliers,
        params.iterations,
        &mut rng,
    )
    .ok_or(RelocFailure::JointFail)?;
    Ok(Relocalisation {
        camera_pose: r.pose,
        inliers: r.inliers.len(),
        objects: matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use crate::segmentation::{Corruption, GroundTruthSource};
    use crate::synthworld::{landmarks, loop_sequence, render_synth};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
        se3_exp(&Twist::from_slice(&v))
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn rigid_fit_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = cloud(&mut rng, 10);
        let id = estimate_rigid_3d3d(&src, &src).unwrap();
        assert!(id.distance(&Pose::identity()).0 < 1e-12 && id.rotation_angle() < 1e-9);
        let t = random_pose(&mut rng);
        let dst: Vec<_> = src.iter().map(|p| t.transform_point(p)).collect();
        let got = estimate_rigid_3d3d(&src, &dst).unwrap();
        assert!((got.rotation - t.rotation).abs().max() < 1e-9);
        assert!((got.translation - t.translation).norm() < 1e-9);
        let line: Vec<_> = (0..3).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.5)).collect();
        assert!(matches!(estimate_rigid_3d3d(&line, &line), Err(RelocError::Degenerate)));
        assert!(matches!(estimate_rigid_3d3d(&src[..2], &dst[..2]), Err(RelocError::TooFewPoints(2))));
    }

    /// 200 correspondences with 30% replaced by random points.
    fn contaminated(seed: u64) -> (Pose, Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_pose(&mut rng);
        let src = cloud(&mut rng, 200);
        let mut dst: Vec<_> = src.iter().map(|p| t.transform_point(p)).collect();
        let mut inlier = vec![true; 200];
        for i in 0..60 {
            dst[i] = cloud(&mut rng, 1)[0] * 3.0;
            inlier[i] = false;
        }
        (t, src, dst, inlier)
    }

    #[test]
    fn ransac_with_outliers() {
        let (t, src, dst, inlier) = contaminated(7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = ransac_rigid(&src, &dst, 0.02, 5, 200, &mut rng).unwrap();
        for (i, p) in src.iter().enumerate().filter(|(i, _)| inlier[*i]) {
            assert!((r.pose.transform_point(p) - t.transform_point(p)).norm() < 1e-6, "point {i}");
        }
        assert!(r.inliers.len() >= 140);
        // self-consistency: the pose explains every reported inlier
        for &i in &r.inliers {
            assert!((r.pose.transform_point(&src[i]) - dst[i]).norm() < 0.02);
        }
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(ransac_rigid(&src, &dst, 0.02, 5, 200, &mut a), ransac_rigid(&src, &dst, 0.02, 5, 200, &mut b));
    }

    #[test]
    fn ransac_success_rate() {
        let mut ok = 0;
        for trial in 0..500 {
            let (t, src, dst, _) = contaminated(1000 + trial);
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            if let Some(r) = ransac_rigid(&src, &dst, 0.02, 5, 200, &mut rng) {
                let (dt, da) = r.pose.distance(&t);
                if dt < 1e-6 && da < 1e-6 {
                    ok += 1;
                }
            }
        }
        // (1 - 0.7^3)^200 per-trial miss probability is far below 1%
        assert!(ok >= 495, "{ok}/500");
    }

    #[test]
    fn snapshot_view_rule() {
        let mut store = SnapshotStore::new();
        let obj = Pose::identity();
        let at = |deg: f64| {
            let a = deg.to_radians();
            crate::synthworld::look_at(Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.0), Vector3::zeros())
        };
        let f = vec![Feature {
            pixel: Vector2::new(1.0, 1.0),
            point: Vector3::new(0.0, 0.0, 2.0),
            descriptor: [7; 32],
        }];
        assert!(store.maybe_add_snapshot(1, &obj, &at(0.0), &f, None, &[1.0], 15.0));
        assert!(!store.maybe_add_snapshot(1, &obj, &at(10.0), &f, None, &[1.0], 15.0));
        assert!(store.maybe_add_snapshot(1, &obj, &at(20.0), &f, None, &[1.0], 15.0));
        assert!(store.maybe_add_snapshot(2, &obj, &at(0.0), &f, None, &[1.0], 15.0));
        assert_eq!(store.len(), 3);
        // the camera-frame point at depth 2 on the optical axis is the object origin
        assert!(store.snapshots[0].keypoints[0].0.norm() < 1e-12);
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        assert_eq!(SnapshotStore::read_from(&mut buf.as_slice()).unwrap(), store);
        store.remove_object(1);
        assert_eq!(store.len(), 1);
    }

    fn oracle_world() -> (crate::synthworld::Sequence, OracleExtractor, Vec<(u64, u32, Vector3<f64>)>) {
        let seq = loop_sequence("loop-tiny").unwrap();
        let lm = landmarks(&seq.scene, 80, 4);
        let ex = OracleExtractor::new(lm.iter().map(|&(id, _, p)| (id, p)).collect());
        (seq, ex, lm)
    }

    #[test]
    fn relocalises_from_stored_view() {
        let (seq, ex, _) = oracle_world();
        let k = seq.intrinsics;
        let poses: Vec<Pose> = seq.trajectory.frame_poses().into_iter().map(|p| p.1).collect();
        let gt = GroundTruthSource::new(seq.scene.clone(), poses.clone(), k, Corruption::default());
        let objects: Vec<RelocObject> = seq
            .scene
            .objects()
            .map(|p| RelocObject {
                id: p.id,
                pose: Pose::from(&p.pose),
                class_dist: vec![1.0, 0.0, 0.0],
            })
            .collect();
        let mut store = SnapshotStore::new();
        let frame = 10;
        let f = render_synth(&seq.scene, &poses[frame], &k, None);
        let depth = f.depth_f32();
        let feats = ex.detect(&FeatureFrame {
            rgb: &f.rgb,
            depth: &depth,
            intrinsics: &k,
            true_pose: Some(&poses[frame]),
        });
        for (id, m) in gt.clean_masks(frame) {
            let o = objects.iter().find(|o| o.id == id).unwrap();
            store.maybe_add_snapshot(id, &o.pose, &poses[frame], &feats, Some(&m), &o.class_dist, 15.0);
        }
        let r = relocalize(&store, &feats, &objects, None, &ex, &RelocParams::default()).unwrap();
        let (dt, da) = r.camera_pose.distance(&poses[frame]);
        assert!(dt < 1e-3 && da < 0.1f64.to_radians(), "{dt} {da}");
        assert!(r.inliers >= 50);
        // a class gate nobody passes
        let e = relocalize(&store, &feats, &objects, Some(&[0.0, 0.0, 1.0]), &ex, &RelocParams::default());
        assert_eq!(e.unwrap_err(), RelocFailure::NoCandidates);
    }

    #[test]
    fn four_inliers_per_object_fail() {
        let ex = OracleExtractor::new(Vec::new());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = SnapshotStore::new();
        let mut feats = Vec::new();
        let mut objects = Vec::new();
        for id in 1..4u32 {
            let pts = cloud(&mut rng, 4);
            let kp: Vec<_> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (*p, OracleExtractor::descriptor((id as u64) << 8 | i as u64)))
                .collect();
            for (p, d) in &kp {
                feats.push(Feature {
                    pixel: Vector2::zeros(),
                    point: p + Vector3::new(0.0, 0.0, 3.0),
                    descriptor: *d,
                });
            }
            store.snapshots.push(Snapshot {
                object_id: id,
                view_direction: Vector3::z(),
                keypoints: kp,
                class_dist: vec![1.0],
            });
            objects.push(RelocObject {
                id,
                pose: Pose::identity(),
                class_dist: vec![1.0],
            });
        }
        let e = relocalize(&store, &feats, &objects, None, &ex, &RelocParams::default());
        assert_eq!(e.unwrap_err(), RelocFailure::PerObjectFail);
    }

    #[test]
    fn joint_needs_fifty() {
        let ex = OracleExtractor::new(Vec::new());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = cloud(&mut rng, 30);
        let kp: Vec<_> = pts.iter().enumerate().map(|(i, p)| (*p, OracleExtractor::descriptor(i as u64))).collect();
        let feats: Vec<_> = kp
            .iter()
            .map(|(p, d)| Feature {
                pixel: Vector2::zeros(),
                point: *p,
                descriptor: *d,
            })
            .collect();
        let store = SnapshotStore {
            snapshots: vec![Snapshot {
                object_id: 1,
                view_direction: Vector3::z(),
                keypoints: kp,
                class_dist: vec![1.0],
            }],
        };
        let objects = [RelocObject {
            id: 1,
            pose: Pose::identity(),
            class_dist: vec![1.0],
        }];
        let e = relocalize(&store, &feats, &objects, None, &ex, &RelocParams::default());
        assert_eq!(e.unwrap_err(), RelocFailure::JointFail);
    }

    #[test]
    fn harris_brief_repeatable() {
        // checkerboard with 16 px squares
        let (w, h) = (160, 120);
        let rgb = Image::from_vec(
            w,
            h,
            (0..w * h)
                .map(|i| {
                    let (x, y) = (i % w, i / w);
                    let v = if ((x / 16) + (y / 16)) % 2 == 0 { 30 } else { 220 };
                    [v, v, v]
                })
                .collect(),
        );
        let depth = Image::new(w, h, 1.0f32);
        let k = Intrinsics::new(100.0, 100.0, 80.0, 60.0, w, h).unwrap();
        let ex = HarrisBrief::default();
        let frame = FeatureFrame {
            rgb: &rgb,
            depth: &depth,
            intrinsics: &k,
            true_pose: None,
        };
        let a = ex.detect(&frame);
        assert!(a.len() > 10);
        // corners sit within two pixels of the 16 px lattice
        for f in &a {
            let (x, y) = (f.pixel.x as i64, f.pixel.y as i64);
            assert!(((x + 2) % 16 <= 3) && ((y + 2) % 16 <= 3), "{x} {y}");
        }
        let b = ex.detect(&frame);
        assert_eq!(a, b);
        let d: Vec<_> = a.iter().map(|f| f.descriptor).collect();
        for (i, j) in ex.match_descriptors(&d, &d) {
            assert_eq!(d[i], d[j]);
        }
        let flat = Image::new(w, h, [128u8; 3]);
        assert!(ex
            .detect(&FeatureFrame {
                rgb: &flat,
                ..frame
            })
            .is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rigid_fit_recovers_transform(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_pose(&mut rng);
            let src = cloud(&mut rng, 10);
            let dst: Vec<_> = src.iter().map(|p| t.transform_point(p)).collect();
            let got = estimate_rigid_3d3d(&src, &dst).unwrap();
            let (dt, da) = got.distance(&t);
            prop_assert!(dt < 1e-9 && da < 1e-9);
        }
    }
}
