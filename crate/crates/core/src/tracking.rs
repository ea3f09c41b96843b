//! Frame-to-model point-to-plane ICP against the layered render.

use std::collections::BTreeMap;

use nalgebra::{Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::{se3_exp, Intrinsics, Pose, Twist};
use crate::image::{valid_depth, DepthImage, Image};
use crate::raycast::{RenderedMaps, BACKGROUND_ID, NO_HIT};
use crate::tsdf::TargetQuality;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrackingParams {
    pub levels: usize,
    pub iterations: usize,
    pub normal_agreement: f64,
    pub max_distance: f64,
    pub bilateral_radius: usize,
    pub bilateral_sigma_space: f64,
    pub bilateral_sigma_range: f64,
    pub max_condition: f64,
    pub lost_rmse: f64,
    pub lost_instance_coverage: f64,
    pub lost_valid_fraction: f64,
}

impl Default for TrackingParams {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: 5,
            normal_agreement: 0.8,
            max_distance: 0.1,
            bilateral_radius: 3,
            bilateral_sigma_space: 3.0,
            bilateral_sigma_range: 0.03,
            max_condition: 1e8,
            lost_rmse: 0.05,
            lost_instance_coverage: 0.1,
            lost_valid_fraction: 0.5,
        }
    }
}

/// Camera-frame vertex and normal maps at one resolution. Invalid vertices
/// and normals are zero vectors.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub intrinsics: Intrinsics,
    pub depth: DepthImage,
    pub vertices: Image<Vector3<f64>>,
    pub normals: Image<Vector3<f64>>,
}

#[derive(Clone, Debug)]
pub struct FramePyramid {
    pub levels: Vec<PyramidLevel>,
}

/// Edge-preserving smoothing; invalid pixels stay invalid and never
/// contribute.
pub fn bilateral_filter(depth: &DepthImage, radius: usize, sigma_space: f64, sigma_range: f64) -> DepthImage {
    let (w, h) = (depth.width, depth.height);
    let r = radius as isize;
    let side = 2 * radius + 1;
    let mut spatial = vec![0.0f64; side * side];
    for dy in -r..=r {
        for dx in -r..=r {
            spatial[((dy + r) as usize) * side + (dx + r) as usize] =
                (-((dx * dx + dy * dy) as f64) / (2.0 * sigma_space * sigma_space)).exp();
        }
    }
    let inv_range = 1.0 / (2.0 * sigma_range * sigma_range);
    let mut out = Image::new(w, h, 0.0f32);
    for y in 0..h {
        for x in 0..w {
            let c = *depth.get(x, y);
            if !valid_depth(c) {
                continue;
            }
            let c = c as f64;
            let (mut sum, mut wsum) = (0.0, 0.0);
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let d = *depth.get(xx as usize, yy as usize);
                    if !valid_depth(d) {
                        continue;
                    }
                    let diff = d as f64 - c;
                    let wt = spatial[((dy + r) as usize) * side + (dx + r) as usize] * (-diff * diff * inv_range).exp();
                    sum += wt * d as f64;
                    wsum += wt;
                }
            }
            out.set(x, y, (sum / wsum) as f32);
        }
    }
    out
}

/// Vertex map by backprojection and normals from central differences,
/// oriented toward the camera.
pub fn vertex_normal_maps(depth: &DepthImage, k: &Intrinsics) -> (Image<Vector3<f64>>, Image<Vector3<f64>>) {
    let (w, h) = (depth.width, depth.height);
    let mut vert = Image::new(w, h, Vector3::zeros());
    for y in 0..h {
        for x in 0..w {
            let d = *depth.get(x, y);
            if valid_depth(d) {
                vert.set(x, y, k.backproject_unchecked(x as f64, y as f64, d as f64));
            }
        }
    }
    let mut norm = Image::new(w, h, Vector3::zeros());
    let ok = |x: usize, y: usize| valid_depth(*depth.get(x, y));
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !(ok(x, y) && ok(x - 1, y) && ok(x + 1, y) && ok(x, y - 1) && ok(x, y + 1)) {
                continue;
            }
            let dx = vert.get(x + 1, y) - vert.get(x - 1, y);
            let dy = vert.get(x, y + 1) - vert.get(x, y - 1);
            let n = dx.cross(&dy);
            let len = n.norm();
            if len > 0.0 {
                let n = n / len;
                norm.set(x, y, if n.dot(vert.get(x, y)) > 0.0 { -n } else { n });
            }
        }
    }
    (vert, norm)
}

pub fn preprocess_frame(depth: &DepthImage, k: &Intrinsics, params: &TrackingParams) -> FramePyramid {
    assert!(
        depth.width.is_multiple_of(1 << (params.levels - 1)) && depth.height.is_multiple_of(1 << (params.levels - 1)),
        "depth dimensions must be divisible by the pyramid factor"
    );
    let filtered = bilateral_filter(
        depth,
        params.bilateral_radius,
        params.bilateral_sigma_space,
        params.bilateral_sigma_range,
    );
    let mut levels = Vec::with_capacity(params.levels);
    let mut d = filtered;
    let mut kk = *k;
    for l in 0..params.levels {
        if l > 0 {
            d = d.downsample_depth();
            kk = kk.half();
        }
        let (vertices, normals) = vertex_normal_maps(&d, &kk);
        levels.push(PyramidLevel {
            intrinsics: kk,
            depth: d.clone(),
            vertices,
            normals,
        });
    }
    FramePyramid { levels }
}

/// Reference maps at one pyramid level (world frame).
struct RefLevel {
    k: Intrinsics,
    world_to_ref: Pose,
    vertices: Image<Vector3<f64>>,
    normals: Image<Vector3<f64>>,
    index: Image<i32>,
}

impl RefLevel {
    fn from_maps(m: &RenderedMaps) -> Self {
        Self {
            k: m.intrinsics,
            world_to_ref: m.camera_pose.inverse(),
            vertices: m.vertices.clone(),
            normals: m.normals.clone(),
            index: m.index.clone(),
        }
    }

    /// 2x2 block average of valid vertices and normals; the block takes the
    /// id of its first valid pixel.
    fn downsample(&self) -> Self {
        let (w, h) = (self.vertices.width / 2, self.vertices.height / 2);
        let mut v = Image::new(w, h, Vector3::zeros());
        let mut n = Image::new(w, h, Vector3::zeros());
        let mut idx = Image::new(w, h, NO_HIT);
        for y in 0..h {
            for x in 0..w {
                let (mut sv, mut sn, mut c, mut id) = (Vector3::zeros(), Vector3::zeros(), 0.0, NO_HIT);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let i = self.index.index(2 * x + dx, 2 * y + dy);
                    if self.index.data[i] != NO_HIT {
                        sv += self.vertices.data[i];
                        sn += self.normals.data[i];
                        c += 1.0;
                        if id == NO_HIT {
                            id = self.index.data[i];
                        }
                    }
                }
                if c > 0.0 && sn.norm() > 1e-9 {
                    v.set(x, y, sv / c);
                    n.set(x, y, sn.normalize());
                    idx.set(x, y, id);
                }
            }
        }
        Self {
            k: self.k.half(),
            world_to_ref: self.world_to_ref,
            vertices: v,
            normals: n,
            index: idx,
        }
    }
}

/// Normal equations and counts for the pixels of one render target.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSystem {
    pub jtj: Matrix6<f64>,
    pub jtr: Vector6<f64>,
    pub squared_error: f64,
    /// Live pixels whose projection hit a rendered pixel of this target.
    pub residual_count: usize,
    /// Correspondences that passed the distance and normal tests.
    pub valid_count: usize,
    /// Rendered pixels of this target in the reference.
    pub rendered_count: usize,
}

impl Default for TargetSystem {
    fn default() -> Self {
        Self {
            jtj: Matrix6::zeros(),
            jtr: Vector6::zeros(),
            squared_error: 0.0,
            residual_count: 0,
            valid_count: 0,
            rendered_count: 0,
        }
    }
}

impl TargetSystem {
    fn add(&mut self, o: &TargetSystem) {
        self.jtj += o.jtj;
        self.jtr += o.jtr;
        self.squared_error += o.squared_error;
        self.residual_count += o.residual_count;
        self.valid_count += o.valid_count;
        self.rendered_count += o.rendered_count;
    }

    pub fn rmse(&self) -> f64 {
        if self.valid_count == 0 {
            f64::INFINITY
        } else {
            (self.squared_error / self.valid_count as f64).sqrt()
        }
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.rendered_count == 0 {
            0.0
        } else {
            (self.valid_count as f64 / self.rendered_count as f64).min(1.0)
        }
    }

    pub fn quality(&self) -> TargetQuality {
        TargetQuality {
            valid_fraction: self.valid_fraction(),
            rmse: self.rmse(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackingResult {
    pub pose: Pose,
    /// Systems at the final pose, keyed by render id (0 = background).
    pub systems: BTreeMap<i32, TargetSystem>,
    pub global: TargetSystem,
    pub icp_rmse: f64,
    pub valid_fraction: f64,
    /// Fraction of rendered pixels that belong to object volumes.
    pub instance_coverage: f64,
    pub degenerate: bool,
    /// Energy before each iteration, per level (coarse first).
    pub energies: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct TrackingQuality {
    pub targets: BTreeMap<i32, TargetQuality>,
}

impl TrackingResult {
    pub fn quality(&self) -> TrackingQuality {
        TrackingQuality {
            targets: self.systems.iter().map(|(&id, s)| (id, s.quality())).collect(),
        }
    }
}

/// Residual and Jacobian of one live pixel against the reference, or
/// `None` when no valid correspondence exists. The bool reports whether the
/// projection landed on a rendered pixel at all.
#[inline]
fn correspond(
    reference: &RefLevel,
    pose: &Pose,
    vl: &Vector3<f64>,
    nl: &Vector3<f64>,
    params: &TrackingParams,
) -> (Option<usize>, Option<(f64, Vector6<f64>)>) {
    let r = reference;
    correspond_maps(&r.k, &r.world_to_ref, &r.vertices, &r.normals, &r.index, pose, vl, nl, params)
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn correspond_maps(
    k: &Intrinsics,
    world_to_ref: &Pose,
    vertices: &Image<Vector3<f64>>,
    normals: &Image<Vector3<f64>>,
    index: &Image<i32>,
    pose: &Pose,
    vl: &Vector3<f64>,
    nl: &Vector3<f64>,
    params: &TrackingParams,
) -> (Option<usize>, Option<(f64, Vector6<f64>)>) {
    let p = pose.transform_point(vl);
    let pc = world_to_ref.transform_point(&p);
    if pc.z <= 0.0 {
        return (None, None);
    }
    let Some((x, y)) = k.pixel_of(&k.project_unchecked(&pc)) else {
        return (None, None);
    };
    let i = index.index(x, y);
    if index.data[i] == NO_HIT {
        return (None, None);
    }
    let vr = vertices.data[i];
    let nr = normals.data[i];
    let diff = vr - p;
    if diff.norm() >= params.max_distance || nr.dot(&pose.transform_vector(nl)) <= params.normal_agreement {
        return (Some(i), None);
    }
    let r = nr.dot(&diff);
    let c = p.cross(&nr);
    let j = -Vector6::new(nr.x, nr.y, nr.z, c.x, c.y, c.z);
    (Some(i), Some((r, j)))
}

/// One live point against full-resolution reference maps: the reference
/// pixel it associates with, and the point-to-plane residual with its
/// Jacobian when the correspondence passes the distance and normal tests.
pub fn point_residual(
    reference: &RenderedMaps,
    pose: &Pose,
    live_vertex: &Vector3<f64>,
    live_normal: &Vector3<f64>,
    params: &TrackingParams,
) -> Option<(usize, f64, Vector6<f64>)> {
    let m = reference;
    let inv = m.camera_pose.inverse();
    match correspond_maps(&m.intrinsics, &inv, &m.vertices, &m.normals, &m.index, pose, live_vertex, live_normal, params) {
        (Some(i), Some((r, j))) => Some((i, r, j)),
        _ => None,
    }
}

fn accumulate(
    reference: &RefLevel,
    live: &PyramidLevel,
    pose: &Pose,
    params: &TrackingParams,
) -> BTreeMap<i32, TargetSystem> {
    let mut systems: BTreeMap<i32, TargetSystem> = BTreeMap::new();
    for &id in &reference.index.data {
        if id != NO_HIT {
            systems.entry(id).or_default().rendered_count += 1;
        }
    }
    for i in 0..live.vertices.len() {
        let nl = live.normals.data[i];
        if nl == Vector3::zeros() {
            continue;
        }
        let (hit, res) = correspond(reference, pose, &live.vertices.data[i], &nl, params);
        let Some(ri) = hit else { continue };
        let s = systems.entry(reference.index.data[ri]).or_default();
        s.residual_count += 1;
        if let Some((r, j)) = res {
            s.valid_count += 1;
            s.squared_error += r * r;
            s.jtj += j * j.transpose();
            s.jtr += j * r;
        }
    }
    systems
}

fn total(systems: &BTreeMap<i32, TargetSystem>) -> TargetSystem {
    let mut g = TargetSystem::default();
    for s in systems.values() {
        g.add(s);
    }
    g
}

/// Solves `H x = -b` through the symmetric eigendecomposition; `None` when
/// the system is rank deficient or too poorly conditioned.
pub fn solve_step(h: &Matrix6<f64>, b: &Vector6<f64>, max_condition: f64) -> Option<Vector6<f64>> {
    let eig = SymmetricEigen::new(*h);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || !(min > 0.0) || max / min > max_condition {
        return None;
    }
    let vtb = eig.eigenvectors.transpose() * b;
    let scaled = Vector6::from_fn(|i, _| -vtb[i] / eig.eigenvalues[i]);
    Some(eig.eigenvectors * scaled)
}

/// Condition number of a symmetric 6x6 system (infinite when singular).
pub fn condition_number(h: &Matrix6<f64>) -> f64 {
    let eig = SymmetricEigen::new(*h);
    let (max, min) = (eig.eigenvalues.max(), eig.eigenvalues.min());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Per-target systems of the full-resolution live frame against the
/// reference at a fixed camera pose.
pub fn partitioned_systems(
    reference: &RenderedMaps,
    live: &FramePyramid,
    pose: &Pose,
    params: &TrackingParams,
) -> BTreeMap<i32, TargetSystem> {
    accumulate(&RefLevel::from_maps(reference), &live.levels[0], pose, params)
}

/// Result fields derived from a set of partitioned systems.
pub fn summarise(pose: Pose, systems: BTreeMap<i32, TargetSystem>, degenerate: bool, energies: Vec<Vec<f64>>) -> TrackingResult {
    let global = total(&systems);
    let rendered = global.rendered_count.max(1) as f64;
    let instance: usize = systems
        .iter()
        .filter(|(&id, _)| id > BACKGROUND_ID)
        .map(|(_, s)| s.rendered_count)
        .sum();
    TrackingResult {
        pose,
        icp_rmse: global.rmse(),
        valid_fraction: global.valid_fraction(),
        instance_coverage: instance as f64 / rendered,
        global,
        systems,
        degenerate,
        energies,
    }
}

/// Coarse-to-fine Gauss-Newton ICP with left-multiplied updates.
pub fn icp_track(reference: &RenderedMaps, live: &FramePyramid, init: &Pose, params: &TrackingParams) -> TrackingResult {
    let mut refs = vec![RefLevel::from_maps(reference)];
    for l in 1..live.levels.len() {
        let next = refs[l - 1].downsample();
        refs.push(next);
    }
    let mut pose = *init;
    let mut degenerate = false;
    let mut energies = vec![Vec::new(); live.levels.len()];
    for l in (0..live.levels.len()).rev() {
        for _ in 0..params.iterations {
            let g = total(&accumulate(&refs[l], &live.levels[l], &pose, params));
            energies[l].push(g.squared_error);
            match solve_step(&g.jtj, &g.jtr, params.max_condition) {
                Some(step) => {
                    pose = se3_exp(&Twist(step)).compose(&pose);
                }
                None => degenerate = true,
            }
        }
    }
    energies.reverse();
    let systems = accumulate(&refs[0], &live.levels[0], &pose, params);
    summarise(pose, systems, degenerate, energies)
}

pub fn tracking_lost(result: &TrackingResult, params: &TrackingParams) -> bool {
    result.degenerate
        || !(result.icp_rmse <= params.lost_rmse)
        || (result.instance_coverage >= params.lost_instance_coverage
            && result.valid_fraction < params.lost_valid_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se3_exp;
    use crate::raycast::RenderedMaps;

    fn k() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 39.5, 29.5, 80, 60).unwrap()
    }

    /// Render of an analytic scene (a tilted box interior) straight into
    /// reference maps: three walls make every motion observable.
    fn corner_maps(camera: &Pose) -> RenderedMaps {
        let kk = k();
        let mut m = RenderedMaps::empty(*camera, kk);
        let planes = [
            (Vector3::new(0.0, 0.0, -1.0), 2.0, 0),
            (Vector3::new(-1.0, 0.0, -0.3).normalize(), 0.9, 0),
            (Vector3::new(0.0, -1.0, -0.2).normalize(), 0.7, 0),
        ];
        for y in 0..kk.height {
            for x in 0..kk.width {
                let d = camera.transform_vector(&kk.ray(x as f64, y as f64).normalize());
                let o = camera.translation;
                let mut best: Option<(f64, Vector3<f64>)> = None;
                for (n, off, _) in planes {
                    // n . p = -off, normal facing the camera side
                    let den = n.dot(&d);
                    if den.abs() < 1e-9 {
                        continue;
                    }
                    let t = -(off + n.dot(&o)) / den;
                    if t > 0.1 && best.is_none_or(|b| t < b.0) {
                        best = Some((t, if den > 0.0 { -n } else { n }));
                    }
                }
                if let Some((t, n)) = best {
                    let i = m.index.index(x, y);
                    m.depth.data[i] = t as f32;
                    m.vertices.data[i] = o + d * t;
                    m.normals.data[i] = n;
                    m.index.data[i] = if x < 40 { 0 } else { 3 };
                    *m.pixel_counts.entry(m.index.data[i]).or_insert(0) += 1;
                }
            }
        }
        m
    }

    fn depth_from_maps(m: &RenderedMaps) -> DepthImage {
        let inv = m.camera_pose.inverse();
        let mut d = Image::new(m.depth.width, m.depth.height, 0.0f32);
        for i in 0..d.len() {
            if m.is_valid(i) {
                d.data[i] = inv.transform_point(&m.vertices.data[i]).z as f32;
            }
        }
        d
    }

    #[test]
    fn plane_normals_face_camera() {
        let d = Image::new(16, 12, 1.5f32);
        let kk = Intrinsics::new(20.0, 20.0, 7.5, 5.5, 16, 12).unwrap();
        let (_, n) = vertex_normal_maps(&d, &kk);
        for y in 1..11 {
            for x in 1..15 {
                assert!((n.get(x, y) - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_hole_kills_neighbour_normals() {
        let mut d = Image::new(16, 12, 1.5f32);
        d.set(8, 6, 0.0);
        let kk = Intrinsics::new(20.0, 20.0, 7.5, 5.5, 16, 12).unwrap();
        let (v, n) = vertex_normal_maps(&d, &kk);
        assert_eq!(*v.get(8, 6), Vector3::zeros());
        for (x, y) in [(7, 6), (9, 6), (8, 5), (8, 7), (8, 6)] {
            assert_eq!(*n.get(x, y), Vector3::zeros());
        }
        assert_ne!(*n.get(7, 5), Vector3::zeros());
    }

    #[test]
    fn bilateral_keeps_noiseless_plane() {
        let d = Image::new(32, 24, 1.234f32);
        let f = bilateral_filter(&d, 3, 3.0, 0.03);
        for (a, b) in d.data.iter().zip(&f.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bilateral_matches_direct_evaluation() {
        // independent per-pixel evaluation at one interior pixel
        let mut d = Image::new(20, 20, 0.0f32);
        for y in 0..20 {
            for x in 0..20 {
                d.set(x, y, 1.0 + 0.01 * ((x * 7 + y * 3) % 5) as f32);
            }
        }
        d.set(11, 9, 0.0);
        let f = bilateral_filter(&d, 3, 3.0, 0.03);
        let c = *d.get(10, 10) as f64;
        let (mut s, mut ws) = (0.0, 0.0);
        for yy in 7..=13usize {
            for xx in 7..=13usize {
                let v = *d.get(xx, yy) as f64;
                if v <= 0.0 {
                    continue;
                }
                let ds = (xx as f64 - 10.0).powi(2) + (yy as f64 - 10.0).powi(2);
                let w = (-ds / 18.0).exp() * (-(v - c).powi(2) / (2.0 * 0.03 * 0.03)).exp();
                s += w * v;
                ws += w;
            }
        }
        assert!((*f.get(10, 10) as f64 - s / ws).abs() < 1e-6);
        assert_eq!(*f.get(11, 9), 0.0);
    }

    #[test]
    fn identical_frame_recovers_init() {
        let cam = Pose::from_axis_angle(&Vector3::new(0.1, 1.0, 0.0), 0.05);
        let m = corner_maps(&cam);
        // unfiltered, so the live geometry equals the reference exactly
        let p = TrackingParams {
            bilateral_radius: 0,
            ..Default::default()
        };
        let live = preprocess_frame(&depth_from_maps(&m), &k(), &p);
        let r = icp_track(&m, &live, &cam, &p);
        let (dt, da) = r.pose.distance(&cam);
        assert!(dt < 1e-6 && da < 1e-6, "{dt} {da}");
        assert!(r.icp_rmse < 1e-6);
        assert!(!tracking_lost(&r, &TrackingParams::default()));
    }

    #[test]
    fn recovers_perturbed_pose() {
        let truth = Pose::from_translation(Vector3::new(0.02, -0.01, 0.05));
        let reference = corner_maps(&Pose::identity());
        let live_maps = corner_maps(&truth);
        let p = TrackingParams::default();
        let live = preprocess_frame(&depth_from_maps(&live_maps), &k(), &p);
        let r = icp_track(&reference, &live, &Pose::identity(), &p);
        let (dt, da) = r.pose.distance(&truth);
        assert!(dt < 2e-3 && da.to_degrees() < 0.2, "{dt} {}", da.to_degrees());
        // finest level energies are non-increasing
        let e = &r.energies[0];
        for w in e.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{e:?}");
        }
    }

    #[test]
    fn global_is_sum_of_partitions() {
        let reference = corner_maps(&Pose::identity());
        let p = TrackingParams::default();
        let live = preprocess_frame(&depth_from_maps(&corner_maps(&Pose::from_translation(Vector3::new(0.01, 0.0, 0.0)))), &k(), &p);
        let r = icp_track(&reference, &live, &Pose::identity(), &p);
        assert_eq!(r.systems.len(), 2);
        let mut sum = TargetSystem::default();
        for s in r.systems.values() {
            sum.add(s);
            assert!((s.jtj - s.jtj.transpose()).norm() < 1e-9);
            assert!(SymmetricEigen::new(s.jtj).eigenvalues.min() > -1e-9);
        }
        assert!((sum.jtj - r.global.jtj).norm() < 1e-6);
        assert_eq!(sum.residual_count, r.global.residual_count);
        assert!((r.instance_coverage - 0.5).abs() < 0.01);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let reference = corner_maps(&Pose::identity());
        let p = TrackingParams::default();
        let live = preprocess_frame(&depth_from_maps(&corner_maps(&Pose::from_translation(Vector3::new(0.01, 0.005, 0.0)))), &k(), &p);
        let rl = RefLevel::from_maps(&reference);
        let pose = Pose::identity();
        let lv = &live.levels[0];
        let mut checked = 0;
        for i in (0..lv.vertices.len()).step_by(37) {
            let nl = lv.normals.data[i];
            if nl == Vector3::zeros() {
                continue;
            }
            let (Some(ri), Some((_, j))) = correspond(&rl, &pose, &lv.vertices.data[i], &nl, &p) else {
                continue;
            };
            // residual against the fixed reference sample
            let res = |t: &Pose| rl.normals.data[ri].dot(&(rl.vertices.data[ri] - t.transform_point(&lv.vertices.data[i])));
            let h = 1e-6;
            for a in 0..6 {
                let mut e = Vector6::zeros();
                e[a] = h;
                let fd = (res(&se3_exp(&Twist(e)).compose(&pose)) - res(&se3_exp(&Twist(-e)).compose(&pose))) / (2.0 * h);
                assert!((fd - j[a]).abs() <= 1e-4 * j[a].abs().max(1e-3), "{a}: {fd} vs {}", j[a]);
            }
            checked += 1;
            if checked == 100 {
                break;
            }
        }
        assert_eq!(checked, 100);
    }

    #[test]
    fn single_plane_is_degenerate() {
        let kk = k();
        let mut m = RenderedMaps::empty(Pose::identity(), kk);
        for y in 0..kk.height {
            for x in 0..kk.width {
                let i = m.index.index(x, y);
                m.vertices.data[i] = kk.backproject_unchecked(x as f64, y as f64, 1.5);
                m.normals.data[i] = Vector3::new(0.0, 0.0, -1.0);
                m.depth.data[i] = 1.5;
                m.index.data[i] = 0;
            }
        }
        m.pixel_counts.insert(0, kk.width * kk.height);
        let p = TrackingParams::default();
        let live = preprocess_frame(&Image::new(80, 60, 1.5f32), &kk, &p);
        let systems = partitioned_systems(&m, &live, &Pose::identity(), &p);
        let g = total(&systems);
        let eig = SymmetricEigen::new(g.jtj);
        let max = eig.eigenvalues.max();
        let rank = eig.eigenvalues.iter().filter(|&&l| l > max * 1e-10).count();
        assert_eq!(rank, 3);
        assert!(condition_number(&g.jtj) > 1e8);
        let r = icp_track(&m, &live, &Pose::identity(), &p);
        assert!(r.degenerate);
        assert!(tracking_lost(&r, &p));
    }

    #[test]
    fn lost_rules() {
        let p = TrackingParams::default();
        let mk = |rmse, cov, valid| TrackingResult {
            pose: Pose::identity(),
            systems: BTreeMap::new(),
            global: TargetSystem::default(),
            icp_rmse: rmse,
            valid_fraction: valid,
            instance_coverage: cov,
            degenerate: false,
            energies: vec![],
        };
        assert!(tracking_lost(&mk(0.06, 0.0, 1.0), &p));
        assert!(!tracking_lost(&mk(0.01, 0.05, 0.2), &p));
        assert!(tracking_lost(&mk(0.01, 0.4, 0.3), &p));
    }
}
