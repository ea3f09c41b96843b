//! Analytic primitive scenes, trajectories and exact RGB-D rendering.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{se3_exp, Intrinsics, Pose, Twist};
use crate::image::{DepthImage, Image, RgbImage};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    TomlRead(#[from] toml::de::Error),
    #[error(transparent)]
    TomlWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Png(#[from] png::EncodingError),
}

/// Pose as it appears in scene and trajectory files.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct PoseSpec {
    pub translation: [f64; 3],
    /// Unit quaternion, scalar last.
    #[serde(default = "identity_quat")]
    pub rotation_xyzw: [f64; 4],
}

fn identity_quat() -> [f64; 4] {
    [0.0, 0.0, 0.0, 1.0]
}

impl From<&Pose> for PoseSpec {
    fn from(p: &Pose) -> Self {
        let q = p.quaternion();
        Self {
            translation: p.translation.into(),
            rotation_xyzw: [q.i, q.j, q.k, q.w],
        }
    }
}

impl From<&PoseSpec> for Pose {
    fn from(s: &PoseSpec) -> Self {
        let [x, y, z, w] = s.rotation_xyzw;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Pose::from_quaternion(Vector3::from(s.translation), &q)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    /// The local z = 0 plane; the solid side is z < 0.
    Plane,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Primitive {
    pub id: u32,
    #[serde(flatten)]
    pub shape: Shape,
    /// Primitive to world.
    pub pose: PoseSpec,
    /// Index into the scene label set; `None` marks structure (floor, walls)
    /// that never produces detections.
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default = "grey")]
    pub colour: [u8; 3],
}

fn grey() -> [u8; 3] {
    [180, 180, 180]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
pub struct SceneSpec {
    pub labels: Vec<String>,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut ids: Vec<u32> = self.primitives.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SynthError::InvalidScene("duplicate primitive id".into()));
        }
        if ids.first() == Some(&0) {
            return Err(SynthError::InvalidScene("primitive id 0 is reserved".into()));
        }
        for p in &self.primitives {
            let ok = match p.shape {
                Shape::Sphere { radius } => radius > 0.0,
                Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
                Shape::Plane => true,
            };
            if !ok {
                return Err(SynthError::InvalidScene(format!("primitive {} has non-positive size", p.id)));
            }
            if p.label.is_some_and(|l| l >= self.labels.len()) {
                return Err(SynthError::InvalidScene(format!("primitive {} label out of range", p.id)));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let s: SceneSpec = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String, SynthError> {
        Ok(toml::to_string(self)?)
    }

    pub fn primitive(&self, id: u32) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.id == id)
    }

    /// Primitives that stand for detectable objects.
    pub fn objects(&self) -> impl Iterator<Item = &Primitive> {
        self.primitives.iter().filter(|p| p.label.is_some())
    }
}

fn primitive_sdf(shape: &Shape, p: &Vector3<f64>) -> f64 {
    match *shape {
        Shape::Sphere { radius } => p.norm() - radius,
        Shape::Box { half_extents } => {
            let q = p.abs() - Vector3::from(half_extents);
            q.map(|x| x.max(0.0)).norm() + q.max().min(0.0)
        }
        Shape::Plane => p.z,
    }
}

/// Signed distance to the union of all primitives.
pub fn analytic_sdf(scene: &SceneSpec, world: &Vector3<f64>) -> f64 {
    scene
        .primitives
        .iter()
        .map(|p| {
            let local = Pose::from(&p.pose).inverse().transform_point(world);
            primitive_sdf(&p.shape, &local)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Nearest positive ray parameter and local-frame normal.
fn intersect(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    match *shape {
        Shape::Sphere { radius } => {
            let a = d.norm_squared();
            let b = o.dot(d);
            let c = o.norm_squared() - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > 0.0)?;
            Some((t, (o + d * t) / radius))
        }
        Shape::Box { half_extents } => {
            let h = Vector3::from(half_extents);
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut n0, mut n1) = (Vector3::zeros(), Vector3::zeros());
            for a in 0..3 {
                if d[a].abs() < 1e-300 {
                    if o[a].abs() > h[a] {
                        return None;
                    }
                    continue;
                }
                let mut ta = (-h[a] - o[a]) / d[a];
                let mut tb = (h[a] - o[a]) / d[a];
                let mut na = Vector3::zeros();
                na[a] = -1.0;
                let mut nb = -na;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                    std::mem::swap(&mut na, &mut nb);
                }
                if ta > t0 {
                    t0 = ta;
                    n0 = na;
                }
                if tb < t1 {
                    t1 = tb;
                    n1 = nb;
                }
            }
            if t0 > t1 {
                return None;
            }
            if t0 > 0.0 {
                Some((t0, n0))
            } else if t1 > 0.0 {
                Some((t1, -n1))
            } else {
                None
            }
        }
        Shape::Plane => {
            if d.z.abs() < 1e-300 {
                return None;
            }
            let t = -o.z / d.z;
            (t > 0.0).then(|| (t, if o.z >= 0.0 { Vector3::z() } else { -Vector3::z() }))
        }
    }
}

/// Depth noise model: Gaussian with `sigma(d) = a + b d^2`, optional
/// millimetre quantisation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DepthNoise {
    pub a: f64,
    pub b: f64,
    pub quantise_mm: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SynthFrame {
    /// z-depth in metres, zero where nothing was hit.
    pub depth: Image<f64>,
    pub rgb: RgbImage,
    /// Primitive id per pixel, 0 where nothing was hit.
    pub index: Image<u32>,
}

impl SynthFrame {
    pub fn depth_f32(&self) -> DepthImage {
        Image::from_vec(
            self.depth.width,
            self.depth.height,
            self.depth.data.iter().map(|&d| d as f32).collect(),
        )
    }
}

const LIGHT: [f64; 3] = [0.3, -0.5, 0.8];

/// Exact per-pixel ray casting of the scene; `noise` perturbs the depth of
/// frame `frame`.
pub fn render_synth(scene: &SceneSpec, camera_pose: &Pose, k: &Intrinsics, noise: Option<(&DepthNoise, u64)>) -> SynthFrame {
    let (w, h) = (k.width, k.height);
    let locals: Vec<(Pose, &Primitive)> = scene
        .primitives
        .iter()
        .map(|p| {
            let pose = Pose::from(&p.pose);
            (pose.inverse().compose(camera_pose), p)
        })
        .collect();
    let light = Vector3::from(LIGHT).normalize();
    let mut depth = Image::new(w, h, 0.0f64);
    let mut rgb = Image::new(w, h, [0u8; 3]);
    let mut index = Image::new(w, h, 0u32);
    for y in 0..h {
        for x in 0..w {
            // unit-z ray, so the hit parameter is the z-depth
            let r = k.ray(x as f64, y as f64);
            let mut best: Option<(f64, Vector3<f64>, &Primitive, Pose)> = None;
            for (cam_in_prim, p) in &locals {
                let o = cam_in_prim.translation;
                let d = cam_in_prim.rotation * r;
                if let Some((t, n)) = intersect(&p.shape, &o, &d) {
                    if best.as_ref().is_none_or(|b| t < b.0) {
                        best = Some((t, n, p, *cam_in_prim));
                    }
                }
            }
            if let Some((t, n_local, p, _)) = best {
                let i = depth.index(x, y);
                depth.data[i] = t;
                index.data[i] = p.id;
                let n_world = Pose::from(&p.pose).transform_vector(&n_local);
                let shade = 0.3 + 0.7 * n_world.dot(&light).max(0.0);
                rgb.data[i] = p.colour.map(|c| (c as f64 * shade).round().min(255.0) as u8);
            }
        }
    }
    if let Some((n, frame)) = noise {
        let mut rng = ChaCha8Rng::seed_from_u64(n.seed ^ frame.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let std = Normal::new(0.0, 1.0).unwrap();
        for d in depth.data.iter_mut().filter(|d| **d > 0.0) {
            let sigma = n.a + n.b * *d * *d;
            *d += sigma * std.sample(&mut rng);
            if n.quantise_mm {
                *d = (*d * 1000.0).round() / 1000.0;
            }
            if *d <= 0.0 {
                *d = 0.0;
            }
        }
    }
    SynthFrame { depth, rgb, index }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Keyframe {
    pub time: f64,
    #[serde(flatten)]
    pub pose: PoseSpec,
}

/// Per-frame random perturbation applied on top of the tracked pose.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct OdometryNoise {
    pub sigma_t: f64,
    pub sigma_r: f64,
    pub seed: u64,
}

impl OdometryNoise {
    /// Deterministic left increment for `frame`.
    pub fn increment(&self, frame: u64) -> Pose {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(frame.wrapping_mul(0x2545_f491_4f6c_dd1d)));
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut v = [0.0; 6];
        for (i, x) in v.iter_mut().enumerate() {
            let s = if i < 3 { self.sigma_t } else { self.sigma_r };
            *x = s * n.sample(&mut rng);
        }
        se3_exp(&Twist::from_slice(&v))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrajectorySpec {
    pub fps: f64,
    pub keyframes: Vec<Keyframe>,
    #[serde(default)]
    pub odometry_noise: Option<OdometryNoise>,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.keyframes.is_empty() {
            return Err(SynthError::InvalidTrajectory("no keyframes".into()));
        }
        if self.keyframes.windows(2).any(|w| w[1].time <= w[0].time) {
            return Err(SynthError::InvalidTrajectory("timestamps must increase strictly".into()));
        }
        if !(self.fps > 0.0) {
            return Err(SynthError::InvalidTrajectory("fps must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let t: TrajectorySpec = toml::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> Result<String, SynthError> {
        Ok(toml::to_string(self)?)
    }

    /// Pose at time `t`: linear in translation, spherical in rotation;
    /// clamped to the keyframe span.
    pub fn pose_at(&self, t: f64) -> Pose {
        let kf = &self.keyframes;
        if t <= kf[0].time {
            return Pose::from(&kf[0].pose);
        }
        let last = kf.len() - 1;
        if t >= kf[last].time {
            return Pose::from(&kf[last].pose);
        }
        let i = kf.partition_point(|k| k.time <= t) - 1;
        let (a, b) = (&kf[i], &kf[i + 1]);
        let s = (t - a.time) / (b.time - a.time);
        let (pa, pb) = (Pose::from(&a.pose), Pose::from(&b.pose));
        let q = pa.quaternion().slerp(&pb.quaternion(), s);
        Pose::from_quaternion(pa.translation.lerp(&pb.translation, s), &q)
    }

    /// Frame timestamps from the first to the last keyframe at `fps`.
    pub fn timestamps(&self) -> Vec<f64> {
        let (t0, t1) = (self.keyframes[0].time, self.keyframes.last().unwrap().time);
        let n = ((t1 - t0) * self.fps + 1e-9).floor() as usize + 1;
        (0..n).map(|i| t0 + i as f64 / self.fps).collect()
    }

    pub fn frame_poses(&self) -> Vec<(f64, Pose)> {
        self.timestamps().into_iter().map(|t| (t, self.pose_at(t))).collect()
    }
}

/// Camera at `eye` looking at `target` with world +z up (camera y down).
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let x = z.cross(&Vector3::z()).normalize();
    let y = z.cross(&x);
    Pose::new(nalgebra::Matrix3::from_columns(&[x, y, z]), eye)
}

/// A complete synthetic sequence definition.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub intrinsics: Intrinsics,
    pub depth_noise: Option<DepthNoise>,
}

/// Named deterministic scenes: `loop-small` (300 frames, two orbits of ten
/// tabletop objects) and `loop-tiny` (a shortened variant for quick tests).
pub fn loop_sequence(name: &str) -> Result<Sequence, SynthError> {
    let frames = match name {
        "loop-small" => 300,
        "loop-tiny" => 60,
        _ => return Err(SynthError::UnknownPreset(name.into())),
    };
    let labels = vec!["ball".to_string(), "crate".to_string(), "tin".to_string()];
    let mut prims = vec![Primitive {
        id: 1,
        shape: Shape::Plane,
        pose: PoseSpec::from(&Pose::identity()),
        label: None,
        colour: [120, 110, 100],
    }];
    let palette = [
        [200, 60, 50],
        [60, 160, 70],
        [60, 90, 200],
        [210, 180, 60],
        [160, 70, 170],
        [60, 180, 180],
        [220, 120, 40],
        [120, 200, 90],
        [150, 150, 230],
        [230, 110, 150],
    ];
    let ring = 0.7;
    for i in 0..10 {
        let a = 2.0 * PI * i as f64 / 10.0 + 0.15;
        let c = Vector3::new(ring * a.cos(), ring * a.sin(), 0.0);
        let id = i as u32 + 2;
        let (shape, label, z, yaw) = match i % 3 {
            0 => (Shape::Sphere { radius: 0.208 }, 0, 0.208, 0.0),
            1 => (Shape::Box { half_extents: [0.169, 0.13, 0.156] }, 1, 0.156, 0.4 * i as f64),
            _ => (Shape::Box { half_extents: [0.117, 0.117, 0.221] }, 2, 0.221, 0.3 * i as f64),
        };
        let pose = Pose::new(
            crate::geometry::so3_exp(&Vector3::new(0.0, 0.0, yaw)),
            c + Vector3::new(0.0, 0.0, z),
        );
        prims.push(Primitive {
            id,
            shape,
            pose: PoseSpec::from(&pose),
            label: Some(label),
            colour: palette[i],
        });
    }
    let scene = SceneSpec {
        labels,
        primitives: prims,
    };
    let fps = 30.0;
    let radius = 1.6;
    let target = Vector3::new(0.0, 0.0, -0.2);
    let keyframes = (0..frames)
        .map(|i| {
            let s = i as f64 / (frames - 1) as f64;
            // two full orbits; the last frame coincides with the first
            let a = 4.0 * PI * s;
            let height = 1.6 + 0.1 * (3.0 * PI * s).sin();
            let eye = Vector3::new(radius * a.cos(), radius * a.sin(), height);
            Keyframe {
                time: i as f64 / fps,
                pose: PoseSpec::from(&look_at(eye, target)),
            }
        })
        .collect();
    Ok(Sequence {
        scene,
        trajectory: TrajectorySpec {
            fps,
            keyframes,
            odometry_noise: None,
        },
        intrinsics: Intrinsics::new(300.0, 300.0, 159.5, 119.5, 320, 240).unwrap(),
        depth_noise: None,
    })
}

/// Fixed surface points per object primitive, used as ground-truth
/// keypoints by the oracle feature extractor. Returns (landmark id,
/// primitive id, world point).
pub fn landmarks(scene: &SceneSpec, per_object: usize, seed: u64) -> Vec<(u64, u32, Vector3<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for p in scene.objects() {
        let pose = Pose::from(&p.pose);
        for j in 0..per_object {
            let local = match p.shape {
                Shape::Sphere { radius } => {
                    let z: f64 = rng.random_range(-1.0..1.0);
                    let phi: f64 = rng.random_range(0.0..2.0 * PI);
                    let r = (1.0 - z * z).sqrt();
                    Vector3::new(r * phi.cos(), r * phi.sin(), z) * radius
                }
                Shape::Box { half_extents } => {
                    let h = Vector3::from(half_extents);
                    let face = rng.random_range(0..6);
                    let mut q = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    q[face / 2] = if face % 2 == 0 { -1.0 } else { 1.0 };
                    q.component_mul(&h)
                }
                Shape::Plane => continue,
            };
            out.push(((p.id as u64) << 32 | j as u64, p.id, pose.transform_point(&local)));
        }
    }
    out
}

/// Writes a rendered sequence in the TUM RGB-D layout: `rgb/`, `depth/`
/// (16-bit, 5000 units per metre), `rgb.txt`, `depth.txt`,
/// `groundtruth.txt`, plus `intrinsics.toml` and, when odometry noise is
/// configured, `odometry_noise.toml`.
pub fn export_tum(seq: &Sequence, dir: &Path) -> Result<usize, SynthError> {
    use std::fmt::Write as _;
    std::fs::create_dir_all(dir.join("rgb"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    let (mut rgb_list, mut depth_list, mut gt) = (String::new(), String::new(), String::new());
    for s in [&mut rgb_list, &mut depth_list] {
        s.push_str("# timestamp filename\n");
    }
    gt.push_str("# timestamp tx ty tz qx qy qz qw\n");
    let k = seq.intrinsics;
    let poses = seq.trajectory.frame_poses();
    for (i, (t, pose)) in poses.iter().enumerate() {
        let f = render_synth(&seq.scene, pose, &k, seq.depth_noise.as_ref().map(|n| (n, i as u64)));
        let name = format!("{t:.6}.png");
        let d16: Vec<u16> = f
            .depth
            .data
            .iter()
            .map(|&d| (d * 5000.0).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        crate::raycast::save_png16(&dir.join("depth").join(&name), k.width, k.height, &d16)?;
        save_rgb_png(&dir.join("rgb").join(&name), &f.rgb)?;
        let _ = writeln!(rgb_list, "{t:.6} rgb/{name}");
        let _ = writeln!(depth_list, "{t:.6} depth/{name}");
        let q = pose.quaternion();
        let _ = writeln!(
            gt,
            "{t:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            pose.translation.x, pose.translation.y, pose.translation.z, q.i, q.j, q.k, q.w
        );
    }
    std::fs::write(dir.join("rgb.txt"), rgb_list)?;
    std::fs::write(dir.join("depth.txt"), depth_list)?;
    std::fs::write(dir.join("groundtruth.txt"), gt)?;
    std::fs::write(dir.join("intrinsics.toml"), toml::to_string(&k)?)?;
    if let Some(n) = &seq.trajectory.odometry_noise {
        std::fs::write(dir.join("odometry_noise.toml"), toml::to_string(n)?)?;
    }
    Ok(poses.len())
}

pub(crate) fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<(), png::EncodingError> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    let bytes: Vec<u8> = img.data.iter().flatten().copied().collect();
    writer.write_image_data(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_scene(r: f64, c: [f64; 3]) -> SceneSpec {
        SceneSpec {
            labels: vec!["ball".into()],
            primitives: vec![Primitive {
                id: 1,
                shape: Shape::Sphere { radius: r },
                pose: PoseSpec {
                    translation: c,
                    rotation_xyzw: identity_quat(),
                },
                label: Some(0),
                colour: [255, 0, 0],
            }],
        }
    }

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 32.0, 24.0, 65, 49).unwrap()
    }

    #[test]
    fn sphere_centre_depth() {
        let f = render_synth(&sphere_scene(0.5, [0.0, 0.0, 2.0]), &Pose::identity(), &k(), None);
        assert_eq!(*f.depth.get(32, 24), 1.5);
        assert_eq!(*f.index.get(32, 24), 1);
        assert_eq!(*f.index.get(0, 0), 0);
    }

    #[test]
    fn empty_scene_is_invalid() {
        let f = render_synth(&SceneSpec::default(), &Pose::identity(), &k(), None);
        assert!(f.depth.data.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn fronto_parallel_plane() {
        let s = SceneSpec {
            labels: vec![],
            primitives: vec![Primitive {
                id: 1,
                shape: Shape::Plane,
                pose: PoseSpec {
                    translation: [0.0, 0.0, 3.0],
                    rotation_xyzw: identity_quat(),
                },
                label: None,
                colour: grey(),
            }],
        };
        let f = render_synth(&s, &Pose::identity(), &k(), None);
        assert!(f.depth.data.iter().all(|&d| d == 3.0));
    }

    #[test]
    fn depth_matches_ray_oracle() {
        let seq = loop_sequence("loop-tiny").unwrap();
        let (_, pose) = seq.trajectory.frame_poses()[7];
        let kk = seq.intrinsics;
        let f = render_synth(&seq.scene, &pose, &kk, None);
        let mut checked = 0;
        for y in (0..kk.height).step_by(9) {
            for x in (0..kk.width).step_by(9) {
                let d = *f.depth.get(x, y);
                if d == 0.0 {
                    continue;
                }
                // the hit lies on the surface of the primitive named by the index map
                let p = pose.transform_point(&kk.backproject_unchecked(x as f64, y as f64, d));
                let prim = seq.scene.primitive(*f.index.get(x, y)).unwrap();
                let local = Pose::from(&prim.pose).inverse().transform_point(&p);
                assert!(primitive_sdf(&prim.shape, &local).abs() < 1e-9);
                // and nothing is in front of it
                let steps = 200;
                for s in 1..steps {
                    let q = pose.transform_point(&kk.backproject_unchecked(x as f64, y as f64, d * s as f64 / steps as f64));
                    assert!(analytic_sdf(&seq.scene, &q) > -1e-9);
                }
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn sdf_examples() {
        let s = sphere_scene(0.5, [0.0; 3]);
        assert!((analytic_sdf(&s, &Vector3::x()) - 0.5).abs() < 1e-15);
        assert!((analytic_sdf(&s, &Vector3::zeros()) + 0.5).abs() < 1e-15);
        let b = Shape::Box { half_extents: [1.0; 3] };
        assert_eq!(primitive_sdf(&b, &Vector3::new(2.0, 0.0, 0.0)), 1.0);
        assert_eq!(primitive_sdf(&b, &Vector3::new(0.5, 0.0, 0.0)), -0.5);
    }

    #[test]
    fn loop_small_closes() {
        let seq = loop_sequence("loop-small").unwrap();
        let poses = seq.trajectory.frame_poses();
        assert_eq!(poses.len(), 300);
        let n = seq.scene.objects().count();
        assert!((8..=15).contains(&n));
        let d = poses[0].1.distance(&poses[299].1);
        assert!(d.0 < 0.05);
        assert!(matches!(loop_sequence("nope"), Err(SynthError::UnknownPreset(_))));
    }

    #[test]
    fn noise_is_seeded() {
        let seq = loop_sequence("loop-tiny").unwrap();
        let (_, pose) = seq.trajectory.frame_poses()[3];
        let n = DepthNoise {
            a: 0.001,
            b: 0.002,
            quantise_mm: true,
            seed: 5,
        };
        let a = render_synth(&seq.scene, &pose, &seq.intrinsics, Some((&n, 3)));
        let b = render_synth(&seq.scene, &pose, &seq.intrinsics, Some((&n, 3)));
        assert_eq!(a.depth.data, b.depth.data);
        let clean = render_synth(&seq.scene, &pose, &seq.intrinsics, None);
        assert_ne!(a.depth.data, clean.depth.data);
        let o = OdometryNoise {
            sigma_t: 0.002,
            sigma_r: 0.001,
            seed: 1,
        };
        assert_eq!(o.increment(4), o.increment(4));
        assert_ne!(o.increment(4), o.increment(5));
    }

    #[test]
    fn interpolation_between_keyframes() {
        let a = Pose::identity();
        let b = Pose::new(crate::geometry::so3_exp(&Vector3::new(0.0, 0.0, 0.4)), Vector3::new(1.0, 0.0, 0.0));
        let t = TrajectorySpec {
            fps: 10.0,
            keyframes: vec![
                Keyframe { time: 0.0, pose: PoseSpec::from(&a) },
                Keyframe { time: 1.0, pose: PoseSpec::from(&b) },
            ],
            odometry_noise: None,
        };
        assert_eq!(t.timestamps().len(), 11);
        let m = t.pose_at(0.5);
        assert!((m.translation - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        assert!((m.rotation_angle() - 0.2).abs() < 1e-12);
        let text = t.to_toml().unwrap();
        assert_eq!(TrajectorySpec::from_toml(&text).unwrap(), t);
        let bad = TrajectorySpec {
            keyframes: vec![t.keyframes[1], t.keyframes[0]],
            ..t.clone()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scene_toml_round_trip() {
        let seq = loop_sequence("loop-tiny").unwrap();
        let text = seq.scene.to_toml().unwrap();
        assert_eq!(SceneSpec::from_toml(&text).unwrap(), seq.scene);
    }

    #[test]
    fn look_at_points_forward() {
        let p = look_at(Vector3::new(2.0, 0.0, 1.0), Vector3::zeros());
        let fwd = p.transform_vector(&Vector3::z());
        assert!((fwd - Vector3::new(-2.0, 0.0, -1.0).normalize()).norm() < 1e-12);
        assert!(p.transform_vector(&Vector3::y()).z < 0.0);
        assert!((p.rotation.determinant() - 1.0).abs() < 1e-12);
    }
}
