//! Layered rendering of object volumes over the coarse background.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;

use crate::background::CoarseVolume;
use crate::geometry::{Intrinsics, Pose};
use crate::image::{Image, Mask, RgbImage};
use crate::tsdf::{ObjectVolume, VoxelGrid};

pub const BACKGROUND_ID: i32 = 0;
pub const NO_HIT: i32 = -1;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct RaycastParams {
    pub min_range: f64,
    pub max_range: f64,
    /// Below this normalised sdf the march switches to half-voxel steps.
    pub fine_step_below: f64,
    /// An object surface up to this far behind the background surface still
    /// wins the pixel.
    pub background_slack: f64,
}

impl Default for RaycastParams {
    fn default() -> Self {
        Self {
            min_range: 0.1,
            max_range: 8.0,
            fine_step_below: 0.8,
            background_slack: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderedMaps {
    pub camera_pose: Pose,
    pub intrinsics: Intrinsics,
    /// Distance along the ray to the surface; zero where nothing was hit.
    pub depth: Image<f32>,
    /// World-frame surface points.
    pub vertices: Image<Vector3<f64>>,
    /// World-frame unit normals.
    pub normals: Image<Vector3<f64>>,
    pub index: Image<i32>,
    pub pixel_counts: BTreeMap<i32, usize>,
}

impl RenderedMaps {
    pub fn empty(camera_pose: Pose, k: Intrinsics) -> Self {
        let (w, h) = (k.width, k.height);
        Self {
            camera_pose,
            intrinsics: k,
            depth: Image::new(w, h, 0.0),
            vertices: Image::new(w, h, Vector3::zeros()),
            normals: Image::new(w, h, Vector3::zeros()),
            index: Image::new(w, h, NO_HIT),
            pixel_counts: BTreeMap::new(),
        }
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.index.data[i] != NO_HIT
    }

    pub fn valid_count(&self) -> usize {
        self.pixel_counts.values().sum()
    }

    /// Pixels covered by object volumes (excludes background).
    pub fn instance_pixels(&self) -> usize {
        self.pixel_counts
            .iter()
            .filter(|(&id, _)| id > BACKGROUND_ID)
            .map(|(_, &n)| n)
            .sum()
    }

    /// Flat-shaded instance colouring with a fixed palette.
    pub fn colour_image(&self) -> RgbImage {
        let mut out = Image::new(self.index.width, self.index.height, [0u8; 3]);
        for (o, &id) in out.data.iter_mut().zip(&self.index.data) {
            *o = instance_colour(id);
        }
        out
    }

    /// 16-bit greyscale PNG with depth in millimetres.
    pub fn save_depth_png(&self, path: &Path) -> Result<(), png::EncodingError> {
        let data: Vec<u16> = self
            .depth
            .data
            .iter()
            .map(|&d| (d as f64 * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        save_png16(path, self.depth.width, self.depth.height, &data)
    }

    /// 16-bit greyscale PNG of the instance index; empty pixels are 65535.
    pub fn save_index_png(&self, path: &Path) -> Result<(), png::EncodingError> {
        let data: Vec<u16> = self
            .index
            .data
            .iter()
            .map(|&i| if i < 0 { u16::MAX } else { i.min(u16::MAX as i32 - 1) as u16 })
            .collect();
        save_png16(path, self.index.width, self.index.height, &data)
    }
}

pub(crate) fn save_png16(path: &Path, w: usize, h: usize, data: &[u16]) -> Result<(), png::EncodingError> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header()?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&bytes)?;
    Ok(())
}

pub fn instance_colour(id: i32) -> [u8; 3] {
    match id {
        NO_HIT => [0, 0, 0],
        BACKGROUND_ID => [128, 128, 128],
        _ => {
            // golden-ratio hue walk
            let h = (id as f64 * 0.618_033_988_75).fract() * 6.0;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as u32 {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [(r * 220.0) as u8 + 30, (g * 220.0) as u8 + 30, (b * 220.0) as u8 + 30]
        }
    }
}

struct Layer<'a> {
    id: i32,
    grid: &'a VoxelGrid,
    pose: Pose,
    world_to_grid: Pose,
    foreground_only: bool,
}

#[derive(Clone, Copy)]
struct Hit {
    t: f64,
    point: Vector3<f64>,
    normal: Vector3<f64>,
}

impl Layer<'_> {
    /// Entry/exit ray parameters against the span of voxel centres.
    fn clip(&self, o: &Vector3<f64>, d: &Vector3<f64>, mut t0: f64, mut t1: f64) -> Option<(f64, f64)> {
        let h = self.grid.half_extent() - 0.5 * self.grid.voxel_size();
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < -h || o[a] > h {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((-h - o[a]) * inv, (h - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }

    /// First positive-to-negative crossing along a world ray in `[t0, t1]`
    /// (for objects, only crossings on foreground).
    fn march(&self, wo: &Vector3<f64>, wd: &Vector3<f64>, t0: f64, t1: f64, p: &RaycastParams) -> Option<Hit> {
        let o = self.world_to_grid.transform_point(wo);
        let d = self.world_to_grid.transform_vector(wd);
        let (t_start, t_end) = self.clip(&o, &d, t0, t1)?;
        let v = self.grid.voxel_size();
        let mut t = t_start;
        // previous sample: (t, value) where value is None for skipped samples
        let mut prev: Option<(f64, Option<f64>)> = None;
        while t <= t_end {
            let pt = o + d * t;
            // a fully truncated nearest voxel means the surface is far away
            match self.grid.nearest_sdf(&pt) {
                Some(1.0) => {
                    prev = Some((t, None));
                    t += v;
                    continue;
                }
                // the nearest voxel is a trilinear corner, so no sample exists
                None => {
                    prev = None;
                    t += v;
                    continue;
                }
                Some(_) => {}
            }
            let Some(s) = self.grid.sample_sdf(&pt) else {
                prev = None;
                t += v;
                continue;
            };
            if s < 0.0 {
                if let Some((tp, sp)) = prev {
                    let sp = sp.or_else(|| self.grid.sample_sdf(&(o + d * tp)));
                    if let Some(sp) = sp.filter(|&x| x > 0.0) {
                        let tc = tp + (t - tp) * sp / (sp - s);
                        if let Some(hit) = self.accept(&o, &d, tc) {
                            return Some(hit);
                        }
                    }
                }
            }
            prev = Some((t, Some(s)));
            t += if s < p.fine_step_below { 0.5 * v } else { v };
        }
        None
    }

    fn accept(&self, o: &Vector3<f64>, d: &Vector3<f64>, t: f64) -> Option<Hit> {
        let pt = o + d * t;
        if self.foreground_only && !(self.grid.sample_foreground(&pt)? > 0.5) {
            return None;
        }
        let g = self.grid.sdf_gradient(&pt)?;
        let n = g.norm();
        if !(n > 1e-12) {
            return None;
        }
        Some(Hit {
            t,
            point: self.pose.transform_point(&pt),
            normal: self.pose.transform_vector(&(g / n)),
        })
    }
}

/// Renders all object volumes and the background from `camera_pose`.
pub fn raycast_layered(
    volumes: &[ObjectVolume],
    background: Option<&CoarseVolume>,
    camera_pose: &Pose,
    k: &Intrinsics,
    params: &RaycastParams,
) -> RenderedMaps {
    let mut maps = RenderedMaps::empty(*camera_pose, *k);
    let bg_layer = background.map(|b| {
        let pose = b.pose();
        Layer {
            id: BACKGROUND_ID,
            grid: &b.grid,
            pose,
            world_to_grid: pose.inverse(),
            foreground_only: false,
        }
    });
    let objects: Vec<Layer> = volumes
        .iter()
        .map(|v| Layer {
            id: v.id as i32,
            grid: v.grid(),
            pose: v.pose,
            world_to_grid: v.pose.inverse(),
            foreground_only: true,
        })
        .collect();
    let origin = camera_pose.translation;
    for y in 0..k.height {
        for x in 0..k.width {
            let r = k.ray(x as f64, y as f64);
            let dir = camera_pose.transform_vector(&r.normalize());
            let bg = bg_layer
                .as_ref()
                .and_then(|l| l.march(&origin, &dir, params.min_range, params.max_range, params));
            let mut limit = params.max_range;
            if let Some(h) = &bg {
                limit = limit.min(h.t + params.background_slack);
            }
            let mut best: Option<(i32, Hit)> = None;
            for l in &objects {
                if let Some(h) = l.march(&origin, &dir, params.min_range, limit, params) {
                    limit = h.t;
                    best = Some((l.id, h));
                }
            }
            let chosen = best.or(bg.map(|h| (BACKGROUND_ID, h)));
            if let Some((id, h)) = chosen {
                let i = maps.index.index(x, y);
                maps.depth.data[i] = h.t as f32;
                maps.vertices.data[i] = h.point;
                maps.normals.data[i] = h.normal;
                maps.index.data[i] = id;
                *maps.pixel_counts.entry(id).or_insert(0) += 1;
            }
        }
    }
    maps
}

/// Binary mask per rendered object id (background excluded).
pub fn render_instance_masks(maps: &RenderedMaps) -> BTreeMap<i32, Mask> {
    let mut out = BTreeMap::new();
    let (w, h) = (maps.index.width, maps.index.height);
    for (i, &id) in maps.index.data.iter().enumerate() {
        if id > BACKGROUND_ID {
            out.entry(id).or_insert_with(|| Image::new(w, h, false)).data[i] = true;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics::new(80.0, 80.0, 39.5, 29.5, 80, 60).unwrap()
    }

    /// Object volume filled from an analytic sdf given in the object frame.
    fn analytic_volume(
        id: u32,
        centre: Vector3<f64>,
        size: f64,
        res: usize,
        fg: bool,
        sdf: impl Fn(Vector3<f64>) -> f64,
    ) -> ObjectVolume {
        let mut v = ObjectVolume::new(id, centre, size, res, 2);
        let mu = 4.0 * v.voxel_size();
        let g = v.grid_mut();
        for kk in 0..res {
            for j in 0..res {
                for i in 0..res {
                    let p = g.voxel_center(i, j, kk);
                    let x = g.voxel_mut(i, j, kk);
                    x.sdf = (sdf(p) / mu).clamp(-1.0, 1.0) as f32;
                    x.weight = 1;
                    if fg {
                        x.fg = 9;
                    }
                }
            }
        }
        v
    }

    #[test]
    fn sphere_depth_at_centre() {
        let r = 0.2;
        let c = Vector3::new(0.0, 0.0, 1.5);
        let vol = analytic_volume(1, c, 0.6, 64, true, |p| p.norm() - r);
        let maps = raycast_layered(&[vol.clone()], None, &Pose::identity(), &k(), &Default::default());
        // pixel (39.5, 29.5) is not a pixel centre; ray oracle for the four central pixels
        for (x, y) in [(39, 29), (40, 30)] {
            let dir = k().ray(x as f64, y as f64).normalize();
            let b = dir.dot(&c);
            let t_true = b - (b * b - (c.norm_squared() - r * r)).sqrt();
            let i = maps.index.index(x, y);
            assert_eq!(maps.index.data[i], 1);
            assert!(((maps.depth.data[i] as f64) - t_true).abs() < 0.5 * vol.voxel_size());
            assert!((maps.normals.data[i].norm() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn prior_foreground_gives_background_only() {
        let c = Vector3::new(0.0, 0.0, 1.5);
        let vol = analytic_volume(3, c, 0.6, 32, false, |p| p.norm() - 0.2);
        let maps = raycast_layered(&[vol], None, &Pose::identity(), &k(), &Default::default());
        assert_eq!(maps.valid_count(), 0);
        assert!(render_instance_masks(&maps).is_empty());
    }

    #[test]
    fn background_plane_and_object_in_front() {
        let bgp = crate::background::BackgroundParams {
            resolution: 96,
            voxel_size: 0.03,
            ..Default::default()
        };
        let mut bg = crate::background::init_background(&Pose::identity(), &bgp);
        // wall at z = 2.5
        let mu = 4.0 * bgp.voxel_size;
        let centre = bg.centre;
        for kk in 0..96 {
            for j in 0..96 {
                for i in 0..96 {
                    let p = bg.grid.voxel_center(i, j, kk) + centre;
                    let x = bg.grid.voxel_mut(i, j, kk);
                    x.sdf = ((2.5 - p.z) / mu).clamp(-1.0, 1.0) as f32;
                    x.weight = 1;
                }
            }
        }
        let vol = analytic_volume(2, Vector3::new(0.0, 0.0, 1.5), 0.6, 48, true, |p| p.norm() - 0.2);
        let maps = raycast_layered(&[vol], Some(&bg), &Pose::identity(), &k(), &Default::default());
        let centre_idx = maps.index.index(40, 30);
        assert_eq!(maps.index.data[centre_idx], 2);
        let corner = maps.index.index(5, 5);
        assert_eq!(maps.index.data[corner], BACKGROUND_ID);
        let masks = render_instance_masks(&maps);
        assert_eq!(masks[&2].count(), maps.pixel_counts[&2]);
        assert_eq!(maps.valid_count(), 80 * 60);
    }

    #[test]
    fn object_slightly_behind_background_still_wins() {
        let bgp = crate::background::BackgroundParams {
            resolution: 64,
            voxel_size: 0.04,
            ..Default::default()
        };
        let mut bg = crate::background::init_background(&Pose::identity(), &bgp);
        let centre = bg.centre;
        for kk in 0..64 {
            for j in 0..64 {
                for i in 0..64 {
                    let p = bg.grid.voxel_center(i, j, kk) + centre;
                    let x = bg.grid.voxel_mut(i, j, kk);
                    x.sdf = ((2.0 - p.z) / 0.16).clamp(-1.0, 1.0) as f32;
                    x.weight = 1;
                }
            }
        }
        // object plane 3 cm behind the wall, then one 8 cm behind
        for (offset, expect) in [(0.03, 5), (0.08, BACKGROUND_ID)] {
            let vol = analytic_volume(5, Vector3::new(0.0, 0.0, 2.0), 0.4, 40, true, |p| offset - p.z);
            let maps = raycast_layered(&[vol], Some(&bg), &Pose::identity(), &k(), &Default::default());
            assert_eq!(maps.index.data[maps.index.index(40, 30)], expect);
        }
    }

    #[test]
    fn nearer_volume_wins_overlap() {
        let a = analytic_volume(1, Vector3::new(-0.05, 0.0, 1.4), 0.6, 48, true, |p| p.norm() - 0.18);
        let b = analytic_volume(2, Vector3::new(0.08, 0.0, 1.55), 0.6, 48, true, |p| p.norm() - 0.18);
        let kk = k();
        let maps = raycast_layered(&[a.clone(), b.clone()], None, &Pose::identity(), &kk, &Default::default());
        let solo_a = raycast_layered(&[a], None, &Pose::identity(), &kk, &Default::default());
        let solo_b = raycast_layered(&[b], None, &Pose::identity(), &kk, &Default::default());
        for i in 0..maps.index.len() {
            let da = if solo_a.is_valid(i) { solo_a.depth.data[i] } else { f32::INFINITY };
            let db = if solo_b.is_valid(i) { solo_b.depth.data[i] } else { f32::INFINITY };
            if da.is_finite() && db.is_finite() && (da - db).abs() > 0.02 {
                let expect = if da < db { 1 } else { 2 };
                assert_eq!(maps.index.data[i], expect);
            }
        }
    }

    #[test]
    fn palette_is_deterministic() {
        assert_eq!(instance_colour(7), instance_colour(7));
        assert_ne!(instance_colour(1), instance_colour(2));
        assert_eq!(instance_colour(NO_HIT), [0, 0, 0]);
    }
}
