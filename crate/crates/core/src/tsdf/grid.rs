use nalgebra::Vector3;

use crate::geometry::{Intrinsics, Pose};
use crate::image::{valid_depth, DepthImage, Mask};

/// One voxel: normalised truncated signed distance, fusion weight and the
/// foreground / not-foreground detection counts of the beta prior.
///
/// Packed to exactly 10 bytes.
#[repr(C, packed)]
#[derive(Clone, Copy, Debug)]
pub struct Voxel {
    pub sdf: f32,
    pub weight: u16,
    pub fg: u16,
    pub bg: u16,
}

pub const VOXEL_BYTES: usize = 10;
const _: () = assert!(std::mem::size_of::<Voxel>() == VOXEL_BYTES);

pub const MAX_WEIGHT: u16 = u16::MAX;

impl Default for Voxel {
    fn default() -> Self {
        Self {
            sdf: 1.0,
            weight: 0,
            fg: 1,
            bg: 1,
        }
    }
}

impl Voxel {
    /// Expected foreground probability `F / (F + N)`.
    pub fn foreground_probability(&self) -> f64 {
        let (f, n) = (self.fg as f64, self.bg as f64);
        f / (f + n)
    }

    pub fn to_le_bytes(self) -> [u8; VOXEL_BYTES] {
        let mut out = [0u8; VOXEL_BYTES];
        let (sdf, w, f, n) = (self.sdf, self.weight, self.fg, self.bg);
        out[0..4].copy_from_slice(&sdf.to_le_bytes());
        out[4..6].copy_from_slice(&w.to_le_bytes());
        out[6..8].copy_from_slice(&f.to_le_bytes());
        out[8..10].copy_from_slice(&n.to_le_bytes());
        out
    }

    pub fn from_le_bytes(b: &[u8]) -> Self {
        Self {
            sdf: f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            weight: u16::from_le_bytes([b[4], b[5]]),
            fg: u16::from_le_bytes([b[6], b[7]]),
            bg: u16::from_le_bytes([b[8], b[9]]),
        }
    }
}

/// Cubic voxel grid whose frame origin sits at the grid centre. Voxel `(i,j,k)`
/// has its centre at `((i + 0.5) - res/2) * voxel_size` along each axis.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    res: usize,
    voxel_size: f64,
    voxels: Vec<Voxel>,
}

impl VoxelGrid {
    pub fn new(res: usize, voxel_size: f64) -> Self {
        Self {
            res,
            voxel_size,
            voxels: vec![Voxel::default(); res * res * res],
        }
    }

    pub fn from_voxels(res: usize, voxel_size: f64, voxels: Vec<Voxel>) -> Self {
        assert_eq!(voxels.len(), res * res * res);
        Self {
            res,
            voxel_size,
            voxels,
        }
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Cube edge length.
    pub fn size(&self) -> f64 {
        self.voxel_size * self.res as f64
    }

    pub fn half_extent(&self) -> f64 {
        0.5 * self.size()
    }

    /// Storage footprint of the voxel array.
    pub fn bytes(&self) -> usize {
        self.voxels.len() * std::mem::size_of::<Voxel>()
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [Voxel] {
        &mut self.voxels
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.res + j) * self.res + i
    }

    #[inline]
    pub fn voxel(&self, i: usize, j: usize, k: usize) -> Voxel {
        self.voxels[self.linear_index(i, j, k)]
    }

    #[inline]
    pub fn voxel_mut(&mut self, i: usize, j: usize, k: usize) -> &mut Voxel {
        let idx = self.linear_index(i, j, k);
        &mut self.voxels[idx]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let h = 0.5 * self.res as f64;
        Vector3::new(
            (i as f64 + 0.5 - h) * self.voxel_size,
            (j as f64 + 0.5 - h) * self.voxel_size,
            (k as f64 + 0.5 - h) * self.voxel_size,
        )
    }

    /// Continuous voxel coordinates of a grid-frame point (voxel centres at
    /// integer positions).
    #[inline]
    pub fn to_voxel_coords(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let off = 0.5 * self.res as f64 - 0.5;
        p / self.voxel_size + Vector3::new(off, off, off)
    }

    pub fn observed_count(&self) -> usize {
        self.voxels.iter().filter(|v| v.weight > 0).count()
    }

    /// Base corner and fractional offsets for trilinear interpolation, if
    /// all eight neighbours are inside the grid.
    #[inline]
    fn cell(&self, p: &Vector3<f64>) -> Option<([usize; 3], [f64; 3])> {
        let g = self.to_voxel_coords(p);
        let max = (self.res - 1) as f64;
        if !(g.x >= 0.0 && g.y >= 0.0 && g.z >= 0.0 && g.x < max && g.y < max && g.z < max) {
            return None;
        }
        let b = [g.x.floor(), g.y.floor(), g.z.floor()];
        Some((
            [b[0] as usize, b[1] as usize, b[2] as usize],
            [g.x - b[0], g.y - b[1], g.z - b[2]],
        ))
    }

    #[inline]
    fn corner_indices(&self, b: [usize; 3]) -> [usize; 8] {
        let base = self.linear_index(b[0], b[1], b[2]);
        let (sy, sz) = (self.res, self.res * self.res);
        [
            base,
            base + 1,
            base + sy,
            base + sy + 1,
            base + sz,
            base + sz + 1,
            base + sz + sy,
            base + sz + sy + 1,
        ]
    }

    #[inline]
    fn trilinear(vals: [f64; 8], f: [f64; 3]) -> f64 {
        let x00 = vals[0] + (vals[1] - vals[0]) * f[0];
        let x10 = vals[2] + (vals[3] - vals[2]) * f[0];
        let x01 = vals[4] + (vals[5] - vals[4]) * f[0];
        let x11 = vals[6] + (vals[7] - vals[6]) * f[0];
        let y0 = x00 + (x10 - x00) * f[1];
        let y1 = x01 + (x11 - x01) * f[1];
        y0 + (y1 - y0) * f[2]
    }

    /// Trilinearly interpolated normalised sdf at a grid-frame point; `None`
    /// outside the grid or when any neighbour is unobserved.
    #[inline]
    pub fn sample_sdf(&self, p: &Vector3<f64>) -> Option<f64> {
        let (b, f) = self.cell(p)?;
        let idx = self.corner_indices(b);
        let mut vals = [0.0; 8];
        for (v, &i) in vals.iter_mut().zip(&idx) {
            let vox = self.voxels[i];
            if vox.weight == 0 {
                return None;
            }
            *v = vox.sdf as f64;
        }
        Some(Self::trilinear(vals, f))
    }

    /// Nearest-voxel sdf, used as a cheap pre-test while marching rays.
    #[inline]
    pub fn nearest_sdf(&self, p: &Vector3<f64>) -> Option<f32> {
        let g = self.to_voxel_coords(p);
        let r = self.res as f64;
        let (x, y, z) = ((g.x + 0.5).floor(), (g.y + 0.5).floor(), (g.z + 0.5).floor());
        if x < 0.0 || y < 0.0 || z < 0.0 || x >= r || y >= r || z >= r {
            return None;
        }
        let v = self.voxels[self.linear_index(x as usize, y as usize, z as usize)];
        if v.weight == 0 {
            None
        } else {
            Some(v.sdf)
        }
    }

    /// Trilinearly interpolated foreground probability.
    pub fn sample_foreground(&self, p: &Vector3<f64>) -> Option<f64> {
        let (b, f) = self.cell(p)?;
        let idx = self.corner_indices(b);
        let mut vals = [0.0; 8];
        for (v, &i) in vals.iter_mut().zip(&idx) {
            *v = self.voxels[i].foreground_probability();
        }
        Some(Self::trilinear(vals, f))
    }

    /// Central-difference gradient of the interpolated sdf, grid frame.
    pub fn sdf_gradient(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let h = self.voxel_size;
        let mut g = Vector3::zeros();
        for a in 0..3 {
            let mut d = Vector3::zeros();
            d[a] = h;
            let plus = self.sample_sdf(&(p + d))?;
            let minus = self.sample_sdf(&(p - d))?;
            g[a] = (plus - minus) / (2.0 * h);
        }
        Some(g)
    }

    /// Visits every voxel whose camera-frame projection lands on a valid depth
    /// pixel and whose ray-scaled signed distance to the measurement exceeds
    /// `-mu`. The callback receives the voxel, the pixel index and the signed
    /// distance in metres.
    ///
    /// Voxel rows along the x axis are clipped analytically against the view
    /// frustum before any per-voxel work.
    pub fn for_each_in_band<F>(
        &mut self,
        grid_pose: &Pose,
        camera_pose: &Pose,
        depth: &DepthImage,
        k: &Intrinsics,
        mu: f64,
        mut visit: F,
    ) -> usize
    where
        F: FnMut(&mut Voxel, usize, f64),
    {
        let t_cg = camera_pose.inverse().compose(grid_pose);
        let (w, h) = (depth.width, depth.height);
        let max_depth = depth
            .data
            .iter()
            .copied()
            .filter(|&d| valid_depth(d))
            .fold(0.0f32, f32::max) as f64;
        if max_depth <= 0.0 {
            return 0;
        }
        let z_near = 1e-3;
        let z_far = max_depth + mu;
        let res = self.res;
        let v = self.voxel_size;
        let step = t_cg.rotation.column(0) * v;
        let (fx, fy, cx, cy) = (k.fx, k.fy, k.cx, k.cy);
        let (wf, hf) = (w as f64, h as f64);
        let mut touched = 0;
        for kk in 0..res {
            for jj in 0..res {
                let base = t_cg.transform_point(&self.voxel_center(0, jj, kk));
                // each frustum plane gives a + b*i >= 0
                let planes = [
                    (base.z - z_near, step.z),
                    (z_far - base.z, -step.z),
                    (
                        fx * base.x + (cx + 0.5) * base.z,
                        fx * step.x + (cx + 0.5) * step.z,
                    ),
                    (
                        -(fx * base.x + (cx + 0.5 - wf) * base.z),
                        -(fx * step.x + (cx + 0.5 - wf) * step.z),
                    ),
                    (
                        fy * base.y + (cy + 0.5) * base.z,
                        fy * step.y + (cy + 0.5) * step.z,
                    ),
                    (
                        -(fy * base.y + (cy + 0.5 - hf) * base.z),
                        -(fy * step.y + (cy + 0.5 - hf) * step.z),
                    ),
                ];
                let (mut lo, mut hi) = (0.0f64, (res - 1) as f64);
                for (a, b) in planes {
                    if b.abs() < 1e-15 {
                        if a < 0.0 {
                            hi = -1.0;
                        }
                    } else if b > 0.0 {
                        lo = lo.max(-a / b);
                    } else {
                        hi = hi.min(-a / b);
                    }
                }
                if hi < lo {
                    continue;
                }
                let i0 = (lo.floor() as isize - 1).max(0) as usize;
                let i1 = ((hi.ceil() as isize + 1).min(res as isize - 1)) as usize;
                let row = (kk * res + jj) * res;
                for i in i0..=i1 {
                    let p = base + step * i as f64;
                    if p.z <= z_near {
                        continue;
                    }
                    let inv_z = 1.0 / p.z;
                    let xn = p.x * inv_z;
                    let yn = p.y * inv_z;
                    let u = fx * xn + cx + 0.5;
                    let vv = fy * yn + cy + 0.5;
                    if !(u >= 0.0 && vv >= 0.0 && u < wf && vv < hf) {
                        continue;
                    }
                    let pix = vv as usize * w + u as usize;
                    let d = depth.data[pix];
                    if !valid_depth(d) {
                        continue;
                    }
                    let sdf = (d as f64 - p.z) * (1.0 + xn * xn + yn * yn).sqrt();
                    if sdf > -mu {
                        visit(&mut self.voxels[row + i], pix, sdf);
                        touched += 1;
                    }
                }
            }
        }
        touched
    }

    /// Weighted running-average fusion of one depth frame with unit weight
    /// per frame. Returns the number of updated voxels.
    pub fn integrate(
        &mut self,
        grid_pose: &Pose,
        camera_pose: &Pose,
        depth: &DepthImage,
        k: &Intrinsics,
        mu: f64,
    ) -> usize {
        let inv_mu = 1.0 / mu;
        self.for_each_in_band(grid_pose, camera_pose, depth, k, mu, |vox, _, sdf| {
            let tsdf = (sdf * inv_mu).min(1.0) as f32;
            let w = vox.weight;
            if w == MAX_WEIGHT {
                // the running mean no longer moves once the weight saturates
                return;
            }
            let wf = w as f32;
            vox.sdf = ((vox.sdf * wf + tsdf) / (wf + 1.0)).clamp(-1.0, 1.0);
            vox.weight = w + 1;
        })
    }

    /// Beta-count update of the per-voxel foreground belief from a binary
    /// mask, restricted to the same band as depth integration.
    pub fn fuse_foreground(
        &mut self,
        grid_pose: &Pose,
        camera_pose: &Pose,
        depth: &DepthImage,
        mask: &Mask,
        k: &Intrinsics,
        mu: f64,
    ) -> usize {
        self.for_each_in_band(grid_pose, camera_pose, depth, k, mu, |vox, pix, _| {
            if mask.data[pix] {
                vox.fg = vox.fg.saturating_add(1);
            } else {
                vox.bg = vox.bg.saturating_add(1);
            }
        })
    }

    pub fn reset(&mut self) {
        self.voxels.fill(Voxel::default());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap()
    }

    #[test]
    fn voxel_is_ten_bytes() {
        assert_eq!(std::mem::size_of::<Voxel>(), 10);
        let g = VoxelGrid::new(64, 0.01);
        assert_eq!(g.bytes(), 2_621_440);
    }

    #[test]
    fn voxel_byte_round_trip() {
        let v = Voxel {
            sdf: -0.25,
            weight: 7,
            fg: 3,
            bg: 65535,
        };
        let b = Voxel::from_le_bytes(&v.to_le_bytes());
        let (s, w, f, n) = (b.sdf, b.weight, b.fg, b.bg);
        assert_eq!((s, w, f, n), (-0.25, 7, 3, 65535));
    }

    #[test]
    fn centres_are_symmetric() {
        let g = VoxelGrid::new(4, 0.5);
        assert_eq!(g.voxel_center(0, 0, 0), Vector3::new(-0.75, -0.75, -0.75));
        assert_eq!(g.voxel_center(3, 3, 3), Vector3::new(0.75, 0.75, 0.75));
        let c = g.to_voxel_coords(&Vector3::new(0.75, -0.75, 0.0));
        assert_eq!(c, Vector3::new(3.0, 0.0, 1.5));
    }

    #[test]
    fn plane_integration_truncates_in_front() {
        // camera at origin looking +z at a plane z = 1; grid centred at z = 1
        let depth = Image::new(64, 48, 1.0f32);
        let mut g = VoxelGrid::new(32, 0.01);
        let gp = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let mu = 0.04;
        g.integrate(&gp, &Pose::identity(), &depth, &k(), mu);
        // voxel at z = 1 - 0.145 (in front by more than mu) is +1
        let v = g.voxel(16, 16, 1);
        assert_eq!({ v.sdf }, 1.0);
        assert_eq!({ v.weight }, 1);
        // voxel just behind the surface
        let c = g.voxel_center(16, 16, 17);
        let v = g.voxel(16, 16, 17);
        let expected = (1.0 - (1.0 + c.z)) / mu;
        let scale = (1.0 + (c.x / (1.0 + c.z)).powi(2) + (c.y / (1.0 + c.z)).powi(2)).sqrt();
        assert!(((v.sdf as f64) - expected * scale).abs() < 1e-6);
        // far behind: untouched
        let v = g.voxel(16, 16, 31);
        assert_eq!({ v.weight }, 0);
    }

    #[test]
    fn two_identical_frames_double_weight() {
        let depth = Image::new(64, 48, 1.0f32);
        let gp = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let mut a = VoxelGrid::new(16, 0.02);
        let mut b = VoxelGrid::new(16, 0.02);
        a.integrate(&gp, &Pose::identity(), &depth, &k(), 0.08);
        b.integrate(&gp, &Pose::identity(), &depth, &k(), 0.08);
        b.integrate(&gp, &Pose::identity(), &depth, &k(), 0.08);
        for (x, y) in a.voxels().iter().zip(b.voxels()) {
            assert_eq!({ x.sdf }, { y.sdf });
            assert_eq!(2 * { x.weight }, { y.weight });
        }
    }

    #[test]
    fn frustum_clipping_matches_brute_force() {
        // compare the clipped traversal against a plain loop over all voxels
        let mut depth = Image::new(64, 48, 0.0f32);
        for y in 0..48 {
            for x in 0..64 {
                depth.set(x, y, 0.8 + 0.004 * x as f32 + 0.002 * y as f32);
            }
        }
        let gp = Pose::new(
            crate::geometry::so3_exp(&Vector3::new(0.3, -0.2, 0.5)),
            Vector3::new(0.05, -0.02, 1.0),
        );
        let cam = Pose::from_axis_angle(&Vector3::new(0.0, 1.0, 0.2), 0.1);
        let mut g = VoxelGrid::new(24, 0.02);
        let mu = 0.08;
        let mut hits = Vec::new();
        g.for_each_in_band(&gp, &cam, &depth, &k(), mu, |_, pix, sdf| hits.push((pix, sdf)));

        let t_cg = cam.inverse().compose(&gp);
        let kk = k();
        let mut brute = Vec::new();
        for z in 0..24 {
            for y in 0..24 {
                for x in 0..24 {
                    let p = t_cg.transform_point(&g.voxel_center(x, y, z));
                    if p.z <= 1e-3 {
                        continue;
                    }
                    let u = kk.project_unchecked(&p);
                    if let Some((px, py)) = kk.pixel_of(&u) {
                        let d = *depth.get(px, py) as f64;
                        let sdf = (d - p.z)
                            * (1.0 + (p.x / p.z).powi(2) + (p.y / p.z).powi(2)).sqrt();
                        if sdf > -mu {
                            brute.push((py * 64 + px, sdf));
                        }
                    }
                }
            }
        }
        assert!(!brute.is_empty());
        assert_eq!(hits.len(), brute.len());
        for (a, b) in hits.iter().zip(&brute) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn foreground_counts_follow_mask() {
        let depth = Image::new(64, 48, 1.0f32);
        let mut mask = Image::new(64, 48, false);
        for y in 0..48 {
            for x in 0..32 {
                mask.set(x, y, true);
            }
        }
        let gp = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let mut g = VoxelGrid::new(16, 0.02);
        let n = g.fuse_foreground(&gp, &Pose::identity(), &depth, &mask, &k(), 0.08);
        assert!(n > 0);
        for v in g.voxels() {
            let (f, b) = (v.fg, v.bg);
            assert!(f + b == 2 || f + b == 3);
        }
        // the left half of the grid projects into the masked half of the image
        let left = g.voxel(2, 8, 8);
        assert_eq!(({ left.fg }, { left.bg }), (2, 1));
        let right = g.voxel(13, 8, 8);
        assert_eq!(({ right.fg }, { right.bg }), (1, 2));
    }

    #[test]
    fn unobserved_neighbours_block_sampling() {
        let mut g = VoxelGrid::new(4, 1.0);
        assert!(g.sample_sdf(&Vector3::zeros()).is_none());
        for v in g.voxels_mut() {
            v.weight = 1;
            v.sdf = 0.5;
        }
        assert!((g.sample_sdf(&Vector3::zeros()).unwrap() - 0.5).abs() < 1e-12);
        // outside the span of voxel centres
        assert!(g.sample_sdf(&Vector3::new(1.6, 0.0, 0.0)).is_none());
    }

    #[test]
    fn interpolated_foreground_midpoint() {
        let mut g = VoxelGrid::new(4, 1.0);
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let v = g.voxel_mut(i, j, k);
                    if i < 2 {
                        v.fg = 4;
                        v.bg = 1;
                    } else {
                        v.fg = 1;
                        v.bg = 4;
                    }
                }
            }
        }
        // midway between voxel centres i = 1 (0.8) and i = 2 (0.2)
        let p = Vector3::new(0.0, 0.0, 0.0);
        assert!((g.sample_foreground(&p).unwrap() - 0.5).abs() < 1e-12);
    }
}
