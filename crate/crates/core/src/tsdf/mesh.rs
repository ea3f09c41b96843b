use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use super::grid::VoxelGrid;
use super::volume::ObjectVolume;
use crate::geometry::Pose;

#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Unnormalised face normal.
    pub fn face_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        (b - a).cross(&(c - a))
    }

    /// ASCII PLY: `element vertex` with float x/y/z, `element face` with a
    /// uchar-counted int index list.
    pub fn write_ply<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "comment triangle mesh, vertices in world frame, metres")?;
        writeln!(w, "element vertex {}", self.vertices.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "element face {}", self.triangles.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
        writeln!(w, "end_header")?;
        for v in &self.vertices {
            writeln!(w, "{:.6} {:.6} {:.6}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    pub fn save_ply(&self, path: &Path) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_ply(&mut w)?;
        w.flush()
    }
}

// corner c sits at offset (c & 1, (c >> 1) & 1, (c >> 2) & 1)
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

// corners of each face in cyclic order
const FACES: [[usize; 4]; 6] = [
    [0, 2, 6, 4],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 3, 7, 6],
    [0, 1, 3, 2],
    [4, 5, 7, 6],
];

fn edge_of(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == key).expect("face corners share an edge")
}

/// Pairs of crossing edges (by cube edge index) for each face, given which
/// corners are inside (sdf < 0). Ambiguous faces are split according to the
/// sign of the bilinear saddle value.
fn face_segments(vals: &[f64; 8], out: &mut Vec<(usize, usize)>) {
    for face in FACES {
        let q = face.map(|c| vals[c]);
        let inside = q.map(|v| v < 0.0);
        let edges: [usize; 4] = [0, 1, 2, 3].map(|i| edge_of(face[i], face[(i + 1) % 4]));
        let crossing: Vec<usize> = (0..4).filter(|&i| inside[i] != inside[(i + 1) % 4]).collect();
        match crossing.len() {
            0 => {}
            2 => out.push((edges[crossing[0]], edges[crossing[1]])),
            4 => {
                let denom = q[0] + q[2] - q[1] - q[3];
                let saddle = if denom.abs() < 1e-300 {
                    0.0
                } else {
                    (q[0] * q[2] - q[1] * q[3]) / denom
                };
                // the corners of the class that does not connect through the
                // face centre each get cut off on their own
                let centre_inside = saddle < 0.0;
                for i in 0..4 {
                    if inside[i] != centre_inside {
                        out.push((edges[(i + 3) % 4], edges[i]));
                    }
                }
            }
            _ => unreachable!("a face cycle crosses zero an even number of times"),
        }
    }
}

/// Closed loops of cube edges traced from the face segments.
fn chain_loops(segments: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj: [[usize; 2]; 12] = [[usize::MAX; 2]; 12];
    for &(a, b) in segments {
        for (x, y) in [(a, b), (b, a)] {
            if adj[x][0] == usize::MAX {
                adj[x][0] = y;
            } else {
                adj[x][1] = y;
            }
        }
    }
    let mut used = [false; 12];
    let mut loops = Vec::new();
    for start in 0..12 {
        if used[start] || adj[start][0] == usize::MAX {
            continue;
        }
        let mut lp = vec![start];
        used[start] = true;
        let mut prev = start;
        let mut cur = adj[start][0];
        while cur != start {
            lp.push(cur);
            used[cur] = true;
            let next = if adj[cur][0] == prev { adj[cur][1] } else { adj[cur][0] };
            prev = cur;
            cur = next;
        }
        loops.push(lp);
    }
    loops
}

/// Marching cubes at the zero level of the grid sdf. When
/// `foreground_only` is set, only cells whose mean corner foreground
/// probability exceeds 0.5 are meshed. Vertices are mapped through
/// `grid_pose` into world coordinates.
pub fn marching_cubes(grid: &VoxelGrid, grid_pose: &Pose, foreground_only: bool) -> TriangleMesh {
    let r = grid.resolution();
    let mut mesh = TriangleMesh::default();
    if r < 2 {
        return mesh;
    }
    let mut index: HashMap<(usize, usize), u32> = HashMap::new();
    let mut segments = Vec::with_capacity(12);
    let voxels = grid.voxels();
    for k in 0..r - 1 {
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let mut vals = [0.0f64; 8];
                let mut ids = [0usize; 8];
                let mut observed = true;
                let mut fg = 0.0;
                let (mut any_in, mut any_out) = (false, false);
                for c in 0..8 {
                    let id = grid.linear_index(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                    let v = voxels[id];
                    if v.weight == 0 {
                        observed = false;
                        break;
                    }
                    ids[c] = id;
                    vals[c] = v.sdf as f64;
                    if vals[c] < 0.0 {
                        any_in = true;
                    } else {
                        any_out = true;
                    }
                    fg += v.foreground_probability();
                }
                if !observed || !(any_in && any_out) {
                    continue;
                }
                if foreground_only && fg / 8.0 <= 0.5 {
                    continue;
                }
                segments.clear();
                face_segments(&vals, &mut segments);
                let corner_pos = |c: usize| {
                    grid.voxel_center(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1))
                };
                // sdf increases outward; gradient from the cell's corner values
                let mut grad = Vector3::zeros();
                for c in 0..8 {
                    let s = [(c & 1), (c >> 1) & 1, (c >> 2) & 1].map(|b| if b == 1 { 1.0 } else { -1.0 });
                    grad += Vector3::new(s[0], s[1], s[2]) * vals[c];
                }
                for lp in chain_loops(&segments) {
                    let local: Vec<Vector3<f64>> = lp
                        .iter()
                        .map(|&e| {
                            let (a, b) = EDGES[e];
                            let t = vals[a] / (vals[a] - vals[b]);
                            corner_pos(a) + (corner_pos(b) - corner_pos(a)) * t
                        })
                        .collect();
                    // Newell area vector decides the winding
                    let mut area = Vector3::zeros();
                    for n in 0..local.len() {
                        area += local[n].cross(&local[(n + 1) % local.len()]);
                    }
                    let flip = area.dot(&grad) < 0.0;
                    let vid: Vec<u32> = lp
                        .iter()
                        .zip(&local)
                        .map(|(&e, p)| {
                            let (a, b) = EDGES[e];
                            let key = (ids[a].min(ids[b]), ids[a].max(ids[b]));
                            *index.entry(key).or_insert_with(|| {
                                mesh.vertices.push(grid_pose.transform_point(p));
                                (mesh.vertices.len() - 1) as u32
                            })
                        })
                        .collect();
                    for n in 1..vid.len() - 1 {
                        let tri = if flip {
                            [vid[0], vid[n + 1], vid[n]]
                        } else {
                            [vid[0], vid[n], vid[n + 1]]
                        };
                        mesh.triangles.push(tri);
                    }
                }
            }
        }
    }
    mesh
}

/// Foreground surface of an object volume in world coordinates.
pub fn extract_mesh(vol: &ObjectVolume) -> TriangleMesh {
    marching_cubes(vol.grid(), &vol.pose, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analytic_grid(res: usize, v: f64, mu: f64, sdf: impl Fn(Vector3<f64>) -> f64) -> VoxelGrid {
        let mut g = VoxelGrid::new(res, v);
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    let p = g.voxel_center(i, j, k);
                    let x = g.voxel_mut(i, j, k);
                    x.sdf = (sdf(p) / mu).clamp(-1.0, 1.0) as f32;
                    x.weight = 1;
                    x.fg = 5;
                }
            }
        }
        g
    }

    #[test]
    fn every_sign_pattern_gives_closed_loops() {
        // all 256 inside/outside patterns, with and without saddle flips
        for pattern in 0..256u32 {
            for bias in [-0.3, 0.3] {
                let mut vals = [0.0; 8];
                for (c, v) in vals.iter_mut().enumerate() {
                    let inside = pattern >> c & 1 == 1;
                    *v = if inside { -1.0 - bias * (c as f64 * 0.1) } else { 1.0 + bias * (c as f64 * 0.07) };
                }
                let mut segs = Vec::new();
                face_segments(&vals, &mut segs);
                let mut deg = [0; 12];
                for &(a, b) in &segs {
                    deg[a] += 1;
                    deg[b] += 1;
                }
                for (e, &(a, b)) in EDGES.iter().enumerate() {
                    let crosses = (vals[a] < 0.0) != (vals[b] < 0.0);
                    assert_eq!(deg[e], if crosses { 2 } else { 0 }, "pattern {pattern}");
                }
                let total: usize = chain_loops(&segs).iter().map(|l| l.len()).sum();
                assert_eq!(total, deg.iter().filter(|&&d| d > 0).count());
            }
        }
    }

    #[test]
    fn sphere_vertices_near_radius() {
        let (res, v) = (40, 0.01);
        let radius = 0.12;
        let g = analytic_grid(res, v, 4.0 * v, |p| p.norm() - radius);
        let pose = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let m = marching_cubes(&g, &pose, true);
        assert!(m.triangles.len() > 500);
        for p in &m.vertices {
            let r = (p - pose.translation).norm();
            assert!((r - radius).abs() < v, "radius {r}");
        }
        // outward orientation
        for t in 0..m.triangles.len() {
            let c = m.triangles[t]
                .iter()
                .map(|&i| m.vertices[i as usize])
                .sum::<Vector3<f64>>()
                / 3.0;
            assert!(m.face_normal(t).dot(&(c - pose.translation)) > 0.0);
        }
    }

    #[test]
    fn plane_normals_match() {
        let n = Vector3::new(0.2, -0.3, 1.0).normalize();
        let g = analytic_grid(24, 0.02, 0.08, |p| n.dot(&p) - 0.013);
        let m = marching_cubes(&g, &Pose::identity(), false);
        assert!(!m.is_empty());
        for t in 0..m.triangles.len() {
            let f = m.face_normal(t);
            if f.norm() < 1e-12 {
                continue;
            }
            let ang = f.normalize().dot(&n).clamp(-1.0, 1.0).acos();
            assert!(ang.to_degrees() < 2.0, "angle {}", ang.to_degrees());
        }
    }

    #[test]
    fn background_counts_give_empty_mesh() {
        let mut g = analytic_grid(16, 0.02, 0.08, |p| p.norm() - 0.1);
        for v in g.voxels_mut() {
            v.fg = 1;
            v.bg = 4;
        }
        assert!(marching_cubes(&g, &Pose::identity(), true).is_empty());
        // prior 0.5 is not foreground either
        for v in g.voxels_mut() {
            v.fg = 1;
            v.bg = 1;
        }
        assert!(marching_cubes(&g, &Pose::identity(), true).is_empty());
    }

    #[test]
    fn ply_header_counts() {
        let m = TriangleMesh {
            vertices: vec![Vector3::zeros(), Vector3::x(), Vector3::y()],
            triangles: vec![[0, 1, 2]],
        };
        let mut buf = Vec::new();
        m.write_ply(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("element vertex 3"));
        assert!(s.contains("element face 1"));
        assert!(s.trim_end().ends_with("3 0 1 2"));
    }
}
