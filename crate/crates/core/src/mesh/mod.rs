//! Zero-level-set extraction with marching cubes, and mesh files.

mod io;
mod tables;

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::sdf::SdfField;

pub use io::{export_obj, export_ply, import_obj, import_ply, read_ply, write_obj, write_ply};
use tables::{CORNERS, EDGES, TRI_TABLE};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::MeshFormat("triangle index out of range".into()));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.vertices.len() {
                return Err(Error::MeshFormat("one normal per vertex required".into()));
            }
        }
        Ok(())
    }

    fn edge_uses(&self) -> HashMap<(u32, u32), u32> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_uses().len() as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        self.edge_uses().values().all(|&c| c == 2)
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        0.5 * (b - a).cross(c - a).norm()
    }

    /// Per-vertex normals from the field gradient; vertices with a vanishing
    /// gradient get a zero normal.
    pub fn with_field_normals(mut self, field: &dyn SdfField) -> Self {
        let normals = surface_normals(field, &self.vertices)
            .into_iter()
            .map(|n| n.unwrap_or(Vec3::ZERO))
            .collect();
        self.normals = Some(normals);
        self
    }
}

/// Axis-aligned box sampled by the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn cube(half: f64) -> Self {
        Self {
            min: Vec3::splat(-half),
            max: Vec3::splat(half),
        }
    }

    /// Largest cell edge for a grid of `resolution` cells per axis.
    pub fn cell_size(&self, resolution: usize) -> f64 {
        (self.max - self.min).max_elem() / resolution as f64
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self::cube(1.0)
    }
}

/// Extracts the zero level set on a grid of `resolution` cells per axis.
///
/// Vertices are interpolated linearly along sign-changing grid edges and
/// shared between neighbouring cells, so closed surfaces strictly inside the
/// bounds give closed meshes. Negative values count as inside. A grid with
/// no sign change gives an empty mesh.
pub fn marching_cubes(field: &dyn SdfField, bounds: Bounds, resolution: usize) -> Result<TriangleMesh> {
    if resolution < 8 {
        return Err(Error::InvalidConfig(format!("marching cubes needs resolution >= 8 (got {resolution})")));
    }
    let ext = bounds.max - bounds.min;
    if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
        return Err(Error::InvalidConfig("mesh bounds must have positive extent".into()));
    }
    let n = resolution;
    let np = n + 1;
    let step = Vec3::new(ext.x / n as f64, ext.y / n as f64, ext.z / n as f64);
    let point = |i: usize, j: usize, k: usize| bounds.min + Vec3::new(i as f64, j as f64, k as f64).mul_elem(step);
    let values: Vec<f64> = (0..np)
        .into_par_iter()
        .flat_map_iter(|k| {
            let pts: Vec<Vec3> = (0..np).flat_map(|j| (0..np).map(move |i| (i, j))).map(|(i, j)| point(i, j, k)).collect();
            let mut out = vec![0.0; pts.len()];
            field.distance_batch(&pts, &mut out);
            out
        })
        .collect();
    let idx = |i: usize, j: usize, k: usize| (k * np + j) * np + i;

    let mut mesh = TriangleMesh::default();
    let mut lookup: HashMap<u64, u32> = HashMap::new();
    let corner_space = (np * np * np * 3) as u64;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let c: [[usize; 3]; 8] = CORNERS.map(|o| [i + o[0], j + o[1], k + o[2]]);
                let v: [f64; 8] = c.map(|p| values[idx(p[0], p[1], p[2])]);
                let case = (0..8).fold(0usize, |m, q| if v[q] < 0.0 { m | (1 << q) } else { m });
                if case == 0 || case == 255 {
                    continue;
                }
                let mut edge_vertex = [u32::MAX; 12];
                for (e, &[a, b]) in EDGES.iter().enumerate() {
                    if (v[a] < 0.0) == (v[b] < 0.0) {
                        continue;
                    }
                    let t = v[a] / (v[a] - v[b]);
                    let (pa, pb) = (c[a], c[b]);
                    let key = if t == 0.0 || t == 1.0 {
                        let p = if t == 0.0 { pa } else { pb };
                        corner_space + idx(p[0], p[1], p[2]) as u64
                    } else {
                        let lo = if idx(pa[0], pa[1], pa[2]) < idx(pb[0], pb[1], pb[2]) { pa } else { pb };
                        let axis = (0..3).find(|&d| pa[d] != pb[d]).expect("edge spans one axis");
                        (idx(lo[0], lo[1], lo[2]) * 3 + axis) as u64
                    };
                    edge_vertex[e] = *lookup.entry(key).or_insert_with(|| {
                        let pa = point(pa[0], pa[1], pa[2]);
                        let pb = point(pb[0], pb[1], pb[2]);
                        mesh.vertices.push(pa + (pb - pa) * t);
                        (mesh.vertices.len() - 1) as u32
                    });
                }
                for tri in TRI_TABLE[case].chunks(3).take_while(|t| t[0] >= 0) {
                    let [a, b, c] = [tri[0], tri[2], tri[1]].map(|e| edge_vertex[e as usize]);
                    debug_assert!(a != u32::MAX && b != u32::MAX && c != u32::MAX, "table uses a non-crossing edge");
                    if a == b || b == c || a == c {
                        continue;
                    }
                    mesh.triangles.push([a, b, c]);
                }
            }
        }
    }
    Ok(mesh)
}

/// Unit gradient at each point, or `None` where the gradient vanishes.
pub fn surface_normals(field: &dyn SdfField, points: &[Vec3]) -> Vec<Option<Vec3>> {
    field
        .gradient_batch(points)
        .into_iter()
        .map(|g| {
            let n = g.norm();
            (n > 1e-9 && n.is_finite()).then(|| g / n)
        })
        .collect()
}

/// Distance from `p` to triangle `abc`.
fn point_triangle_distance(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(ap), ac.dot(ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(bp), ac.dot(bp));
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return (p - (a + ab * (d1 / (d1 - d3)))).norm();
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(cp), ac.dot(cp));
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return (p - (a + ac * (d2 / (d2 - d6)))).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let (v, w) = (vb * denom, vc * denom);
    (p - (a + ab * v + ac * w)).norm()
}

/// Largest distance from a vertex of `from` to the surface of `to`.
fn one_sided(from: &TriangleMesh, to: &TriangleMesh) -> f64 {
    from.vertices
        .par_iter()
        .map(|&p| {
            to.triangles
                .iter()
                .map(|t| {
                    let [a, b, c] = t.map(|i| to.vertices[i as usize]);
                    point_triangle_distance(p, a, b, c)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max)
}

/// Symmetric Hausdorff distance measured from the vertices of each mesh
/// to the triangles of the other. Brute force; meant for test-sized meshes.
pub fn hausdorff(a: &TriangleMesh, b: &TriangleMesh) -> f64 {
    one_sided(a, b).max(one_sided(b, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::{AnalyticScene, AnalyticSdf, SceneColor};

    fn scene(sdf: AnalyticSdf) -> AnalyticScene {
        AnalyticScene::new(sdf, SceneColor::default())
    }

    #[test]
    fn triangle_table_uses_exactly_the_crossing_edges() {
        for (case, row) in TRI_TABLE.iter().enumerate() {
            let crossing: u16 = EDGES
                .iter()
                .enumerate()
                .filter(|(_, [a, b])| ((case >> a) & 1) != ((case >> b) & 1))
                .fold(0, |m, (e, _)| m | (1 << e));
            let used: u16 = row.iter().take_while(|&&e| e >= 0).fold(0, |m, &e| m | (1 << e));
            assert_eq!(used, crossing, "case {case}");
            assert_eq!(row.iter().take_while(|&&e| e >= 0).count() % 3, 0);
        }
    }

    #[test]
    fn unit_sphere_mesh() {
        let bounds = Bounds::cube(1.5);
        let mesh = marching_cubes(&scene(AnalyticSdf::unit_sphere()), bounds, 64).unwrap();
        let cell = bounds.cell_size(64);
        assert!(mesh.vertices.len() > 1000);
        for v in &mesh.vertices {
            assert!((v.norm() - 1.0).abs() < 2.0 * cell, "{v:?}");
        }
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.is_watertight());
        // Triangles wind counter-clockwise seen from outside.
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let [a, b, c] = tri.map(|i| mesh.vertices[i as usize]);
            let n = (b - a).cross(c - a);
            assert!(n.dot(a + b + c) > 0.0, "triangle {t} faces inward");
            assert!(mesh.triangle_area(t) > 0.0);
        }
    }

    #[test]
    fn box_and_torus_topology() {
        let b = scene(AnalyticSdf::cuboid(Vec3::new(0.05, -0.02, 0.01), Vec3::new(0.6, 0.4, 0.5)));
        let m = marching_cubes(&b, Bounds::cube(1.0), 24).unwrap();
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.is_watertight());
        let t = scene(AnalyticSdf::Torus {
            center: Vec3::ZERO,
            major: 0.6,
            minor: 0.2,
        });
        let m = marching_cubes(&t, Bounds::cube(1.0), 32).unwrap();
        assert_eq!(m.euler_characteristic(), 0);
        assert!(m.is_watertight());
    }

    #[test]
    fn vertices_lie_near_the_level_set() {
        let field = scene(AnalyticSdf::two_spheres());
        let bounds = Bounds::cube(1.0);
        let m = marching_cubes(&field, bounds, 32).unwrap();
        let diag = bounds.cell_size(32) * 3f64.sqrt();
        for v in &m.vertices {
            assert!(field.distance(*v).abs() < diag);
        }
    }

    #[test]
    fn empty_grid_gives_empty_mesh() {
        let far = scene(AnalyticSdf::sphere(Vec3::splat(5.0), 0.5));
        let m = marching_cubes(&far, Bounds::cube(1.0), 16).unwrap();
        assert!(m.vertices.is_empty() && m.triangles.is_empty());
        assert!(marching_cubes(&far, Bounds::cube(1.0), 4).is_err());
    }

    #[test]
    fn exact_zeros_on_grid_points_stay_manifold() {
        // Radius 0.5 on a grid with spacing 0.125 puts vertices exactly on
        // grid points.
        let s = scene(AnalyticSdf::sphere(Vec3::ZERO, 0.5));
        let m = marching_cubes(&s, Bounds::cube(1.0), 16).unwrap();
        assert!(m.triangles.iter().all(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2]));
        assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn refinement_converges() {
        let s = scene(AnalyticSdf::cuboid(Vec3::ZERO, Vec3::new(0.5, 0.35, 0.45)));
        let bounds = Bounds::cube(1.0);
        let coarse = marching_cubes(&s, bounds, 16).unwrap();
        let fine = marching_cubes(&s, bounds, 32).unwrap();
        assert!(hausdorff(&coarse, &fine) < bounds.cell_size(16));
        let ball = scene(AnalyticSdf::sphere(Vec3::new(0.1, 0.0, -0.05), 0.6));
        let coarse = marching_cubes(&ball, bounds, 16).unwrap();
        let fine = marching_cubes(&ball, bounds, 32).unwrap();
        assert!(hausdorff(&coarse, &fine) < bounds.cell_size(16));
    }

    #[test]
    fn normals_examples() {
        let sphere = scene(AnalyticSdf::unit_sphere());
        let n = surface_normals(&sphere, &[Vec3::X]);
        assert!((n[0].unwrap() - Vec3::X).norm() < 1e-12);
        // A flat field has no normal anywhere.
        struct Flat;
        impl SdfField for Flat {
            fn distance_batch(&self, _: &[Vec3], out: &mut [f64]) {
                out.fill(0.0);
            }
            fn shade_batch(&self, _: &[Vec3], _: &[Vec3], dist: &mut [f64], rgb: &mut [[f64; 3]]) {
                dist.fill(0.0);
                rgb.fill([0.0; 3]);
            }
            fn gradient(&self, _: Vec3) -> Vec3 {
                Vec3::ZERO
            }
        }
        assert!(surface_normals(&Flat, &[Vec3::X])[0].is_none());
        let plane = scene(AnalyticSdf::plane(Vec3::Z, 0.0));
        for p in [Vec3::new(0.3, -2.0, 0.01), Vec3::new(5.0, 1.0, -0.02)] {
            assert!((surface_normals(&plane, &[p])[0].unwrap() - Vec3::Z).norm() < 1e-12);
        }
    }

    #[test]
    fn point_triangle_distance_regions() {
        let (a, b, c) = (Vec3::ZERO, Vec3::X, Vec3::Y);
        assert!((point_triangle_distance(Vec3::new(0.2, 0.2, 0.5), a, b, c) - 0.5).abs() < 1e-12);
        assert!((point_triangle_distance(Vec3::new(-1.0, -1.0, 0.0), a, b, c) - 2f64.sqrt()).abs() < 1e-12);
        assert!((point_triangle_distance(Vec3::new(0.5, -1.0, 0.0), a, b, c) - 1.0).abs() < 1e-12);
        assert!((point_triangle_distance(Vec3::new(1.0, 1.0, 0.0), a, b, c) - 0.5f64.sqrt()).abs() < 1e-12);
    }
}
