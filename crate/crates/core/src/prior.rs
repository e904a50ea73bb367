//! Depth initialization from sparse observations.
//!
//! Observations are projected into the image and triangulated (2D Delaunay in
//! pixel space). Every pixel whose center lies inside a triangle starts at the
//! depth where its viewing ray meets the plane through the triangle's three
//! 3D points; all other pixels copy the depth of the nearest projected
//! observation.

use nalgebra::Vector3;
use spade::{DelaunayTriangulation, HasPosition, Point2, Triangulation};

use crate::error::{config_err, Result};
use crate::geometry::{project_point, CameraModel, DepthField, ImageGrid, RayField};
use crate::kdtree::KdTree;
use crate::problem::{DepthBounds, ObservationSet};

/// Minimum image-space triangle area kept in a mesh, in square pixels.
pub const MIN_TRIANGLE_AREA: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedEntry {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// Camera-frame 3D point.
    pub point: Vector3<f64>,
    /// Index into the original observation list or point cloud.
    pub source: usize,
}

/// Observations in image coordinates together with a 2D kd-tree over them.
#[derive(Debug, Clone)]
pub struct ProjectedObservations {
    entries: Vec<ProjectedEntry>,
    tree: KdTree<2>,
}

impl ProjectedObservations {
    pub fn new(entries: Vec<ProjectedEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !(e.depth.is_finite() && e.depth > 0.0)) {
            return Err(config_err(format!(
                "projected observation {} has invalid depth {}",
                e.source, e.depth
            )));
        }
        let tree = build_kdtree(&entries)?;
        Ok(Self { entries, tree })
    }

    /// Observations placed at the centers of their pixels.
    pub fn from_observations(rays: &RayField, obs: &ObservationSet) -> Result<Self> {
        let grid = rays.grid();
        let entries = obs
            .iter()
            .enumerate()
            .map(|(n, o)| {
                let (col, row) = grid.coords(o.pixel);
                ProjectedEntry {
                    u: col as f64,
                    v: row as f64,
                    depth: o.depth,
                    point: rays.point(o.pixel, o.depth),
                    source: n,
                }
            })
            .collect();
        Self::new(entries)
    }

    /// Projects sensor-frame points, dropping those out of view.
    pub fn from_points(camera: &CameraModel, grid: &ImageGrid, points: &[Vector3<f64>]) -> Result<Self> {
        let entries = points
            .iter()
            .enumerate()
            .filter_map(|(n, p)| {
                project_point(camera, grid, p).map(|pr| ProjectedEntry {
                    u: pr.u,
                    v: pr.v,
                    depth: pr.depth,
                    point: pr.point,
                    source: n,
                })
            })
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[ProjectedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry closest to continuous pixel coordinates `(u, v)`.
    pub fn nearest(&self, u: f64, v: f64) -> &ProjectedEntry {
        &self.entries[self.tree.nearest(&[u, v]).index]
    }

    pub fn depth_range(&self) -> (f64, f64) {
        self.entries
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
                (lo.min(e.depth), hi.max(e.depth))
            })
    }
}

/// 2D kd-tree over the pixel coordinates of the entries.
pub fn build_kdtree(entries: &[ProjectedEntry]) -> Result<KdTree<2>> {
    KdTree::build(entries.iter().map(|e| [e.u, e.v]).collect())
        .ok_or_else(|| config_err("no observations: upsampling needs at least one depth"))
}

/// Triangles over projected observations, vertices given as entry indices in
/// counter-clockwise image order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub triangles: Vec<[usize; 3]>,
    /// `[u_min, v_min, u_max, v_max]` per triangle.
    pub bounds: Vec<[f64; 4]>,
}

impl TriangleMesh {
    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

struct MeshVertex {
    position: Point2<f64>,
    entry: usize,
}

impl HasPosition for MeshVertex {
    type Scalar = f64;

    fn position(&self) -> Point2<f64> {
        self.position
    }
}

/// Delaunay triangulation of the projected observations. Collinear or too
/// small inputs give an empty mesh.
pub fn triangulate(obs: &ProjectedObservations) -> TriangleMesh {
    let mut dt: DelaunayTriangulation<MeshVertex> = DelaunayTriangulation::new();
    for (entry, e) in obs.entries().iter().enumerate() {
        let vertex = MeshVertex {
            position: Point2::new(e.u, e.v),
            entry,
        };
        // Only fails for non-finite coordinates, which projection never produces.
        if dt.insert(vertex).is_err() {
            log::warn!("skipping observation {entry} with invalid image position");
        }
    }
    let mut mesh = TriangleMesh::default();
    for face in dt.inner_faces() {
        let [a, b, c] = face.vertices().map(|v| v.data().entry);
        let pa = &obs.entries()[a];
        let pb = &obs.entries()[b];
        let pc = &obs.entries()[c];
        let area = 0.5 * ((pb.u - pa.u) * (pc.v - pa.v) - (pc.u - pa.u) * (pb.v - pa.v));
        if area.abs() <= MIN_TRIANGLE_AREA {
            continue;
        }
        let tri = if area > 0.0 { [a, b, c] } else { [a, c, b] };
        mesh.triangles.push(tri);
        mesh.bounds.push([
            pa.u.min(pb.u).min(pc.u),
            pa.v.min(pb.v).min(pc.v),
            pa.u.max(pb.u).max(pc.u),
            pa.v.max(pb.v).max(pc.v),
        ]);
    }
    mesh
}

/// Inclusive point-in-triangle test for a counter-clockwise triangle.
fn contains(tri: [&ProjectedEntry; 3], u: f64, v: f64) -> bool {
    let edge = |a: &ProjectedEntry, b: &ProjectedEntry| {
        let scale = (b.u - a.u).abs() + (b.v - a.v).abs();
        (b.u - a.u) * (v - a.v) - (b.v - a.v) * (u - a.u) >= -1e-12 * scale.max(1.0)
    };
    edge(tri[0], tri[1]) && edge(tri[1], tri[2]) && edge(tri[2], tri[0])
}

/// Initial depth for every pixel; see the module docs. Results are clamped
/// into `bounds` so that the start point is feasible for the solver.
pub fn init_depth(
    rays: &RayField,
    obs: &ProjectedObservations,
    mesh: &TriangleMesh,
    bounds: DepthBounds,
) -> Result<DepthField> {
    let grid = rays.grid();
    if obs.is_empty() {
        return Err(config_err("no observations: upsampling needs at least one depth"));
    }
    let mut depth: Vec<Option<f64>> = vec![None; grid.len()];
    let entries = obs.entries();
    for (tri, bb) in mesh.triangles.iter().zip(&mesh.bounds) {
        let verts = tri.map(|i| &entries[i]);
        let normal = (verts[1].point - verts[0].point).cross(&(verts[2].point - verts[0].point));
        let len = normal.norm();
        if !(len > 0.0) {
            continue;
        }
        let normal = normal / len;
        let offset = normal.dot(&verts[0].point);
        let col0 = bb[0].ceil().max(0.0) as usize;
        let row0 = bb[1].ceil().max(0.0) as usize;
        let col1 = (bb[2].floor().max(-1.0) as isize).min(grid.width() as isize - 1);
        let row1 = (bb[3].floor().max(-1.0) as isize).min(grid.height() as isize - 1);
        if col1 < 0 || row1 < 0 {
            continue;
        }
        for row in row0..=row1 as usize {
            for col in col0..=col1 as usize {
                let pixel = grid.index(col, row);
                if depth[pixel].is_some() || !contains(verts, col as f64, row as f64) {
                    continue;
                }
                // Parallel rays and intersections behind the origin fall back to the nearest neighbor.
                if let Some(d) = rays.plane_intersection(pixel, &normal, offset) {
                    if d.is_finite() && d > 0.0 {
                        depth[pixel] = Some(d);
                    }
                }
            }
        }
    }
    let depths = depth
        .into_iter()
        .enumerate()
        .map(|(pixel, d)| {
            let d = d.unwrap_or_else(|| {
                let (col, row) = grid.coords(pixel);
                obs.nearest(col as f64, row as f64).depth
            });
            bounds.clamp(d)
        })
        .collect();
    DepthField::new(grid, depths)
}

/// Mean observed depth at every pixel, clamped into `bounds`.
pub fn init_constant(grid: ImageGrid, obs: &ObservationSet, bounds: DepthBounds) -> Result<DepthField> {
    if obs.is_empty() {
        return Err(config_err("no observations: upsampling needs at least one depth"));
    }
    let mean = obs.iter().map(|o| o.depth).sum::<f64>() / obs.len() as f64;
    DepthField::constant(grid, bounds.clamp(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_ray_field;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(u: f64, v: f64, depth: f64, source: usize) -> ProjectedEntry {
        ProjectedEntry {
            u,
            v,
            depth,
            point: Vector3::new(u, v, depth),
            source,
        }
    }

    fn wide_bounds() -> DepthBounds {
        DepthBounds::new(1e-3, 1e3).unwrap()
    }

    #[test]
    fn empty_observations_rejected() {
        assert!(ProjectedObservations::new(Vec::new()).is_err());
    }

    #[test]
    fn nearest_examples() {
        let obs = ProjectedObservations::new(vec![entry(0.0, 0.0, 1.0, 0), entry(5.0, 5.0, 2.0, 1)]).unwrap();
        assert_eq!(obs.nearest(1.0, 1.0).source, 0);
        let single = ProjectedObservations::new(vec![entry(3.0, 3.0, 1.0, 0)]).unwrap();
        assert_eq!(single.nearest(-40.0, 90.0).source, 0);
    }

    #[test]
    fn three_points_one_triangle() {
        let obs = ProjectedObservations::new(vec![
            entry(0.0, 0.0, 1.0, 0),
            entry(4.0, 0.0, 1.0, 1),
            entry(0.0, 4.0, 1.0, 2),
        ])
        .unwrap();
        assert_eq!(triangulate(&obs).len(), 1);
    }

    #[test]
    fn convex_quad_two_triangles_sharing_edge() {
        let obs = ProjectedObservations::new(vec![
            entry(0.0, 0.0, 1.0, 0),
            entry(4.0, 0.5, 1.0, 1),
            entry(4.5, 4.0, 1.0, 2),
            entry(0.2, 3.7, 1.0, 3),
        ])
        .unwrap();
        let mesh = triangulate(&obs);
        assert_eq!(mesh.len(), 2);
        let shared = mesh.triangles[0]
            .iter()
            .filter(|v| mesh.triangles[1].contains(v))
            .count();
        assert_eq!(shared, 2);
    }

    #[test]
    fn collinear_input_gives_empty_mesh() {
        let obs = ProjectedObservations::new((0..5).map(|i| entry(i as f64, i as f64, 1.0, i)).collect()).unwrap();
        assert!(triangulate(&obs).is_empty());
    }

    /// Exhaustive empty-circumcircle check, independent of the triangulator.
    #[test]
    fn random_mesh_is_delaunay() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries: Vec<_> = (0..50)
            .map(|i| entry(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0), 1.0, i))
            .collect();
        let obs = ProjectedObservations::new(entries.clone()).unwrap();
        let mesh = triangulate(&obs);
        assert!(!mesh.is_empty());
        for tri in &mesh.triangles {
            let [a, b, c] = tri.map(|i| (entries[i].u, entries[i].v));
            // Circumcenter from the perpendicular bisector equations.
            let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
            let sq = |p: (f64, f64)| p.0 * p.0 + p.1 * p.1;
            let ux = (sq(a) * (b.1 - c.1) + sq(b) * (c.1 - a.1) + sq(c) * (a.1 - b.1)) / d;
            let uy = (sq(a) * (c.0 - b.0) + sq(b) * (a.0 - c.0) + sq(c) * (b.0 - a.0)) / d;
            let r2 = (a.0 - ux).powi(2) + (a.1 - uy).powi(2);
            for (n, e) in entries.iter().enumerate() {
                if tri.contains(&n) {
                    continue;
                }
                let d2 = (e.u - ux).powi(2) + (e.v - uy).powi(2);
                assert!(d2 >= r2 * (1.0 - 1e-9), "point {n} inside circumcircle of {tri:?}");
            }
        }
        // Euler: a triangulation of n points with h hull points has 2n - h - 2 triangles.
        assert!(mesh.len() >= 50 - 2);
    }

    fn pinhole_scene(w: usize, h: usize) -> (ImageGrid, RayField) {
        let grid = ImageGrid::new(w, h).unwrap();
        let cam = CameraModel::pinhole(10.0, 10.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap();
        (grid, build_ray_field(&cam, grid))
    }

    #[test]
    fn axis_aligned_plane_intersection() {
        let (grid, rays) = pinhole_scene(9, 9);
        let center = grid.index(4, 4);
        let pts = [(1, 1), (8, 2), (3, 8)];
        let obs: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(n, &(c, r))| {
                let p = grid.index(c, r);
                let d = rays.plane_intersection(p, &Vector3::z(), 4.0).unwrap();
                ProjectedEntry {
                    u: c as f64,
                    v: r as f64,
                    depth: d,
                    point: rays.point(p, d),
                    source: n,
                }
            })
            .collect();
        let obs = ProjectedObservations::new(obs).unwrap();
        let mesh = triangulate(&obs);
        let init = init_depth(&rays, &obs, &mesh, wide_bounds()).unwrap();
        assert!((init.depth(center) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn uncovered_pixel_takes_nearest_depth() {
        let (grid, rays) = pinhole_scene(9, 9);
        let obs = ProjectedObservations::new(vec![
            entry(6.0, 6.0, 7.2, 0),
            entry(7.0, 6.0, 9.0, 1),
            entry(6.0, 7.0, 9.0, 2),
        ])
        .unwrap();
        let mesh = triangulate(&obs);
        let init = init_depth(&rays, &obs, &mesh, wide_bounds()).unwrap();
        assert_eq!(init.depth(grid.index(0, 0)), 7.2);
    }

    #[test]
    fn init_is_clamped_into_bounds() {
        let (grid, rays) = pinhole_scene(5, 5);
        let obs = ProjectedObservations::new(vec![entry(2.0, 2.0, 7.0, 0)]).unwrap();
        let init = init_depth(&rays, &obs, &TriangleMesh::default(), DepthBounds::new(1.0, 5.0).unwrap()).unwrap();
        assert!(init.depths().iter().all(|&d| d == 5.0));
        assert_eq!(init.grid(), grid);
    }

    #[test]
    fn slanted_plane_initialization_is_exact() {
        let (grid, rays) = pinhole_scene(32, 24);
        // z = 2 + 0.1 x  <=>  (-0.1, 0, 1) . p = 2
        let normal = Vector3::new(-0.1, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut entries = Vec::new();
        for n in 0..40 {
            let col = rng.random_range(0..32);
            let row = rng.random_range(0..24);
            let p = grid.index(col, row);
            let d = rays.plane_intersection(p, &normal, 2.0).unwrap();
            entries.push(ProjectedEntry {
                u: col as f64,
                v: row as f64,
                depth: d,
                point: rays.point(p, d),
                source: n,
            });
        }
        let obs = ProjectedObservations::new(entries).unwrap();
        let mesh = triangulate(&obs);
        let init = init_depth(&rays, &obs, &mesh, wide_bounds()).unwrap();
        let covered = covered_pixels(&grid, &obs, &mesh);
        assert!(covered.iter().filter(|&&c| c).count() > 100);
        for (pixel, &c) in covered.iter().enumerate() {
            if c {
                let p = rays.point(pixel, init.depth(pixel));
                let n = normal.normalize();
                assert!((n.dot(&p) - 2.0 / normal.norm()).abs() < 1e-9);
            }
        }
    }

    fn covered_pixels(grid: &ImageGrid, obs: &ProjectedObservations, mesh: &TriangleMesh) -> Vec<bool> {
        (0..grid.len())
            .map(|p| {
                let (c, r) = grid.coords(p);
                mesh.triangles
                    .iter()
                    .any(|t| contains(t.map(|i| &obs.entries()[i]), c as f64, r as f64))
            })
            .collect()
    }

    #[test]
    fn initialization_is_deterministic() {
        let (_, rays) = pinhole_scene(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let entries: Vec<_> = (0..20)
            .map(|i| entry(rng.random_range(0.0..15.0), rng.random_range(0.0..15.0), rng.random_range(2.0..5.0), i))
            .collect();
        let run = || {
            let obs = ProjectedObservations::new(entries.clone()).unwrap();
            init_depth(&rays, &obs, &triangulate(&obs), wide_bounds()).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.depths().iter().all(|d| d.is_finite() && *d > 0.0));
    }
}
