//! Pixel grids, camera rays and depth fields.
//!
//! Depths are ray lengths: a pixel's 3D point is `origin + depth * direction`
//! with a unit direction, so a depth is the metric distance travelled along
//! the line of sight and not the camera-frame `z` coordinate.

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Rectangular pixel lattice. Pixel `i` is stored at `row * width + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageGrid {
    width: usize,
    height: usize,
}

/// One of the four axis-aligned neighbor directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Left = 0,
    Right = 1,
    Up = 2,
    Down = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
    ];

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// Three pixels along one image row or column, `i` in the middle.
///
/// `j` is the left (or upper) neighbor and `k` the right (or lower) one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub j: usize,
    pub i: usize,
    pub k: usize,
    pub axis: Axis,
}

impl ImageGrid {
    /// Collinearity triples need an interior pixel in both axes, hence the 3x3 minimum.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 3 || height < 3 {
            return Err(config_err(format!(
                "image grid must be at least 3x3, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of pixels.
    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        debug_assert!(col < self.width && row < self.height);
        row * self.width + col
    }

    /// Inverse of [`ImageGrid::index`], returns `(col, row)`.
    #[inline]
    pub fn coords(&self, pixel: usize) -> (usize, usize) {
        (pixel % self.width, pixel / self.width)
    }

    pub fn contains(&self, pixel: usize) -> bool {
        pixel < self.len()
    }

    /// Whether continuous pixel coordinates fall inside the image, pixel
    /// centers sitting on integer coordinates.
    pub fn contains_point(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }

    pub fn neighbor(&self, pixel: usize, dir: Direction) -> Option<usize> {
        let (col, row) = self.coords(pixel);
        match dir {
            Direction::Left if col > 0 => Some(pixel - 1),
            Direction::Right if col + 1 < self.width => Some(pixel + 1),
            Direction::Up if row > 0 => Some(pixel - self.width),
            Direction::Down if row + 1 < self.height => Some(pixel + self.width),
            _ => None,
        }
    }

    /// Existing 4-connected neighbors in left, right, up, down order.
    pub fn neighbors4(&self, pixel: usize) -> Vec<usize> {
        Direction::ALL
            .iter()
            .filter_map(|&d| self.neighbor(pixel, d))
            .collect()
    }

    /// Horizontal `(left, i, right)` and vertical `(up, i, down)` triples
    /// centered at `pixel`, whichever exist.
    pub fn collinearity_triples(&self, pixel: usize) -> Vec<Triple> {
        let mut out = Vec::with_capacity(2);
        if let (Some(j), Some(k)) = (
            self.neighbor(pixel, Direction::Left),
            self.neighbor(pixel, Direction::Right),
        ) {
            out.push(Triple {
                j,
                i: pixel,
                k,
                axis: Axis::Horizontal,
            });
        }
        if let (Some(j), Some(k)) = (
            self.neighbor(pixel, Direction::Up),
            self.neighbor(pixel, Direction::Down),
        ) {
            out.push(Triple {
                j,
                i: pixel,
                k,
                axis: Axis::Vertical,
            });
        }
        out
    }

    /// `(W-2)*H + W*(H-2)`.
    pub fn triple_count(&self) -> usize {
        (self.width - 2) * self.height + self.width * (self.height - 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraKind {
    Pinhole,
    /// Parallel rays; focal lengths are read as pixels per meter.
    Orthographic,
}

/// Camera intrinsics plus the rigid transform from the range-sensor frame
/// into the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    kind: CameraKind,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    sensor_to_camera: Isometry3<f64>,
}

impl CameraModel {
    pub fn new(
        kind: CameraKind,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        sensor_to_camera: Isometry3<f64>,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(config_err(format!(
                "focal lengths must be positive and finite, got fx={fx} fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(config_err("principal point must be finite"));
        }
        let t = &sensor_to_camera.translation.vector;
        if !t.iter().all(|v| v.is_finite()) {
            return Err(config_err("extrinsic translation must be finite"));
        }
        let r = sensor_to_camera.rotation.to_rotation_matrix();
        let m = r.matrix();
        let ortho = (m.transpose() * m - nalgebra::Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (m.determinant() - 1.0).abs() > 1e-9 {
            return Err(config_err("extrinsic rotation is not a proper rotation"));
        }
        Ok(Self {
            kind,
            fx,
            fy,
            cx,
            cy,
            sensor_to_camera,
        })
    }

    /// Pinhole camera with identity extrinsics.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::new(CameraKind::Pinhole, fx, fy, cx, cy, Isometry3::identity())
    }

    /// Orthographic camera with identity extrinsics.
    pub fn orthographic(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::new(CameraKind::Orthographic, fx, fy, cx, cy, Isometry3::identity())
    }

    /// Builds the extrinsic transform from a `w, x, y, z` quaternion and a
    /// translation in meters. The quaternion must be unit length within 1e-6.
    pub fn extrinsic_from_parts(quat_wxyz: [f64; 4], translation: [f64; 3]) -> Result<Isometry3<f64>> {
        let [w, x, y, z] = quat_wxyz;
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(config_err(format!(
                "extrinsic rotation quaternion must be unit length, got norm {norm}"
            )));
        }
        Ok(Isometry3::from_parts(
            Translation3::new(translation[0], translation[1], translation[2]),
            UnitQuaternion::from_quaternion(q),
        ))
    }

    pub fn with_extrinsic(self, sensor_to_camera: Isometry3<f64>) -> Result<Self> {
        Self::new(self.kind, self.fx, self.fy, self.cx, self.cy, sensor_to_camera)
    }

    pub fn kind(&self) -> CameraKind {
        self.kind
    }

    pub fn focal(&self) -> (f64, f64) {
        (self.fx, self.fy)
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    pub fn sensor_to_camera(&self) -> &Isometry3<f64> {
        &self.sensor_to_camera
    }

    /// Ray through continuous pixel coordinates, in the camera frame.
    pub fn ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let x = (u - self.cx) / self.fx;
        let y = (v - self.cy) / self.fy;
        match self.kind {
            CameraKind::Pinhole => (Vector3::zeros(), Vector3::new(x, y, 1.0).normalize()),
            CameraKind::Orthographic => (Vector3::new(x, y, 0.0), Vector3::z()),
        }
    }
}

/// Per-pixel viewing rays in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RayField {
    grid: ImageGrid,
    origins: Vec<Vector3<f64>>,
    directions: Vec<Vector3<f64>>,
}

/// One ray per pixel center.
pub fn build_ray_field(camera: &CameraModel, grid: ImageGrid) -> RayField {
    let (origins, directions) = (0..grid.len())
        .map(|i| {
            let (col, row) = grid.coords(i);
            camera.ray(col as f64, row as f64)
        })
        .unzip();
    RayField {
        grid,
        origins,
        directions,
    }
}

impl RayField {
    /// Assembles a ray field from explicit rays; directions are normalized.
    pub fn from_rays(
        grid: ImageGrid,
        origins: Vec<Vector3<f64>>,
        directions: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        if origins.len() != grid.len() || directions.len() != grid.len() {
            return Err(config_err("ray count does not match grid size"));
        }
        let mut directions = directions;
        for d in &mut directions {
            let n = d.norm();
            if !(n > 0.0 && n.is_finite()) {
                return Err(config_err("ray direction must be non-zero and finite"));
            }
            *d /= n;
        }
        Ok(Self {
            grid,
            origins,
            directions,
        })
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    #[inline]
    pub fn origin(&self, pixel: usize) -> &Vector3<f64> {
        &self.origins[pixel]
    }

    #[inline]
    pub fn direction(&self, pixel: usize) -> &Vector3<f64> {
        &self.directions[pixel]
    }

    /// `origin + depth * direction`.
    #[inline]
    pub fn point(&self, pixel: usize, depth: f64) -> Vector3<f64> {
        self.origins[pixel] + self.directions[pixel] * depth
    }

    /// Depth at which the pixel's ray meets the plane `n . x = offset`, if the
    /// ray is not parallel to the plane.
    pub fn plane_intersection(&self, pixel: usize, normal: &Vector3<f64>, offset: f64) -> Option<f64> {
        let denom = normal.dot(&self.directions[pixel]);
        if denom.abs() < 1e-12 {
            return None;
        }
        Some((offset - normal.dot(&self.origins[pixel])) / denom)
    }
}

/// Free-function form of [`RayField::point`].
pub fn point_from_depth(rays: &RayField, pixel: usize, depth: f64) -> Vector3<f64> {
    rays.point(pixel, depth)
}

/// Result of projecting a sensor-frame point into the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Distance along the viewing ray through `(u, v)`.
    pub depth: f64,
    /// The point expressed in the camera frame.
    pub point: Vector3<f64>,
}

impl Projection {
    /// Pixel whose center is closest to the projection.
    pub fn pixel(&self, grid: &ImageGrid) -> usize {
        let col = (self.u.round().max(0.0) as usize).min(grid.width() - 1);
        let row = (self.v.round().max(0.0) as usize).min(grid.height() - 1);
        grid.index(col, row)
    }
}

/// Maps a sensor-frame point into continuous pixel coordinates. Returns
/// `None` when the point is behind the camera, at the optical center, or
/// outside the image.
pub fn project_point(camera: &CameraModel, grid: &ImageGrid, point_sensor: &Vector3<f64>) -> Option<Projection> {
    let p = camera
        .sensor_to_camera
        .transform_point(&Point3::from(*point_sensor))
        .coords;
    if !(p.z > 0.0) {
        return None;
    }
    let (u, v, depth) = match camera.kind {
        CameraKind::Pinhole => (
            camera.fx * p.x / p.z + camera.cx,
            camera.fy * p.y / p.z + camera.cy,
            p.norm(),
        ),
        CameraKind::Orthographic => (camera.fx * p.x + camera.cx, camera.fy * p.y + camera.cy, p.z),
    };
    if !(u.is_finite() && v.is_finite()) || !grid.contains_point(u, v) {
        return None;
    }
    Some(Projection { u, v, depth, point: p })
}

/// Per-pixel depth estimate with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthField {
    grid: ImageGrid,
    depths: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthField {
    /// All pixels valid. Every depth must be finite and positive.
    pub fn new(grid: ImageGrid, depths: Vec<f64>) -> Result<Self> {
        let valid = vec![true; depths.len()];
        Self::with_mask(grid, depths, valid)
    }

    pub fn with_mask(grid: ImageGrid, depths: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depths.len() != grid.len() || valid.len() != grid.len() {
            return Err(config_err("depth field size does not match grid"));
        }
        if let Some(i) = depths
            .iter()
            .zip(&valid)
            .position(|(&d, &ok)| ok && !(d.is_finite() && d > 0.0))
        {
            return Err(config_err(format!(
                "valid depth at pixel {i} is not finite and positive: {}",
                depths[i]
            )));
        }
        Ok(Self { grid, depths, valid })
    }

    /// Constant depth everywhere.
    pub fn constant(grid: ImageGrid, depth: f64) -> Result<Self> {
        Self::new(grid, vec![depth; grid.len()])
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn depth(&self, pixel: usize) -> f64 {
        self.depths[pixel]
    }

    pub fn is_valid(&self, pixel: usize) -> bool {
        self.valid[pixel]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Same depths, replaced mask.
    pub fn masked(&self, valid: Vec<bool>) -> Result<Self> {
        let mut valid = valid;
        for (v, &old) in valid.iter_mut().zip(&self.valid) {
            *v &= old;
        }
        Self::with_mask(self.grid, self.depths.clone(), valid)
    }

    /// Depths with invalid pixels as NaN.
    pub fn to_nan_masked(&self) -> Vec<f64> {
        self.depths
            .iter()
            .zip(&self.valid)
            .map(|(&d, &ok)| if ok { d } else { f64::NAN })
            .collect()
    }

    /// Inverse of [`DepthField::to_nan_masked`]: non-finite or non-positive
    /// entries become invalid.
    pub fn from_nan_masked(grid: ImageGrid, values: &[f64]) -> Result<Self> {
        let valid: Vec<bool> = values.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        let depths = values
            .iter()
            .zip(&valid)
            .map(|(&d, &ok)| if ok { d } else { 0.0 })
            .collect();
        Self::with_mask(grid, depths, valid)
    }

    #[cfg(test)]
    pub(crate) fn depths_mut(&mut self) -> &mut [f64] {
        &mut self.depths
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(w: usize, h: usize) -> ImageGrid {
        ImageGrid::new(w, h).unwrap()
    }

    #[test]
    fn grid_rejects_small_dimensions() {
        assert!(ImageGrid::new(2, 5).is_err());
        assert!(ImageGrid::new(5, 2).is_err());
        assert!(ImageGrid::new(3, 3).is_ok());
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = CameraModel::pinhole(1.0, 1.0, 0.0, 0.0).unwrap();
        let rays = build_ray_field(&cam, grid(3, 3));
        assert_eq!(*rays.direction(0), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(*rays.origin(0), Vector3::zeros());
    }

    #[test]
    fn orthographic_rays_are_parallel() {
        let s = 0.25;
        let cam = CameraModel::orthographic(1.0 / s, 1.0 / s, 0.0, 0.0).unwrap();
        let g = grid(4, 3);
        let rays = build_ray_field(&cam, g);
        let p = g.index(3, 2);
        assert_relative_eq!(*rays.origin(p), Vector3::new(3.0 * s, 2.0 * s, 0.0));
        assert_eq!(*rays.direction(p), Vector3::z());
    }

    #[test]
    fn off_axis_pinhole_ray() {
        let cam = CameraModel::pinhole(2.0, 2.0, 1.0, 1.0).unwrap();
        let g = grid(4, 3);
        let rays = build_ray_field(&cam, g);
        // ((3 - 1) / 2, (1 - 1) / 2, 1) normalized.
        let expected = Vector3::new(1.0, 0.0, 1.0) / 2f64.sqrt();
        assert_relative_eq!(*rays.direction(g.index(3, 1)), expected, epsilon = 1e-15);
    }

    #[test]
    fn zero_focal_is_rejected() {
        assert!(CameraModel::pinhole(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraModel::orthographic(1.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn quaternion_must_be_unit() {
        assert!(CameraModel::extrinsic_from_parts([2.0, 0.0, 0.0, 0.0], [0.0; 3]).is_err());
        assert!(CameraModel::extrinsic_from_parts([1.0, 0.0, 0.0, 0.0], [0.0; 3]).is_ok());
    }

    #[test]
    fn point_from_depth_examples() {
        let g = grid(3, 3);
        let rays = RayField::from_rays(
            g,
            vec![Vector3::new(1.0, 0.0, 0.0); 9],
            vec![Vector3::new(0.0, 0.6, 0.8); 9],
        )
        .unwrap();
        assert_relative_eq!(point_from_depth(&rays, 4, 2.5), Vector3::new(1.0, 1.5, 2.0), epsilon = 1e-15);
        assert_eq!(point_from_depth(&rays, 4, 0.0), Vector3::new(1.0, 0.0, 0.0));

        let cam = CameraModel::pinhole(1.0, 1.0, 0.0, 0.0).unwrap();
        let rays = build_ray_field(&cam, g);
        assert_eq!(rays.point(0, 5.0), Vector3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn project_on_axis_and_behind() {
        let cam = CameraModel::pinhole(1.0, 1.0, 0.0, 0.0).unwrap();
        let g = grid(3, 3);
        let p = project_point(&cam, &g, &Vector3::new(0.0, 0.0, 4.0)).unwrap();
        assert_eq!((p.u, p.v, p.depth), (0.0, 0.0, 4.0));
        assert!(project_point(&cam, &g, &Vector3::new(0.0, 0.0, -1.0)).is_none());
        assert!(project_point(&cam, &g, &Vector3::zeros()).is_none());
        assert!(project_point(&cam, &g, &Vector3::new(100.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn extrinsics_are_applied_before_projection() {
        let iso = CameraModel::extrinsic_from_parts([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 2.0]).unwrap();
        let cam = CameraModel::pinhole(1.0, 1.0, 0.0, 0.0)
            .unwrap()
            .with_extrinsic(iso)
            .unwrap();
        let p = project_point(&cam, &grid(3, 3), &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(p.depth, 4.0);
    }

    #[test]
    fn neighbor_counts() {
        let g = grid(3, 3);
        assert_eq!(g.neighbors4(4).len(), 4);
        assert_eq!(g.neighbors4(0).len(), 2);
        assert_eq!(g.neighbors4(1).len(), 3);
    }

    #[test]
    fn triple_examples() {
        let g = grid(5, 4);
        let interior = g.index(2, 1);
        assert_eq!(g.collinearity_triples(interior).len(), 2);
        assert!(g.collinearity_triples(0).is_empty());
        let left_edge = g.index(0, 1);
        let t = g.collinearity_triples(left_edge);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].axis, Axis::Vertical);
        assert_eq!((t[0].j, t[0].i, t[0].k), (g.index(0, 0), left_edge, g.index(0, 2)));
    }

    #[test]
    fn triple_total_matches_formula() {
        for (w, h) in [(3, 3), (4, 7), (10, 3), (9, 9)] {
            let g = grid(w, h);
            let total: usize = (0..g.len()).map(|i| g.collinearity_triples(i).len()).sum();
            assert_eq!(total, g.triple_count());
        }
    }

    #[test]
    fn nan_mask_round_trip() {
        let g = grid(3, 3);
        let mut vals = vec![1.0; 9];
        vals[2] = f64::NAN;
        let f = DepthField::from_nan_masked(g, &vals).unwrap();
        assert_eq!(f.valid_count(), 8);
        assert!(f.to_nan_masked()[2].is_nan());
    }

    proptest! {
        #[test]
        fn projection_round_trip(
            col in 1usize..19, row in 1usize..14, depth in 0.1f64..100.0,
            fx in 5.0f64..50.0, fy in 5.0f64..50.0,
            qx in -0.3f64..0.3, qy in -0.3f64..0.3, tz in -0.5f64..0.5,
        ) {
            let g = grid(20, 15);
            let q = UnitQuaternion::from_quaternion(Quaternion::new(1.0, qx, qy, 0.1));
            let iso = Isometry3::from_parts(Translation3::new(0.1, -0.2, tz), q);
            let cam = CameraModel::new(CameraKind::Pinhole, fx, fy, 9.5, 7.0, iso).unwrap();
            let rays = build_ray_field(&cam, g);
            let pixel = g.index(col, row);
            let p_cam = rays.point(pixel, depth);
            let p_sensor = iso.inverse_transform_point(&Point3::from(p_cam)).coords;
            let proj = project_point(&cam, &g, &p_sensor).unwrap();
            prop_assert!((proj.u - col as f64).abs() < 1e-9);
            prop_assert!((proj.v - row as f64).abs() < 1e-9);
            prop_assert!((proj.depth - depth).abs() < 1e-9 * depth.max(1.0));
            prop_assert_eq!(proj.pixel(&g), pixel);
        }

        #[test]
        fn rays_unit_and_point_affine(col in 0usize..8, row in 0usize..6, d1 in 0.0f64..50.0, d2 in 0.0f64..50.0) {
            let g = grid(8, 6);
            let cam = CameraModel::pinhole(3.0, 4.0, 3.5, 2.5).unwrap();
            let rays = build_ray_field(&cam, g);
            let i = g.index(col, row);
            prop_assert!((rays.direction(i).norm() - 1.0).abs() < 1e-12);
            let lhs = rays.point(i, d1) + rays.point(i, d2) - 2.0 * rays.point(i, 0.5 * (d1 + d2));
            prop_assert!(lhs.norm() < 1e-12);
            prop_assert_eq!(g.index(g.coords(i).0, g.coords(i).1), i);
        }
    }
}
