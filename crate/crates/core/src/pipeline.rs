//! End-to-end upsampling: prior, assembly, solve and optional confidence
//! filtering, configured from a single serializable struct.

use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::confidence::{estimate_variances, filter_depths, ConfidenceField, VarianceSelection};
use crate::error::{config_err, Result};
use crate::features::estimate_normals;
use crate::features::{FeatureImage, WeightField, WeightFunction};
use crate::geometry::{build_ray_field, CameraKind, CameraModel, DepthField, ImageGrid, RayField};
use crate::prior::{init_constant, init_depth, triangulate, ProjectedObservations};
use crate::problem::{assemble, ObservationSet, ProblemConfig};
use crate::solver::{solve, SolveReport, SolverConfig};

/// Camera intrinsics plus the sensor-to-camera pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    #[serde(default = "default_kind")]
    pub kind: CameraKind,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Unit quaternion `[w, x, y, z]`.
    #[serde(default = "identity_rotation")]
    pub rotation: [f64; 4],
    #[serde(default)]
    pub translation: [f64; 3],
}

fn default_kind() -> CameraKind {
    CameraKind::Pinhole
}

fn identity_rotation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl CameraConfig {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            kind: CameraKind::Pinhole,
            fx,
            fy,
            cx,
            cy,
            rotation: identity_rotation(),
            translation: [0.0; 3],
        }
    }

    pub fn orthographic(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            kind: CameraKind::Orthographic,
            ..Self::pinhole(fx, fy, cx, cy)
        }
    }

    pub fn build(&self) -> Result<CameraModel> {
        let pose = CameraModel::extrinsic_from_parts(self.rotation, self.translation)?;
        CameraModel::new(self.kind, self.fx, self.fy, self.cx, self.cy, pose)
    }
}

/// How the solver is started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    /// Ray intersection with the observation mesh, nearest neighbor elsewhere.
    #[default]
    Mesh,
    /// Mean observed depth everywhere.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub weights: WeightFunction,
    pub problem: ProblemConfig,
    pub solver: SolverConfig,
    pub init: InitMethod,
    /// Compute per-pixel variances even without a threshold.
    pub variances: bool,
    /// Keep only depths whose variance is below this value.
    pub variance_threshold: Option<f64>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.problem.validate()?;
        self.solver.validate()?;
        if let Some(t) = self.variance_threshold {
            if !(t >= 0.0) {
                return Err(config_err(format!("variance_threshold must be non-negative, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub initial: DepthField,
    /// Solver result with every pixel valid.
    pub solution: DepthField,
    /// Solution after variance filtering; equals `solution` without a threshold.
    pub depth: DepthField,
    pub confidence: Option<ConfidenceField>,
    pub report: SolveReport,
    pub filtered: usize,
    pub runtime: Duration,
}

/// Runs the full pipeline on prepared inputs.
pub fn run(
    rays: &RayField,
    features: &FeatureImage,
    obs: &ObservationSet,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let start = Instant::now();
    cfg.validate()?;
    let grid = rays.grid();
    if features.grid() != grid || obs.grid() != grid {
        return Err(config_err("features, observations and rays must share one grid"));
    }
    if obs.is_empty() {
        return Err(config_err("no observations: upsampling needs at least one depth"));
    }
    let bounds = cfg.problem.resolve_bounds(obs)?;
    let initial = match cfg.init {
        InitMethod::Mesh => {
            let projected = ProjectedObservations::from_observations(rays, obs)?;
            let mesh = triangulate(&projected);
            init_depth(rays, &projected, &mesh, bounds)?
        }
        InitMethod::Constant => init_constant(grid, obs, bounds)?,
    };
    let weights = WeightField::compute(features, &cfg.weights)?;
    let graph = assemble(rays, obs, &weights, &cfg.problem)?;
    log::debug!("residual blocks: {:?}", graph.block_counts());
    let (solution, report) = solve(&graph, &initial, &cfg.solver)?;
    log::info!(
        "solved in {} iterations ({:?}), cost {:.3e} -> {:.3e}",
        report.iterations,
        report.termination,
        report.initial_cost,
        report.final_cost
    );
    let confidence = if cfg.variances || cfg.variance_threshold.is_some() {
        Some(estimate_variances(&graph, &solution, &VarianceSelection::All)?)
    } else {
        None
    };
    let depth = match (&confidence, cfg.variance_threshold) {
        (Some(conf), Some(t)) => filter_depths(&solution, conf, t)?,
        _ => solution.clone(),
    };
    let filtered = grid.len() - depth.valid_count();
    Ok(PipelineOutput {
        initial,
        solution,
        depth,
        confidence,
        report,
        filtered,
        runtime: start.elapsed(),
    })
}

/// Convenience wrapper building the ray field from a camera.
pub fn run_with_camera(
    camera: &CameraModel,
    features: &FeatureImage,
    obs: &ObservationSet,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let rays = build_ray_field(camera, features.grid());
    run(&rays, features, obs, cfg)
}

/// Observations from a sensor-frame point cloud. Normals are estimated by
/// PCA in the camera frame when `normal_radius` is given.
pub fn observations_from_points(
    camera: &CameraModel,
    grid: ImageGrid,
    points: &[Vector3<f64>],
    normal_radius: Option<f64>,
) -> Result<ObservationSet> {
    let projected = ProjectedObservations::from_points(camera, &grid, points)?;
    let normals = match normal_radius {
        Some(r) if r > 0.0 => {
            let cam_points: Vec<Vector3<f64>> = projected.entries().iter().map(|e| e.point).collect();
            let viewpoint = Vector3::zeros();
            let set = estimate_normals(&cam_points, r, &viewpoint);
            // Index normals by original point so `source` lookups line up.
            let mut by_source = vec![None; points.len()];
            for (e, n) in projected.entries().iter().zip(set.normals) {
                by_source[e.source] = n;
            }
            Some(by_source)
        }
        Some(r) => return Err(config_err(format!("normal radius must be positive, got {r}"))),
        None => None,
    };
    ObservationSet::from_projections(grid, &projected, normals.as_deref())
}

/// Normals of the reconstructed surface from cross products of neighbor
/// point differences, central where both neighbors are valid and one-sided
/// otherwise. Oriented toward the ray origin; `None` where a pixel or both
/// neighbors along an axis are invalid.
pub fn surface_normals(rays: &RayField, depth: &DepthField) -> Vec<Option<Vector3<f64>>> {
    use crate::geometry::Direction;
    let grid = rays.grid();
    let point = |p: usize| depth.is_valid(p).then(|| rays.point(p, depth.depth(p)));
    let diff = |p: usize, lo: Direction, hi: Direction| {
        let c = point(p)?;
        let a = grid.neighbor(p, lo).and_then(point);
        let b = grid.neighbor(p, hi).and_then(point);
        match (a, b) {
            (Some(a), Some(b)) => Some(b - a),
            (None, Some(b)) => Some(b - c),
            (Some(a), None) => Some(c - a),
            (None, None) => None,
        }
    };
    (0..grid.len())
        .map(|p| {
            let du = diff(p, Direction::Left, Direction::Right)?;
            let dv = diff(p, Direction::Up, Direction::Down)?;
            let n = du.cross(&dv);
            let len = n.norm();
            if !(len > 0.0 && len.is_finite()) {
                return None;
            }
            let n = n / len;
            let toward = rays.origin(p) - rays.point(p, depth.depth(p));
            Some(if n.dot(&toward) < 0.0 { -n } else { n })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Observation, Regularizer};

    fn plane_setup() -> (RayField, ObservationSet, Vec<f64>) {
        let grid = ImageGrid::new(12, 10).unwrap();
        let cam = CameraConfig::pinhole(10.0, 10.0, 5.5, 4.5).build().unwrap();
        let rays = build_ray_field(&cam, grid);
        let n = Vector3::new(0.3, -0.2, 1.0).normalize();
        let truth: Vec<f64> = (0..grid.len()).map(|p| rays.plane_intersection(p, &n, 3.0).unwrap()).collect();
        let obs = ObservationSet::from_observations(
            grid,
            [(1, 1), (10, 1), (1, 8), (10, 8), (5, 4)].map(|(c, r)| {
                let p = grid.index(c, r);
                Observation { pixel: p, depth: truth[p], normal: None }
            }),
        )
        .unwrap();
        (rays, obs, truth)
    }

    #[test]
    fn recovers_plane() {
        let (rays, obs, truth) = plane_setup();
        let features = FeatureImage::uniform(rays.grid());
        let out = run(&rays, &features, &obs, &PipelineConfig::default()).unwrap();
        for (a, b) in out.depth.depths().iter().zip(&truth) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(out.filtered, 0);
        assert!(out.confidence.is_none());
    }

    #[test]
    fn threshold_filters_and_reports() {
        let (rays, obs, _) = plane_setup();
        let features = FeatureImage::uniform(rays.grid());
        let cfg = PipelineConfig {
            variance_threshold: Some(0.0),
            ..Default::default()
        };
        let out = run(&rays, &features, &obs, &cfg).unwrap();
        assert_eq!(out.filtered, rays.grid().len());
        assert_eq!(out.depth.depths(), out.solution.depths());
    }

    #[test]
    fn constant_init_and_baseline_run() {
        let (rays, obs, _) = plane_setup();
        let features = FeatureImage::uniform(rays.grid());
        let cfg = PipelineConfig {
            init: InitMethod::Constant,
            problem: ProblemConfig { regularizer: Regularizer::Baseline, ..Default::default() },
            ..Default::default()
        };
        let out = run(&rays, &features, &obs, &cfg).unwrap();
        assert!(out.report.final_cost <= out.report.initial_cost);
    }

    #[test]
    fn point_cloud_observations_carry_normals() {
        let grid = ImageGrid::new(20, 20).unwrap();
        let cam = CameraConfig::pinhole(20.0, 20.0, 9.5, 9.5).build().unwrap();
        let mut pts = Vec::new();
        for i in -4..=4 {
            for j in -4..=4 {
                pts.push(Vector3::new(i as f64 * 0.2, j as f64 * 0.2, 4.0));
            }
        }
        let obs = observations_from_points(&cam, grid, &pts, Some(0.5)).unwrap();
        assert_eq!(obs.len(), pts.len());
        for o in obs.iter() {
            let n = o.normal.expect("planar neighborhood has a normal");
            assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
        }
        let obs = observations_from_points(&cam, grid, &pts, None).unwrap();
        assert!(obs.iter().all(|o| o.normal.is_none()));
    }

    #[test]
    fn surface_normals_of_plane() {
        let (rays, _, truth) = plane_setup();
        let field = DepthField::new(rays.grid(), truth).unwrap();
        let n = Vector3::new(0.3, -0.2, 1.0).normalize();
        for got in surface_normals(&rays, &field) {
            assert!((got.unwrap() + n).norm() < 1e-9);
        }
        let mut valid = vec![true; rays.grid().len()];
        valid[0] = false;
        let masked = field.masked(valid).unwrap();
        let ns = surface_normals(&rays, &masked);
        assert!(ns[0].is_none());
        assert!((ns[1].unwrap() + n).norm() < 1e-9);
    }

    #[test]
    fn camera_config_rejects_bad_quaternion() {
        let mut c = CameraConfig::pinhole(1.0, 1.0, 0.0, 0.0);
        c.rotation = [2.0, 0.0, 0.0, 0.0];
        assert!(c.build().is_err());
    }
}
