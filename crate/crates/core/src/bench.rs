//! Synthetic piecewise-planar scenes with exact ground truth, observation
//! sampling, error metrics and the planar-versus-baseline sweep.

use std::time::Duration;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::features::FeatureImage;
use crate::geometry::{build_ray_field, CameraModel, DepthField, Direction, ImageGrid, RayField};
use crate::pipeline::{run, CameraConfig, PipelineConfig};
use crate::problem::{Observation, ObservationSet, Regularizer};

/// Plane `n . p = offset` in the camera frame. The normal need not be unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl PlaneSpec {
    /// Plane with the given normal whose intersection with the ray through
    /// continuous pixel `(u, v)` lies at `depth`.
    pub fn through_pixel(camera: &CameraModel, normal: [f64; 3], u: f64, v: f64, depth: f64) -> Self {
        let n = Vector3::from(normal).normalize();
        let (o, d) = camera.ray(u, v);
        Self {
            normal: n.into(),
            offset: n.dot(&(o + depth * d)),
        }
    }

    fn unit(&self) -> Result<(Vector3<f64>, f64)> {
        let n = Vector3::from(self.normal);
        let len = n.norm();
        if !(len > 0.0 && len.is_finite() && self.offset.is_finite()) {
            return Err(config_err(format!("invalid plane normal {:?}", self.normal)));
        }
        Ok((n / len, self.offset / len))
    }
}

/// One planar region. Regions are painted in order; later regions cover
/// earlier ones. A region without a rectangle covers the whole image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    /// `[col0, row0, col1, row1]`, end-exclusive.
    #[serde(default)]
    pub rect: Option<[usize; 4]>,
    pub plane: PlaneSpec,
    #[serde(default = "default_rgb")]
    pub rgb: [f64; 3],
}

fn default_rgb() -> [f64; 3] {
    [0.5; 3]
}

fn default_band() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub camera: CameraConfig,
    pub regions: Vec<RegionSpec>,
    /// Standard deviation of additive depth noise, meters.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Attach the region normal to each observation.
    #[serde(default)]
    pub normals: bool,
    /// Angle by which observed normals are tilted, degrees.
    #[serde(default)]
    pub normal_noise_deg: f64,
    /// Width of the zero-certainty band along region boundaries, pixels.
    #[serde(default = "default_band")]
    pub boundary_band: usize,
    /// Per-channel standard deviation of RGB texture noise.
    #[serde(default)]
    pub rgb_noise: f64,
}

impl SceneSpec {
    /// A single plane covering the image, uniform color.
    pub fn single_plane(width: usize, height: usize, camera: CameraConfig, plane: PlaneSpec) -> Self {
        Self {
            name: String::new(),
            width,
            height,
            camera,
            regions: vec![RegionSpec {
                rect: None,
                plane,
                rgb: default_rgb(),
            }],
            noise_sigma: 0.0,
            normals: false,
            normal_noise_deg: 0.0,
            boundary_band: default_band(),
            rgb_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub grid: ImageGrid,
    pub camera: CameraModel,
    pub rays: RayField,
    /// Unit normal and offset per region.
    pub planes: Vec<(Vector3<f64>, f64)>,
    pub region: Vec<usize>,
    pub truth: DepthField,
    pub features: FeatureImage,
}

impl SyntheticScene {
    /// Region normal at `pixel`, oriented toward the ray origin.
    pub fn normal_at(&self, pixel: usize) -> Vector3<f64> {
        let (n, _) = self.planes[self.region[pixel]];
        let p = self.rays.point(pixel, self.truth.depth(pixel));
        if n.dot(&(self.rays.origin(pixel) - p)) < 0.0 {
            -n
        } else {
            n
        }
    }
}

/// Builds a scene with analytic ground truth. `seed` drives the RGB
/// texture noise only.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    let grid = ImageGrid::new(spec.width, spec.height)?;
    let camera = spec.camera.build()?;
    let rays = build_ray_field(&camera, grid);
    if spec.regions.is_empty() {
        return Err(config_err("scene needs at least one region"));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(config_err("noise_sigma must be non-negative"));
    }
    if !(spec.normal_noise_deg >= 0.0 && spec.normal_noise_deg < 90.0) {
        return Err(config_err("normal_noise_deg must lie in [0, 90)"));
    }
    if !(spec.rgb_noise >= 0.0 && spec.rgb_noise.is_finite()) {
        return Err(config_err("rgb_noise must be non-negative"));
    }
    let planes = spec.regions.iter().map(|r| r.plane.unit()).collect::<Result<Vec<_>>>()?;

    let mut region = vec![usize::MAX; grid.len()];
    for (idx, r) in spec.regions.iter().enumerate() {
        if r.rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(config_err(format!("region {idx}: rgb must lie in [0, 1]")));
        }
        let [c0, r0, c1, r1] = r.rect.unwrap_or([0, 0, grid.width(), grid.height()]);
        if c0 >= c1 || r0 >= r1 || c1 > grid.width() || r1 > grid.height() {
            return Err(config_err(format!("region {idx}: rectangle {:?} outside the image", r.rect)));
        }
        for row in r0..r1 {
            for col in c0..c1 {
                region[grid.index(col, row)] = idx;
            }
        }
    }
    if let Some(p) = region.iter().position(|&r| r == usize::MAX) {
        let (col, row) = grid.coords(p);
        return Err(config_err(format!("pixel ({col}, {row}) belongs to no region")));
    }

    let mut truth = Vec::with_capacity(grid.len());
    for (p, &r) in region.iter().enumerate() {
        let (n, off) = planes[r];
        if (n.dot(rays.origin(p)) - off).abs() < 1e-12 {
            return Err(config_err(format!("region {r}: plane passes through the camera center")));
        }
        match rays.plane_intersection(p, &n, off) {
            Some(d) if d > 0.0 && d.is_finite() => truth.push(d),
            _ => {
                let (col, row) = grid.coords(p);
                return Err(config_err(format!("region {r}: plane not in front of the camera at pixel ({col}, {row})")));
            }
        }
    }
    let truth = DepthField::new(grid, truth)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = (spec.rgb_noise > 0.0)
        .then(|| Normal::new(0.0, spec.rgb_noise).map_err(|e| config_err(e.to_string())))
        .transpose()?;
    let rgb = region
        .iter()
        .map(|&r| {
            let mut c = spec.regions[r].rgb;
            if let Some(dist) = &texture {
                for ch in &mut c {
                    *ch = (*ch + dist.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            c
        })
        .collect();
    let certainty = (0..grid.len())
        .map(|p| if near_boundary(grid, &region, p, spec.boundary_band) { 0.0 } else { 1.0 })
        .collect();
    let features = FeatureImage::new(grid, rgb, Some(certainty))?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        grid,
        camera,
        rays,
        planes,
        region,
        truth,
        features,
    })
}

/// True when a pixel of another region lies within `band` steps along a row
/// or column.
fn near_boundary(grid: ImageGrid, region: &[usize], p: usize, band: usize) -> bool {
    Direction::ALL.iter().any(|&d| {
        let mut q = p;
        for _ in 0..band {
            match grid.neighbor(q, d) {
                Some(n) if region[n] != region[p] => return true,
                Some(n) => q = n,
                None => return false,
            }
        }
        false
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Equidistant,
    Random,
}

impl SamplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Equidistant => "equidistant",
            Self::Random => "random",
        }
    }
}

/// Sub-grid stride used for a requested ratio.
pub fn equidistant_stride(ratio: f64) -> usize {
    ((1.0 / ratio.sqrt()).round() as usize).max(1)
}

/// Pixels chosen for observation, in increasing order.
pub fn sample_pixels(grid: ImageGrid, ratio: f64, mode: SamplingMode, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(config_err(format!("downsampling ratio must lie in (0, 1], got {ratio}")));
    }
    let pixels = match mode {
        SamplingMode::Equidistant => {
            let s = equidistant_stride(ratio);
            let off = (s - 1) / 2;
            let mut out = Vec::new();
            for row in (off..grid.height()).step_by(s) {
                for col in (off..grid.width()).step_by(s) {
                    out.push(grid.index(col, row));
                }
            }
            out
        }
        SamplingMode::Random => {
            let count = ((ratio * grid.len() as f64).floor() as usize).min(grid.len());
            if count < 3 {
                Vec::new()
            } else {
                let mut v = sample(rng, grid.len(), count).into_vec();
                v.sort_unstable();
                v
            }
        }
    };
    if pixels.len() < 3 {
        return Err(config_err(format!(
            "ratio {ratio} yields {} observations, at least 3 are needed",
            pixels.len()
        )));
    }
    Ok(pixels)
}

/// Sparse observations of the scene. Deterministic in `seed`.
pub fn downsample(scene: &SyntheticScene, ratio: f64, mode: SamplingMode, seed: u64) -> Result<ObservationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = sample_pixels(scene.grid, ratio, mode, &mut rng)?;
    let noise = Normal::new(0.0, scene.spec.noise_sigma).map_err(|e| config_err(e.to_string()))?;
    let tilt = scene.spec.normal_noise_deg.to_radians();
    let mut set = ObservationSet::new(scene.grid);
    for p in pixels {
        let mut depth = scene.truth.depth(p);
        if scene.spec.noise_sigma > 0.0 {
            depth += noise.sample(&mut rng);
        }
        if !(depth > 0.0) {
            return Err(Error::Domain(format!("noisy depth at pixel {p} is not positive")));
        }
        let normal = scene.spec.normals.then(|| {
            let n = scene.normal_at(p);
            if tilt > 0.0 {
                tilt_normal(&n, tilt, &mut rng)
            } else {
                n
            }
        });
        set.insert(Observation { pixel: p, depth, normal })?;
    }
    Ok(set)
}

/// Rotates `n` by `angle` about a random axis perpendicular to it.
fn tilt_normal(n: &Vector3<f64>, angle: f64, rng: &mut impl Rng) -> Vector3<f64> {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let a = n.cross(&helper).normalize();
    let b = n.cross(&a);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let axis = Unit::new_normalize(a * phi.cos() + b * phi.sin());
    Rotation3::from_axis_angle(&axis, angle) * n
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mae: f64,
    pub medae: f64,
    pub max_abs: f64,
    /// Downsampling ratio of the run that produced the estimate.
    pub ratio: f64,
    /// `|estimate - truth|` per pixel, NaN where the estimate is invalid.
    pub errors: Vec<f64>,
    /// Pixels excluded because the estimate is invalid.
    pub invalid: usize,
    pub runtime: Duration,
}

/// Mean and median absolute error over valid estimate pixels. The median of
/// an even count is the lower of the two middle values.
pub fn evaluate(estimate: &DepthField, truth: &DepthField, ratio: f64) -> Result<EvalResult> {
    if estimate.grid() != truth.grid() {
        return Err(Error::Evaluation("estimate and truth differ in size".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Evaluation(format!("ratio {ratio} outside (0, 1]")));
    }
    if truth.valid_count() != truth.grid().len() {
        return Err(Error::Evaluation("ground truth must be valid everywhere".into()));
    }
    let errors: Vec<f64> = (0..truth.grid().len())
        .map(|p| {
            if estimate.is_valid(p) {
                (estimate.depth(p) - truth.depth(p)).abs()
            } else {
                f64::NAN
            }
        })
        .collect();
    let mut valid: Vec<f64> = errors.iter().copied().filter(|e| !e.is_nan()).collect();
    if valid.is_empty() {
        return Err(Error::Evaluation("no valid pixels to evaluate".into()));
    }
    valid.sort_by(f64::total_cmp);
    let mae = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(EvalResult {
        mae,
        medae: valid[(valid.len() - 1) / 2],
        max_abs: valid[valid.len() - 1],
        ratio,
        invalid: errors.len() - valid.len(),
        errors,
        runtime: Duration::ZERO,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Planar,
    Baseline,
}

impl Method {
    pub fn regularizer(self) -> Regularizer {
        match self {
            Self::Planar => Regularizer::Planar,
            Self::Baseline => Regularizer::Baseline,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Planar => "planar",
            Self::Baseline => "baseline",
        }
    }
}

fn both_methods() -> Vec<Method> {
    vec![Method::Planar, Method::Baseline]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    pub modes: Vec<SamplingMode>,
    pub seeds: Vec<u64>,
    #[serde(default = "both_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(config_err("ratios must not be empty"));
        }
        if self.modes.is_empty() {
            return Err(config_err("modes must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        if self.methods.is_empty() {
            return Err(config_err("methods must not be empty"));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(config_err(format!("ratio {r} outside (0, 1]")));
        }
        self.pipeline.validate()
    }
}

/// One cell of the comparison table. Failures are kept as messages.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub method: Method,
    pub mode: SamplingMode,
    pub ratio_requested: f64,
    /// NaN when sampling itself failed.
    pub ratio_achieved: f64,
    pub seed: u64,
    pub outcome: std::result::Result<EvalResult, String>,
}

/// Runs every (mode, ratio, seed, method) cell. Both methods see identical
/// observations. Rows come back in that nesting order regardless of
/// scheduling.
pub fn compare_methods(scene: &SyntheticScene, sweep: &SweepConfig) -> Result<Vec<ComparisonRow>> {
    sweep.validate()?;
    let mut cells = Vec::new();
    for &mode in &sweep.modes {
        for &ratio in &sweep.ratios {
            for &seed in &sweep.seeds {
                cells.push((mode, ratio, seed));
            }
        }
    }
    let rows: Vec<Vec<ComparisonRow>> = cells
        .par_iter()
        .map(|&(mode, ratio, seed)| {
            let obs = downsample(scene, ratio, mode, seed);
            sweep
                .methods
                .iter()
                .map(|&method| {
                    let row = |ratio_achieved, outcome| ComparisonRow {
                        method,
                        mode,
                        ratio_requested: ratio,
                        ratio_achieved,
                        seed,
                        outcome,
                    };
                    match &obs {
                        Err(e) => row(f64::NAN, Err(e.to_string())),
                        Ok(obs) => {
                            let achieved = obs.ratio();
                            row(achieved, run_method(scene, obs, method, &sweep.pipeline, achieved))
                        }
                    }
                })
                .collect()
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

fn run_method(
    scene: &SyntheticScene,
    obs: &ObservationSet,
    method: Method,
    base: &PipelineConfig,
    ratio: f64,
) -> std::result::Result<EvalResult, String> {
    let mut cfg = base.clone();
    cfg.problem.regularizer = method.regularizer();
    let out = run(&scene.rays, &scene.features, obs, &cfg).map_err(|e| e.to_string())?;
    let mut res = evaluate(&out.depth, &scene.truth, ratio).map_err(|e| e.to_string())?;
    res.runtime = out.runtime;
    Ok(res)
}
