//! The `upsample`, `benchmark` and `filter` commands.

use std::fs;
use std::path::{Path, PathBuf};

use planar_mrf::bench::{compare_methods, generate_scene, ComparisonRow};
use planar_mrf::geometry::ImageGrid;
use planar_mrf::nalgebra::Vector3;
use planar_mrf::pipeline::observations_from_points;
use planar_mrf::prior::ProjectedObservations;
use planar_mrf::problem::Observation;
use planar_mrf::{
    build_ray_field, filter_depths, run, surface_normals, CameraModel, ConfidenceField, DepthField, FeatureImage,
    ObservationSet, SolveReport,
};
use serde::Serialize;

use crate::config::{BenchmarkConfig, InputConfig, RunConfig};
use crate::error::{CliError, ExitKind};
use crate::io::{read_gray, read_pfm, read_ply, read_rgb, write_pfm, write_ply, CloudPoint, Raster};

/// Run summary written next to the outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub width: usize,
    pub height: usize,
    pub observations: usize,
    pub ratio: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub linear_solves: usize,
    pub termination: planar_mrf::Termination,
    pub filtered_px: usize,
    pub runtime_s: f64,
}

impl Summary {
    fn new(grid: ImageGrid, obs: &ObservationSet, report: &SolveReport, filtered: usize, runtime: f64) -> Self {
        Self {
            width: grid.width(),
            height: grid.height(),
            observations: obs.len(),
            ratio: obs.ratio(),
            initial_cost: report.initial_cost,
            final_cost: report.final_cost,
            iterations: report.iterations,
            linear_solves: report.linear_solves,
            termination: report.termination,
            filtered_px: filtered,
            runtime_s: runtime,
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

fn load_features(input: &InputConfig) -> Result<FeatureImage, CliError> {
    let (w, h, rgb) = read_rgb(&input.rgb)?;
    let grid = ImageGrid::new(w, h).map_err(|e| CliError::config_at(&input.rgb, e.to_string()))?;
    let certainty = match &input.certainty {
        Some(p) => {
            let (cw, ch, c) = read_gray(p)?;
            if (cw, ch) != (w, h) {
                return Err(CliError::config_at(p, format!("certainty is {cw}x{ch}, rgb is {w}x{h}")));
            }
            Some(c)
        }
        None => None,
    };
    Ok(FeatureImage::new(grid, rgb, certainty)?)
}

fn load_observations(input: &InputConfig, camera: &CameraModel, grid: ImageGrid) -> Result<ObservationSet, CliError> {
    if let Some(path) = &input.depth {
        let r = read_pfm(path)?;
        if (r.width, r.height) != (grid.width(), grid.height()) {
            return Err(CliError::config_at(
                path,
                format!("depth is {}x{}, rgb is {}x{}", r.width, r.height, grid.width(), grid.height()),
            ));
        }
        let obs = r
            .to_f64()
            .into_iter()
            .enumerate()
            .filter(|(_, d)| d.is_finite() && *d > 0.0)
            .map(|(pixel, depth)| Observation { pixel, depth, normal: None });
        return ObservationSet::from_observations(grid, obs).map_err(|e| CliError::config_at(path, e.to_string()));
    }
    let path = input.points.as_ref().expect("validated: depth or points");
    let cloud = read_ply(path)?;
    let obs = match (input.normal_radius, &cloud.normals) {
        (None, Some(normals)) => {
            // Stored normals are in the sensor frame.
            let projected = ProjectedObservations::from_points(camera, &grid, &cloud.points)?;
            let rot = camera.sensor_to_camera().rotation;
            let normals: Vec<Option<Vector3<f64>>> = normals
                .iter()
                .map(|n| (n.iter().all(|c| c.is_finite()) && n.norm() > 0.0).then(|| rot * n))
                .collect();
            ObservationSet::from_projections(grid, &projected, Some(&normals))
        }
        (radius, _) => observations_from_points(camera, grid, &cloud.points, radius),
    };
    obs.map_err(|e| CliError::config_at(path, e.to_string()))
}

/// Runs the upsampling pipeline described by a config file.
pub fn upsample(config: &Path) -> Result<Summary, CliError> {
    let cfg = RunConfig::load(config)?;
    let camera = cfg.camera.build()?;
    let features = load_features(&cfg.input)?;
    let grid = features.grid();
    let obs = load_observations(&cfg.input, &camera, grid)?;
    if obs.is_empty() {
        return Err(CliError::config_at(config, "input contains no depth observations inside the image"));
    }
    let rays = build_ray_field(&camera, grid);
    let mut pipeline = cfg.pipeline.clone();
    pipeline.variances |= cfg.output.variance.is_some() || cfg.output.cloud.is_some();
    let out = run(&rays, &features, &obs, &pipeline)?;

    let o = &cfg.output;
    ensure_parent(&o.depth)?;
    write_pfm(&o.depth, &Raster::from_f64(grid, &out.depth.to_nan_masked()))?;
    if let (Some(path), Some(conf)) = (&o.variance, &out.confidence) {
        ensure_parent(path)?;
        write_pfm(path, &Raster::from_f64(grid, &conf.to_nan_masked()))?;
    }
    if let Some(path) = &o.cloud {
        let normals = surface_normals(&rays, &out.depth);
        let points: Vec<CloudPoint> = (0..grid.len())
            .filter(|&p| out.depth.is_valid(p))
            .map(|p| CloudPoint {
                position: rays.point(p, out.depth.depth(p)),
                normal: normals[p],
                rgb: features.rgb(p).map(|c| (c * 255.0).round() as u8),
                variance: out.confidence.as_ref().and_then(|c| c.variance(p)),
            })
            .collect();
        ensure_parent(path)?;
        write_ply(path, &points)?;
    }
    let summary = Summary::new(grid, &obs, &out.report, out.filtered, out.runtime.as_secs_f64());
    if let Some(path) = &o.summary {
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))?;
    }
    Ok(summary)
}

/// Outcome of a benchmark sweep.
#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub csv: PathBuf,
    pub rows: usize,
    pub failed: usize,
}

pub const CSV_HEADER: [&str; 11] = [
    "method",
    "mode",
    "ratio_requested",
    "ratio_achieved",
    "seed",
    "mae_m",
    "medae_m",
    "filtered_px",
    "runtime_s",
    "scene",
    "error",
];

fn csv_record(scene: &str, row: &ComparisonRow) -> Vec<String> {
    let (mae, medae, filtered, runtime, error) = match &row.outcome {
        Ok(r) => (
            r.mae.to_string(),
            r.medae.to_string(),
            r.invalid.to_string(),
            r.runtime.as_secs_f64().to_string(),
            String::new(),
        ),
        Err(e) => (String::new(), String::new(), String::new(), String::new(), e.replace(['\n', '\r'], " ")),
    };
    vec![
        row.method.as_str().into(),
        row.mode.as_str().into(),
        row.ratio_requested.to_string(),
        if row.ratio_achieved.is_nan() { String::new() } else { row.ratio_achieved.to_string() },
        row.seed.to_string(),
        mae,
        medae,
        filtered,
        runtime,
        scene.into(),
        error,
    ]
}

/// Runs the comparison sweep for every scene and writes the CSV table.
/// Cell failures are recorded in the table and reported afterwards.
pub fn benchmark(config: &Path) -> Result<BenchmarkOutcome, CliError> {
    let cfg = BenchmarkConfig::load(config)?;
    ensure_parent(&cfg.output)?;
    let mut writer = csv::Writer::from_path(&cfg.output).map_err(|e| csv_err(&cfg.output, e))?;
    writer.write_record(CSV_HEADER).map_err(|e| csv_err(&cfg.output, e))?;
    let (mut rows, mut failed) = (0, 0);
    for (i, spec) in cfg.scenes.iter().enumerate() {
        let name = if spec.name.is_empty() { format!("scene{i}") } else { spec.name.clone() };
        let scene = generate_scene(spec, cfg.scene_seed)
            .map_err(|e| CliError::config_at(config, format!("scene {name}: {e}")))?;
        for row in compare_methods(&scene, &cfg.sweep)? {
            failed += usize::from(row.outcome.is_err());
            rows += 1;
            writer
                .write_record(csv_record(&name, &row))
                .map_err(|e| csv_err(&cfg.output, e))?;
        }
    }
    writer.flush().map_err(|e| CliError::io(&cfg.output, e))?;
    Ok(BenchmarkOutcome {
        csv: cfg.output,
        rows,
        failed,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::format(path, e.to_string())
}

/// Kept and filtered pixel counts of a filter run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterCounts {
    pub kept: usize,
    pub filtered: usize,
}

/// Masks depths whose variance is unavailable or not below `threshold`.
pub fn filter(depth: &Path, var: &Path, threshold: f64, out: &Path) -> Result<FilterCounts, CliError> {
    if !(threshold >= 0.0) {
        return Err(CliError::config(format!("threshold must be non-negative, got {threshold}")));
    }
    let d = read_pfm(depth)?;
    let v = read_pfm(var)?;
    if (d.width, d.height) != (v.width, v.height) {
        return Err(CliError::config_at(
            var,
            format!("variance is {}x{}, depth is {}x{}", v.width, v.height, d.width, d.height),
        ));
    }
    let grid = ImageGrid::new(d.width, d.height).map_err(|e| CliError::config_at(depth, e.to_string()))?;
    let depths = DepthField::from_nan_masked(grid, &d.to_f64()).map_err(|e| CliError::config_at(depth, e.to_string()))?;
    let conf = ConfidenceField::from_nan_masked(grid, &v.to_f64()).map_err(|e| CliError::config_at(var, e.to_string()))?;
    let kept = filter_depths(&depths, &conf, threshold)?;
    ensure_parent(out)?;
    write_pfm(out, &Raster::from_f64(grid, &kept.to_nan_masked()))?;
    let k = kept.valid_count();
    Ok(FilterCounts {
        kept: k,
        filtered: grid.len() - k,
    })
}

/// Caps the global thread pool from the environment.
pub fn configure_threads(var: &str) -> Result<(), CliError> {
    let Ok(value) = std::env::var(var) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("{var} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError {
            kind: ExitKind::Config,
            path: None,
            message: e.to_string(),
        })
}
