//! Fixtures shared by the CLI integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use planar_mrf::bench::{downsample, generate_scene, PlaneSpec, RegionSpec, SamplingMode, SceneSpec, SyntheticScene};
use planar_mrf::CameraConfig;
use planar_mrf_cli::io::{write_pfm, Raster};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_planar-mrf"))
}

pub fn run_bin(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

/// Two-region 16x16 scene: a slanted plane with a fronto-parallel panel.
pub fn small_scene() -> SyntheticScene {
    let cam = CameraConfig::pinhole(16.0, 16.0, 7.5, 7.5);
    let model = cam.build().unwrap();
    let mut spec = SceneSpec::single_plane(16, 16, cam, PlaneSpec::through_pixel(&model, [1.0, 0.0, 2.0], 7.5, 7.5, 4.0));
    spec.regions[0].rgb = [0.3, 0.4, 0.5];
    spec.regions.push(RegionSpec {
        rect: Some([10, 2, 15, 8]),
        plane: PlaneSpec { normal: [0.0, 0.0, 1.0], offset: 3.0 },
        rgb: [0.9, 0.2, 0.1],
    });
    generate_scene(&spec, 0).unwrap()
}

/// Writes rgb.png, sparse.pfm and run.toml; returns the config path.
pub fn write_upsample_fixture(dir: &Path, extra_pipeline: &str) -> PathBuf {
    let scene = small_scene();
    let g = scene.grid;
    let mut img = image::RgbImage::new(g.width() as u32, g.height() as u32);
    for (p, px) in img.pixels_mut().enumerate() {
        px.0 = scene.features.rgb(p).map(|c| (c * 255.0).round() as u8);
    }
    img.save(dir.join("rgb.png")).unwrap();
    let obs = downsample(&scene, 0.1, SamplingMode::Random, 4).unwrap();
    let mut sparse = vec![f64::NAN; g.len()];
    for o in obs.iter() {
        sparse[o.pixel] = o.depth;
    }
    write_pfm(&dir.join("sparse.pfm"), &Raster::from_f64(g, &sparse)).unwrap();
    let cfg = format!(
        r#"
[camera]
fx = 16.0
fy = 16.0
cx = 7.5
cy = 7.5

[input]
rgb = "rgb.png"
depth = "sparse.pfm"

[output]
depth = "out/depth.pfm"
variance = "out/variance.pfm"
cloud = "out/cloud.ply"
summary = "out/summary.json"

[pipeline]
{extra_pipeline}
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

/// One scene, the given ratios, both modes and both methods.
pub fn write_benchmark_config(dir: &Path, ratios: &str) -> PathBuf {
    let cfg = format!(
        r#"
output = "results.csv"

[[scenes]]
name = "slanted"
width = 24
height = 24
camera = {{ fx = 24.0, fy = 24.0, cx = 11.5, cy = 11.5 }}

[[scenes.regions]]
plane = {{ normal = [1.0, 0.0, 2.0], offset = 8.0 }}

[sweep]
ratios = {ratios}
modes = ["equidistant", "random"]
seeds = [3]
"#
    );
    let path = dir.join("bench.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

/// CSV header and records with the runtime column dropped.
pub fn csv_without_runtime(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    let rt = header.iter().position(|h| h == "runtime_s").unwrap();
    let strip = |rec: &csv::StringRecord| -> Vec<String> {
        rec.iter().enumerate().filter(|(i, _)| *i != rt).map(|(_, v)| v.to_string()).collect()
    };
    let mut rows = vec![strip(&header)];
    for rec in r.records() {
        rows.push(strip(&rec.unwrap()));
    }
    rows
}
