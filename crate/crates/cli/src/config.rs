//! TOML configuration for the `upsample` and `benchmark` commands. Relative
//! paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use planar_mrf::bench::{SceneSpec, SweepConfig};
use planar_mrf::{CameraConfig, PipelineConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// 8- or 16-bit RGB raster defining the output grid.
    pub rgb: PathBuf,
    /// Optional single-channel semantic certainty raster.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certainty: Option<PathBuf>,
    /// Sparse depth PFM with NaN holes. Exclusive with `points`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    /// Sensor-frame ASCII PLY cloud. Exclusive with `depth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<PathBuf>,
    /// PCA radius for estimating normals of `points`, meters. Without it,
    /// normals stored in the cloud are used when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub depth: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub camera: CameraConfig,
    pub input: InputConfig,
    pub output: OutputConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// CSV destination.
    pub output: PathBuf,
    /// Seed for scene texture noise.
    #[serde(default)]
    pub scene_seed: u64,
    pub scenes: Vec<SceneSpec>,
    pub sweep: SweepConfig,
}

fn parse<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::config_at(path, e.message().to_string()))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")))
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: Self = parse(path)?;
        let base = config_dir(path);
        let i = &mut cfg.input;
        for p in [Some(&mut i.rgb), i.certainty.as_mut(), i.depth.as_mut(), i.points.as_mut()]
            .into_iter()
            .flatten()
        {
            resolve(&base, p);
        }
        let o = &mut cfg.output;
        for p in [Some(&mut o.depth), o.variance.as_mut(), o.cloud.as_mut(), o.summary.as_mut()]
            .into_iter()
            .flatten()
        {
            resolve(&base, p);
        }
        cfg.validate().map_err(|e| match e.path {
            None => CliError::config_at(path, e.message),
            Some(_) => e,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.camera.build()?;
        self.pipeline.validate()?;
        let i = &self.input;
        match (&i.depth, &i.points) {
            (Some(_), Some(_)) => return Err(CliError::config("input.depth and input.points are exclusive")),
            (None, None) => return Err(CliError::config("one of input.depth or input.points is required")),
            _ => {}
        }
        if let Some(r) = i.normal_radius {
            if i.points.is_none() {
                return Err(CliError::config("input.normal_radius needs input.points"));
            }
            if !(r > 0.0 && r.is_finite()) {
                return Err(CliError::config(format!("input.normal_radius must be positive, got {r}")));
            }
        }
        for p in [Some(&i.rgb), i.certainty.as_ref(), i.depth.as_ref(), i.points.as_ref()]
            .into_iter()
            .flatten()
        {
            require_file(p)?;
        }
        Ok(())
    }
}

impl BenchmarkConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: Self = parse(path)?;
        resolve(&config_dir(path), &mut cfg.output);
        cfg.validate().map_err(|e| CliError::config_at(path, e.message))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.scenes.is_empty() {
            return Err(CliError::config("scenes must not be empty"));
        }
        self.sweep.validate()?;
        Ok(())
    }
}
