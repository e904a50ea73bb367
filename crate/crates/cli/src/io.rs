//! File formats: PFM depth and variance rasters, ASCII PLY point clouds and
//! 8/16-bit feature rasters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use planar_mrf::geometry::ImageGrid;
use planar_mrf::nalgebra::Vector3;

use crate::error::CliError;

/// Single-channel float raster in row-major order, top row first.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn from_f64(grid: ImageGrid, values: &[f64]) -> Self {
        Self {
            width: grid.width(),
            height: grid.height(),
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Writes a little-endian grayscale PFM (scale -1). PFM stores rows bottom
/// to top.
pub fn write_pfm(path: &Path, r: &Raster) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = format!("Pf\n{} {}\n-1.0\n", r.width, r.height).into_bytes();
    buf.reserve(r.data.len() * 4);
    for row in (0..r.height).rev() {
        for v in &r.data[row * r.width..(row + 1) * r.width] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Reads a grayscale PFM of either byte order.
pub fn read_pfm(path: &Path) -> Result<Raster, CliError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    parse_pfm(&bytes).map_err(|m| CliError::format(path, m))
}

fn parse_pfm(bytes: &[u8]) -> Result<Raster, String> {
    // Header is three whitespace-separated tokens after the magic, then a
    // single whitespace byte before the data.
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PFM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => return Err("color PFM is not supported; expected a single channel".into()),
        m => return Err(format!("not a PFM file (magic {m:?})")),
    }
    let width: usize = token()?.parse().map_err(|_| "bad PFM width")?;
    let height: usize = token()?.parse().map_err(|_| "bad PFM height")?;
    let scale: f32 = token()?.parse().map_err(|_| "bad PFM scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err("PFM scale must be non-zero".into());
    }
    let data_start = pos + 1;
    let n = width.checked_mul(height).ok_or("PFM dimensions overflow")?;
    let body = bytes.get(data_start..).ok_or("truncated PFM data")?;
    if body.len() != n * 4 {
        return Err(format!("PFM data has {} bytes, expected {}", body.len(), n * 4));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; n];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row_from_bottom, col) = (i / width, i % width);
        data[(height - 1 - row_from_bottom) * width + col] = v;
    }
    Ok(Raster { width, height, data })
}

/// One point of an output cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Vector3<f64>,
    pub normal: Option<Vector3<f64>>,
    pub rgb: [u8; 3],
    pub variance: Option<f64>,
}

/// ASCII PLY with `x y z nx ny nz red green blue variance`. Missing normals
/// and variances are written as `nan`.
pub fn write_ply(path: &Path, points: &[CloudPoint]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
        for p in ["x", "y", "z", "nx", "ny", "nz"] {
            writeln!(w, "property float {p}")?;
        }
        for p in ["red", "green", "blue"] {
            writeln!(w, "property uchar {p}")?;
        }
        writeln!(w, "property float variance\nend_header")?;
        for p in points {
            let n = p.normal.unwrap_or(Vector3::repeat(f64::NAN));
            let var = p.variance.unwrap_or(f64::NAN);
            writeln!(
                w,
                "{} {} {} {} {} {} {} {} {} {}",
                p.position.x as f32,
                p.position.y as f32,
                p.position.z as f32,
                n.x as f32,
                n.y as f32,
                n.z as f32,
                p.rgb[0],
                p.rgb[1],
                p.rgb[2],
                var as f32
            )?;
        }
        w.flush()
    };
    write().map_err(|e| CliError::io(path, e))
}

/// Point positions and optional normals from an ASCII PLY file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

/// Reads the vertex element of an ASCII PLY. `x y z` are required; `nx ny nz`
/// are read when all three are present.
pub fn read_ply(path: &Path) -> Result<PlyCloud, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_ply(BufReader::new(file)).map_err(|m| CliError::format(path, m))
}

fn parse_ply(reader: impl BufRead) -> Result<PlyCloud, String> {
    let mut lines = reader.lines();
    let mut next = || -> Result<String, String> {
        lines
            .next()
            .ok_or_else(|| "unexpected end of PLY file".to_string())?
            .map_err(|e| e.to_string())
    };
    if next()?.trim() != "ply" {
        return Err("missing 'ply' magic".into());
    }
    // (name, count, properties) per element, in file order.
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    loop {
        let line = next()?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err("only ASCII PLY is supported".into());
                }
            }
            Some("element") => {
                let name = tok.next().ok_or("element without name")?.to_string();
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or("element without count")?;
                elements.push((name, count, Vec::new()));
            }
            Some("property") => {
                let el = elements.last_mut().ok_or("property before element")?;
                let rest: Vec<&str> = tok.collect();
                if rest.first() == Some(&"list") {
                    el.2.push(String::from("<list>"));
                } else {
                    el.2.push(rest.last().ok_or("property without name")?.to_string());
                }
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    let mut cloud = None;
    for (name, count, props) in &elements {
        if name != "vertex" {
            // Elements before the vertex block must be skipped line by line.
            if cloud.is_none() {
                for _ in 0..*count {
                    next()?;
                }
            }
            continue;
        }
        let col = |p: &str| props.iter().position(|q| q == p);
        let (x, y, z) = match (col("x"), col("y"), col("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err("vertex element lacks x, y or z".into()),
        };
        if props.iter().any(|p| p == "<list>") {
            return Err("list properties on vertices are not supported".into());
        }
        let normal_cols = match (col("nx"), col("ny"), col("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        let mut points = Vec::with_capacity(*count);
        let mut normals = normal_cols.map(|_| Vec::with_capacity(*count));
        for i in 0..*count {
            let line = next()?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| format!("vertex {i}: non-numeric value"))?;
            if vals.len() != props.len() {
                return Err(format!("vertex {i}: expected {} values, got {}", props.len(), vals.len()));
            }
            points.push(Vector3::new(vals[x], vals[y], vals[z]));
            if let (Some((a, b, c)), Some(ns)) = (normal_cols, normals.as_mut()) {
                ns.push(Vector3::new(vals[a], vals[b], vals[c]));
            }
        }
        cloud = Some(PlyCloud { points, normals });
    }
    cloud.ok_or_else(|| "PLY file has no vertex element".to_string())
}

/// RGB raster scaled to `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>), CliError> {
    let img = image::open(path).map_err(|e| CliError::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let rgb = img.pixels().map(|p| p.0.map(|c| f64::from(c) / 255.0)).collect();
    Ok((w as usize, h as usize, rgb))
}

/// Single-channel raster scaled to `[0, 1]`; 16-bit images keep their depth.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f64>), CliError> {
    let img = image::open(path).map_err(|e| CliError::image(path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.pixels().map(|p| f64::from(p.0[0]) / 65535.0).collect()))
}
