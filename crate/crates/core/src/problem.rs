//! The MRF energy as a sparse nonlinear least-squares problem.
//!
//! Every pixel depth is one parameter. The energy is a sum of squared,
//! weighted residual blocks:
//!
//! ```text
//! depth      sqrt(w_data) * (d_j - d_obs_j)                    observed j
//! normal     sqrt(w_data) * (n_j . ray_n(d_n) - offset_j)      observed j with normal, n in N4(j)
//! collinear  sqrt(w_ij w_ik) * (u(p_i - p_j) - u(p_k - p_i))   each row/column triple (j, i, k)
//! baseline   sqrt(w_in) * (d_i - d_n)                          each ordered 4-neighbor pair
//! ```
//!
//! where `u(x) = x / |x|`. Collinear blocks are used in planar mode and
//! baseline blocks in baseline mode.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::features::WeightField;
use crate::geometry::{Direction, ImageGrid, RayField};
use crate::prior::ProjectedObservations;

/// Segments shorter than this (meters) deactivate a collinearity block.
pub const DEFAULT_EPS_LEN: f64 = 1e-9;

/// A sparse depth observation at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub pixel: usize,
    pub depth: f64,
    /// Unit surface normal in the camera frame.
    pub normal: Option<Vector3<f64>>,
}

/// Observations keyed by pixel, at most one per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    grid: ImageGrid,
    entries: BTreeMap<usize, Observation>,
}

impl ObservationSet {
    pub fn new(grid: ImageGrid) -> Self {
        Self {
            grid,
            entries: BTreeMap::new(),
        }
    }

    /// Adds an observation. When the pixel already holds one, the smaller
    /// depth wins.
    pub fn insert(&mut self, obs: Observation) -> Result<()> {
        if !self.grid.contains(obs.pixel) {
            return Err(config_err(format!("observation pixel {} outside grid", obs.pixel)));
        }
        if !(obs.depth.is_finite() && obs.depth > 0.0) {
            return Err(config_err(format!(
                "observation at pixel {} has invalid depth {}",
                obs.pixel, obs.depth
            )));
        }
        let normal = match obs.normal {
            Some(n) => {
                let len = n.norm();
                if !(len.is_finite() && len > 0.0) {
                    return Err(config_err(format!("invalid normal at pixel {}", obs.pixel)));
                }
                Some(n / len)
            }
            None => None,
        };
        let obs = Observation { normal, ..obs };
        match self.entries.get(&obs.pixel) {
            Some(existing) if existing.depth <= obs.depth => {}
            _ => {
                self.entries.insert(obs.pixel, obs);
            }
        }
        Ok(())
    }

    pub fn from_observations(grid: ImageGrid, obs: impl IntoIterator<Item = Observation>) -> Result<Self> {
        let mut set = Self::new(grid);
        for o in obs {
            set.insert(o)?;
        }
        Ok(set)
    }

    /// Assigns each projected point to its nearest pixel. `normals[source]`
    /// supplies an optional camera-frame normal for each projected entry.
    pub fn from_projections(
        grid: ImageGrid,
        projected: &ProjectedObservations,
        normals: Option<&[Option<Vector3<f64>>]>,
    ) -> Result<Self> {
        let mut set = Self::new(grid);
        for e in projected.entries() {
            let col = (e.u.round().max(0.0) as usize).min(grid.width() - 1);
            let row = (e.v.round().max(0.0) as usize).min(grid.height() - 1);
            let normal = normals.and_then(|n| n.get(e.source).copied().flatten());
            set.insert(Observation {
                pixel: grid.index(col, row),
                depth: e.depth,
                normal,
            })?;
        }
        Ok(set)
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, pixel: usize) -> Option<&Observation> {
        self.entries.get(&pixel)
    }

    /// Observations in ascending pixel order.
    pub fn iter(&self) -> impl Iterator<Item = &Observation> + '_ {
        self.entries.values()
    }

    /// Observed fraction of pixels.
    pub fn ratio(&self) -> f64 {
        self.len() as f64 / self.grid.len() as f64
    }

    pub fn depth_range(&self) -> Option<(f64, f64)> {
        self.iter().fold(None, |acc, o| match acc {
            None => Some((o.depth, o.depth)),
            Some((lo, hi)) => Some((lo.min(o.depth), hi.max(o.depth))),
        })
    }
}

/// Offset of the plane with unit normal `normal` through the observed point
/// of pixel `pixel`: `n . ray(d_obs)`.
pub fn plane_offset(rays: &RayField, pixel: usize, depth: f64, normal: &Vector3<f64>) -> f64 {
    normal.dot(&rays.point(pixel, depth))
}

/// Closed depth interval applied to every parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBounds {
    pub lower: f64,
    pub upper: f64,
}

impl DepthBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower > 0.0 && lower < upper) {
            return Err(config_err(format!("invalid depth bounds [{lower}, {upper}]")));
        }
        Ok(Self { lower, upper })
    }

    #[inline]
    pub fn clamp(&self, d: f64) -> f64 {
        d.clamp(self.lower, self.upper)
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.lower && d <= self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    /// Collinearity of row and column triples.
    #[default]
    Planar,
    /// Constant-depth smoothness between 4-neighbors.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub w_data: f64,
    pub regularizer: Regularizer,
    /// Explicit bounds. When absent, bounds come from the observed depth
    /// range widened by `bounds_margin`.
    pub bounds: Option<DepthBounds>,
    /// Relative widening of the observed range: `[lo / (1 + m), hi * (1 + m)]`.
    pub bounds_margin: f64,
    pub eps_len: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            w_data: 1.0,
            regularizer: Regularizer::Planar,
            bounds: None,
            bounds_margin: 0.5,
            eps_len: DEFAULT_EPS_LEN,
        }
    }
}

impl ProblemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_data > 0.0 && self.w_data.is_finite()) {
            return Err(config_err(format!("w_data must be positive, got {}", self.w_data)));
        }
        if !(self.eps_len > 0.0) {
            return Err(config_err("eps_len must be positive"));
        }
        if !(self.bounds_margin >= 0.0 && self.bounds_margin.is_finite()) {
            return Err(config_err("bounds_margin must be non-negative"));
        }
        if let Some(b) = self.bounds {
            DepthBounds::new(b.lower, b.upper)?;
        }
        Ok(())
    }

    /// Bounds for a given observation set.
    pub fn resolve_bounds(&self, obs: &ObservationSet) -> Result<DepthBounds> {
        if let Some(b) = self.bounds {
            return DepthBounds::new(b.lower, b.upper);
        }
        let (lo, hi) = obs
            .depth_range()
            .ok_or_else(|| config_err("no observations: upsampling needs at least one depth"))?;
        let m = self.bounds_margin;
        let (lo, hi) = (lo / (1.0 + m), hi * (1.0 + m));
        if lo < hi {
            DepthBounds::new(lo, hi)
        } else {
            // Zero margin with a single distinct observed depth.
            DepthBounds::new(lo * (1.0 - 1e-9), hi * (1.0 + 1e-9))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockKind {
    Depth {
        pixel: usize,
        observed: f64,
    },
    /// Point-to-plane distance of `pixel` to the plane anchored at observed pixel `anchor`.
    Normal {
        anchor: usize,
        pixel: usize,
        normal: Vector3<f64>,
        offset: f64,
    },
    Collinear {
        j: usize,
        i: usize,
        k: usize,
    },
    Baseline {
        i: usize,
        n: usize,
    },
}

impl BlockKind {
    pub fn label(&self) -> &'static str {
        match self {
            BlockKind::Depth { .. } => "depth",
            BlockKind::Normal { .. } => "normal",
            BlockKind::Collinear { .. } => "collinear",
            BlockKind::Baseline { .. } => "baseline",
        }
    }
}

/// One weighted residual term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlock {
    pub kind: BlockKind,
    /// Square root of the block weight, applied to residual and Jacobian.
    pub sqrt_weight: f64,
}

/// Residual values and Jacobian of one block at a given state.
///
/// Only the first `dim` residuals and the first `params.len()` Jacobian
/// columns are meaningful.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockValue {
    pub dim: usize,
    pub residual: [f64; 3],
    /// `jacobian[r][c]` is the derivative of residual `r` w.r.t. parameter `c`.
    pub jacobian: [[f64; 3]; 3],
    /// False when a collinearity block was deactivated by the segment guard.
    pub active: bool,
}

/// Parameter indices touched by a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Params {
    len: usize,
    idx: [usize; 3],
}

impl Params {
    pub fn as_slice(&self) -> &[usize] {
        &self.idx[..self.len]
    }
}

impl ResidualBlock {
    pub fn params(&self) -> Params {
        match self.kind {
            BlockKind::Depth { pixel, .. } | BlockKind::Normal { pixel, .. } => Params {
                len: 1,
                idx: [pixel, 0, 0],
            },
            BlockKind::Collinear { j, i, k } => Params { len: 3, idx: [j, i, k] },
            BlockKind::Baseline { i, n } => Params { len: 2, idx: [i, n, 0] },
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            BlockKind::Collinear { .. } => 3,
            _ => 1,
        }
    }

    /// Weighted residual and Jacobian at `depths`.
    pub fn evaluate(&self, rays: &RayField, depths: &[f64], eps_len: f64) -> BlockValue {
        let s = self.sqrt_weight;
        let mut out = BlockValue {
            dim: self.dim(),
            residual: [0.0; 3],
            jacobian: [[0.0; 3]; 3],
            active: true,
        };
        match self.kind {
            BlockKind::Depth { pixel, observed } => {
                out.residual[0] = s * depth_residual(depths[pixel], observed);
                out.jacobian[0][0] = s;
            }
            BlockKind::Normal {
                pixel, normal, offset, ..
            } => {
                out.residual[0] = s * normal_residual(rays, &normal, offset, pixel, depths[pixel]);
                out.jacobian[0][0] = s * normal.dot(rays.direction(pixel));
            }
            BlockKind::Collinear { j, i, k } => {
                match collinearity_with_jacobian(rays, [j, i, k], [depths[j], depths[i], depths[k]], eps_len) {
                    Some((r, jac)) => {
                        for row in 0..3 {
                            out.residual[row] = s * r[row];
                            for col in 0..3 {
                                out.jacobian[row][col] = s * jac[(row, col)];
                            }
                        }
                    }
                    None => out.active = false,
                }
            }
            BlockKind::Baseline { i, n } => {
                out.residual[0] = s * baseline_residual(depths[i], depths[n]);
                out.jacobian[0][0] = s;
                out.jacobian[0][1] = -s;
            }
        }
        out
    }
}

/// `d_hat - d_obs`; its derivative w.r.t. `d_hat` is 1.
#[inline]
pub fn depth_residual(d_hat: f64, d_obs: f64) -> f64 {
    d_hat - d_obs
}

/// Signed distance `n . ray_pixel(d_hat) - offset` of a neighbor point to
/// an observed plane. Its derivative w.r.t. `d_hat` is `n . dir_pixel`.
#[inline]
pub fn normal_residual(rays: &RayField, normal: &Vector3<f64>, offset: f64, pixel: usize, d_hat: f64) -> f64 {
    normal.dot(&rays.point(pixel, d_hat)) - offset
}

/// `d_hat_i - d_hat_n`.
#[inline]
pub fn baseline_residual(d_hat_i: f64, d_hat_n: f64) -> f64 {
    d_hat_i - d_hat_n
}

/// Difference of the unit directions `p_j -> p_i` and `p_i -> p_k`. Zero
/// exactly when the three points lie on a line in `j, i, k` order.
///
/// Returns `None` when either segment is shorter than `eps_len`.
pub fn collinearity_residual(
    p_j: &Vector3<f64>,
    p_i: &Vector3<f64>,
    p_k: &Vector3<f64>,
    eps_len: f64,
) -> Option<Vector3<f64>> {
    let a = p_i - p_j;
    let b = p_k - p_i;
    let (la, lb) = (a.norm(), b.norm());
    if la < eps_len || lb < eps_len {
        return None;
    }
    Some(a / la - b / lb)
}

/// Collinearity residual of three pixels at the given depths with its
/// Jacobian w.r.t. `(d_j, d_i, d_k)`.
pub fn collinearity_with_jacobian(
    rays: &RayField,
    pixels: [usize; 3],
    depths: [f64; 3],
    eps_len: f64,
) -> Option<(Vector3<f64>, Matrix3<f64>)> {
    let [j, i, k] = pixels;
    let p_j = rays.point(j, depths[0]);
    let p_i = rays.point(i, depths[1]);
    let p_k = rays.point(k, depths[2]);
    let a = p_i - p_j;
    let b = p_k - p_i;
    let (la, lb) = (a.norm(), b.norm());
    if la < eps_len || lb < eps_len {
        return None;
    }
    let ua = a / la;
    let ub = b / lb;
    // d(x/|x|)/dx = (I - u u^T) / |x|
    let pa = (Matrix3::identity() - ua * ua.transpose()) / la;
    let pb = (Matrix3::identity() - ub * ub.transpose()) / lb;
    let dir_j = rays.direction(j);
    let dir_i = rays.direction(i);
    let dir_k = rays.direction(k);
    let col_j = -(pa * dir_j);
    let col_i = pa * dir_i + pb * dir_i;
    let col_k = -(pb * dir_k);
    Some((ua - ub, Matrix3::from_columns(&[col_j, col_i, col_k])))
}

/// The assembled least-squares problem.
#[derive(Debug, Clone)]
pub struct ResidualGraph {
    grid: ImageGrid,
    rays: RayField,
    blocks: Vec<ResidualBlock>,
    bounds: DepthBounds,
    eps_len: f64,
}

impl ResidualGraph {
    /// Builds a graph from explicit blocks. Used by tests and custom problems.
    pub fn from_blocks(rays: RayField, blocks: Vec<ResidualBlock>, bounds: DepthBounds, eps_len: f64) -> Result<Self> {
        let grid = rays.grid();
        for (b, block) in blocks.iter().enumerate() {
            if block.params().as_slice().iter().any(|&p| p >= grid.len()) {
                return Err(config_err(format!("block {b} references a pixel outside the grid")));
            }
            if !(block.sqrt_weight >= 0.0 && block.sqrt_weight.is_finite()) {
                return Err(config_err(format!("block {b} has invalid weight")));
            }
        }
        Ok(Self {
            grid,
            rays,
            blocks,
            bounds,
            eps_len,
        })
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn rays(&self) -> &RayField {
        &self.rays
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn num_params(&self) -> usize {
        self.grid.len()
    }

    pub fn num_residuals(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    pub fn bounds(&self) -> DepthBounds {
        self.bounds
    }

    pub fn eps_len(&self) -> f64 {
        self.eps_len
    }

    /// Count of blocks per kind label.
    pub fn block_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for b in &self.blocks {
            *out.entry(b.kind.label()).or_insert(0) += 1;
        }
        out
    }

    /// Total energy, the sum of squared weighted residuals.
    pub fn cost(&self, depths: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let v = b.evaluate(&self.rays, depths, self.eps_len);
                v.residual[..v.dim].iter().map(|r| r * r).sum::<f64>()
            })
            .sum()
    }
}

/// Builds the residual graph; see the module docs for the block layout.
/// Blocks are emitted in a fixed order: data blocks by observed pixel, then
/// regularizer blocks by center pixel.
pub fn assemble(rays: &RayField, obs: &ObservationSet, weights: &WeightField, cfg: &ProblemConfig) -> Result<ResidualGraph> {
    cfg.validate()?;
    let grid = rays.grid();
    if obs.grid() != grid || weights.grid() != grid {
        return Err(config_err("rays, observations and weights must share one grid"));
    }
    if obs.is_empty() {
        return Err(config_err("no observations: upsampling needs at least one depth"));
    }
    let bounds = cfg.resolve_bounds(obs)?;
    let sqrt_data = cfg.w_data.sqrt();
    let mut blocks = Vec::with_capacity(obs.len() + 2 * grid.len());

    for o in obs.iter() {
        blocks.push(ResidualBlock {
            kind: BlockKind::Depth {
                pixel: o.pixel,
                observed: o.depth,
            },
            sqrt_weight: sqrt_data,
        });
        if let Some(normal) = o.normal {
            let offset = plane_offset(rays, o.pixel, o.depth, &normal);
            for n in grid.neighbors4(o.pixel) {
                blocks.push(ResidualBlock {
                    kind: BlockKind::Normal {
                        anchor: o.pixel,
                        pixel: n,
                        normal,
                        offset,
                    },
                    sqrt_weight: sqrt_data,
                });
            }
        }
    }

    for i in 0..grid.len() {
        match cfg.regularizer {
            Regularizer::Planar => {
                for t in grid.collinearity_triples(i) {
                    blocks.push(ResidualBlock {
                        kind: BlockKind::Collinear { j: t.j, i: t.i, k: t.k },
                        sqrt_weight: weights.triple_weight(&t).sqrt(),
                    });
                }
            }
            Regularizer::Baseline => {
                for dir in Direction::ALL {
                    if let Some(n) = grid.neighbor(i, dir) {
                        blocks.push(ResidualBlock {
                            kind: BlockKind::Baseline { i, n },
                            sqrt_weight: weights.get(i, dir).sqrt(),
                        });
                    }
                }
            }
        }
    }

    ResidualGraph::from_blocks(rays.clone(), blocks, bounds, cfg.eps_len)
}
