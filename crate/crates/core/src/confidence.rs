//! Per-depth variances from the inverse Gauss-Newton Hessian and
//! variance-threshold filtering.
//!
//! The variance of pixel `i` is `((J^T J)^{-1})_{ii}` with `J` the weighted
//! Jacobian at the solution. No residual-variance scaling is applied.
//! Variables whose pivot vanishes during factorization are reported as
//! unavailable instead of receiving an arbitrary large value.
//!
//! The full diagonal is computed by selected inversion inside the envelope
//! of the factor, which costs about as much as the factorization itself.
//! A pixel subset can be requested instead; each entry then costs one
//! triangular solve pair.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::geometry::{DepthField, ImageGrid};
use crate::problem::ResidualGraph;
use crate::solver::{evaluate, NormalMatrix};

/// Which variances to compute.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceSelection {
    #[default]
    All,
    Pixels(Vec<usize>),
}

/// Per-pixel variance; `None` where unavailable or not requested.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceField {
    grid: ImageGrid,
    variances: Vec<Option<f64>>,
}

impl ConfidenceField {
    pub fn new(grid: ImageGrid, variances: Vec<Option<f64>>) -> Result<Self> {
        if variances.len() != grid.len() {
            return Err(config_err("variance field size does not match grid"));
        }
        if variances.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(config_err("variances must be non-negative"));
        }
        Ok(Self { grid, variances })
    }

    /// NaN entries are unavailable.
    pub fn from_nan_masked(grid: ImageGrid, values: &[f64]) -> Result<Self> {
        Self::new(grid, values.iter().map(|&v| v.is_finite().then_some(v)).collect())
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn variance(&self, pixel: usize) -> Option<f64> {
        self.variances[pixel]
    }

    pub fn variances(&self) -> &[Option<f64>] {
        &self.variances
    }

    /// Variances with unavailable entries as NaN.
    pub fn to_nan_masked(&self) -> Vec<f64> {
        self.variances.iter().map(|v| v.unwrap_or(f64::NAN)).collect()
    }

    /// Available and strictly below `threshold`.
    pub fn keep(&self, pixel: usize, threshold: f64) -> bool {
        matches!(self.variances[pixel], Some(v) if v < threshold)
    }

    pub fn keep_mask(&self, threshold: f64) -> Vec<bool> {
        (0..self.grid.len()).map(|i| self.keep(i, threshold)).collect()
    }

    pub fn unavailable_count(&self) -> usize {
        self.variances.iter().filter(|v| v.is_none()).count()
    }
}

/// Diagonal of `(J^T J)^{-1}` at `solution`.
pub fn estimate_variances(
    graph: &ResidualGraph,
    solution: &DepthField,
    selection: &VarianceSelection,
) -> Result<ConfidenceField> {
    if solution.grid() != graph.grid() {
        return Err(config_err("solution does not match the graph grid"));
    }
    let eval = evaluate(graph, solution.depths())?;
    let mut normal = NormalMatrix::skyline(graph);
    normal.assemble(graph, &eval);
    let NormalMatrix::Skyline(matrix) = normal else {
        unreachable!("skyline storage requested");
    };
    let factor = matrix.factor();
    let n = graph.num_params();
    let variances = match selection {
        VarianceSelection::All => factor.inverse_diagonal(),
        VarianceSelection::Pixels(pixels) => {
            use rayon::prelude::*;
            if let Some(&p) = pixels.iter().find(|&&p| p >= n) {
                return Err(config_err(format!("variance pixel {p} outside grid")));
            }
            let values: Vec<(usize, Option<f64>)> = pixels.par_iter().map(|&p| (p, factor.inverse_entry(p))).collect();
            let mut out = vec![None; n];
            for (p, v) in values {
                out[p] = v;
            }
            out
        }
    };
    // Round-off can push a tiny variance below zero.
    let variances = variances.into_iter().map(|v| v.map(|v| v.max(0.0))).collect();
    ConfidenceField::new(graph.grid(), variances)
}

/// Marks depths invalid where the variance is unavailable or not below
/// `threshold`. Depth values are never changed.
pub fn filter_depths(depths: &DepthField, conf: &ConfidenceField, threshold: f64) -> Result<DepthField> {
    if depths.grid() != conf.grid() {
        return Err(config_err("depth and variance fields differ in size"));
    }
    depths.masked(conf.keep_mask(threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::WeightField;
    use crate::geometry::{build_ray_field, CameraModel, Direction};
    use crate::problem::{assemble, BlockKind, DepthBounds, Observation, ObservationSet, ProblemConfig, ResidualBlock};
    use nalgebra::DMatrix;

    fn scalar_graph(sqrt_weight: f64) -> ResidualGraph {
        let grid = ImageGrid::new(3, 3).unwrap();
        let rays = build_ray_field(&CameraModel::pinhole(1.0, 1.0, 1.0, 1.0).unwrap(), grid);
        let blocks = vec![ResidualBlock {
            kind: BlockKind::Depth { pixel: 4, observed: 2.0 },
            sqrt_weight,
        }];
        ResidualGraph::from_blocks(rays, blocks, DepthBounds::new(0.1, 10.0).unwrap(), 1e-9).unwrap()
    }

    #[test]
    fn scalar_variances() {
        let sol = DepthField::constant(ImageGrid::new(3, 3).unwrap(), 2.0).unwrap();
        let c = estimate_variances(&scalar_graph(1.0), &sol, &VarianceSelection::All).unwrap();
        assert_eq!(c.variance(4), Some(1.0));
        // Parameters without any residual are unavailable.
        assert_eq!(c.unavailable_count(), 8);
        let c = estimate_variances(&scalar_graph(10.0), &sol, &VarianceSelection::All).unwrap();
        assert!((c.variance(4).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn subset_selection_matches_full() {
        let (g, sol) = small_problem(0.5);
        let all = estimate_variances(&g, &sol, &VarianceSelection::All).unwrap();
        let some = estimate_variances(&g, &sol, &VarianceSelection::Pixels(vec![0, 7, 15])).unwrap();
        for p in [0, 7, 15] {
            let (a, b) = (all.variance(p).unwrap(), some.variance(p).unwrap());
            assert!((a - b).abs() < 1e-10 * a.max(1.0));
        }
        assert!(some.variance(1).is_none());
    }

    fn small_problem(weight: f64) -> (ResidualGraph, DepthField) {
        let grid = ImageGrid::new(4, 4).unwrap();
        let rays = build_ray_field(&CameraModel::pinhole(3.0, 3.0, 1.5, 1.5).unwrap(), grid);
        let obs = ObservationSet::from_observations(
            grid,
            [0, 3, 5, 12, 15].map(|p| Observation { pixel: p, depth: 2.0 + 0.1 * p as f64, normal: None }),
        )
        .unwrap();
        let g = assemble(&rays, &obs, &WeightField::uniform(grid, weight), &ProblemConfig::default()).unwrap();
        let sol = DepthField::new(grid, (0..16).map(|i| 2.0 + 0.07 * i as f64).collect()).unwrap();
        (g, sol)
    }

    fn dense_jtj(g: &ResidualGraph, x: &[f64]) -> DMatrix<f64> {
        let n = g.num_params();
        let mut m = DMatrix::zeros(n, n);
        for b in g.blocks() {
            let v = b.evaluate(g.rays(), x, g.eps_len());
            let p = b.params();
            for r in 0..v.dim {
                for (a, &pa) in p.as_slice().iter().enumerate() {
                    for (c, &pc) in p.as_slice().iter().enumerate() {
                        m[(pa, pc)] += v.jacobian[r][a] * v.jacobian[r][c];
                    }
                }
            }
        }
        m
    }

    #[test]
    fn matches_dense_inverse() {
        let (g, sol) = small_problem(1.0);
        let c = estimate_variances(&g, &sol, &VarianceSelection::All).unwrap();
        let inv = dense_jtj(&g, sol.depths()).try_inverse().unwrap();
        for i in 0..16 {
            assert!((c.variance(i).unwrap() - inv[(i, i)]).abs() < 1e-8);
        }
    }

    #[test]
    fn weight_scaling_scales_variances_inversely() {
        let grid = ImageGrid::new(4, 4).unwrap();
        let rays = build_ray_field(&CameraModel::pinhole(3.0, 3.0, 1.5, 1.5).unwrap(), grid);
        let obs = ObservationSet::from_observations(
            grid,
            [0, 3, 5, 12, 15].map(|p| Observation { pixel: p, depth: 2.0 + 0.1 * p as f64, normal: None }),
        )
        .unwrap();
        let sol = DepthField::new(grid, (0..16).map(|i| 2.0 + 0.07 * i as f64).collect()).unwrap();
        let s = 3.0;
        let base = assemble(&rays, &obs, &WeightField::uniform(grid, 0.5), &ProblemConfig::default()).unwrap();
        let scaled_cfg = ProblemConfig { w_data: s, ..Default::default() };
        let scaled = assemble(&rays, &obs, &WeightField::uniform(grid, 0.5 * s.sqrt()), &scaled_cfg).unwrap();
        let a = estimate_variances(&base, &sol, &VarianceSelection::All).unwrap();
        let b = estimate_variances(&scaled, &sol, &VarianceSelection::All).unwrap();
        for i in 0..16 {
            let (va, vb) = (a.variance(i).unwrap(), b.variance(i).unwrap());
            assert!((vb - va / s).abs() < 1e-9 * va, "{i}: {va} {vb}");
        }
    }

    #[test]
    fn extra_observation_never_increases_variance() {
        let grid = ImageGrid::new(4, 4).unwrap();
        let rays = build_ray_field(&CameraModel::pinhole(3.0, 3.0, 1.5, 1.5).unwrap(), grid);
        let sol = DepthField::new(grid, (0..16).map(|i| 2.0 + 0.07 * i as f64).collect()).unwrap();
        let base_px = [0, 3, 12, 15];
        for extra in [5usize, 6, 9, 10] {
            let mk = |px: &[usize]| {
                let obs = ObservationSet::from_observations(
                    grid,
                    px.iter().map(|&p| Observation { pixel: p, depth: 2.0 + 0.07 * p as f64, normal: None }),
                )
                .unwrap();
                let g = assemble(&rays, &obs, &WeightField::uniform(grid, 1.0), &ProblemConfig::default()).unwrap();
                estimate_variances(&g, &sol, &VarianceSelection::All).unwrap()
            };
            let without = mk(&base_px);
            let mut with_px = base_px.to_vec();
            with_px.push(extra);
            let with = mk(&with_px);
            for i in 0..16 {
                assert!(with.variance(i).unwrap() <= without.variance(i).unwrap() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn filter_examples() {
        let (g, sol) = small_problem(1.0);
        let c = estimate_variances(&g, &sol, &VarianceSelection::All).unwrap();
        let all = filter_depths(&sol, &c, f64::INFINITY).unwrap();
        assert_eq!(all.valid_count(), 16);
        assert_eq!(all.depths(), sol.depths());
        let none = filter_depths(&sol, &c, 0.0).unwrap();
        assert_eq!(none.valid_count(), 0);
        assert_eq!(none.depths(), sol.depths());
    }

    #[test]
    fn decoupled_pixel_stands_out() {
        let grid = ImageGrid::new(5, 5).unwrap();
        let rays = build_ray_field(&CameraModel::pinhole(1.0, 1.0, 2.0, 2.0).unwrap(), grid);
        let isolated = grid.index(3, 2);
        let obs = ObservationSet::from_observations(
            grid,
            (0..25).filter(|&p| p != isolated).map(|p| Observation { pixel: p, depth: 3.0, normal: None }),
        )
        .unwrap();
        let mut w = WeightField::uniform(grid, 1.0);
        for d in Direction::ALL {
            w.set(isolated, d, crate::features::STEP_FLOOR);
            if let Some(n) = grid.neighbor(isolated, d) {
                w.set(n, d.opposite(), crate::features::STEP_FLOOR);
            }
        }
        let g = assemble(&rays, &obs, &w, &ProblemConfig::default()).unwrap();
        let sol = DepthField::constant(grid, 3.0).unwrap();
        let c = estimate_variances(&g, &sol, &VarianceSelection::All).unwrap();
        let mut avail: Vec<f64> = c.variances().iter().flatten().copied().collect();
        avail.sort_by(f64::total_cmp);
        let median = avail[(avail.len() - 1) / 2];
        match c.variance(isolated) {
            None => {}
            Some(v) => assert!(v >= 1e3 * median, "isolated variance {v}, median {median}"),
        }
    }
}
