//! Image features and the regularization weights derived from them.
//!
//! A pairwise weight between 4-neighbors `i` and `j` is
//! `g(|rgb_i - rgb_j|^2 * certainty_i)`, so it is not symmetric in `i, j`.
//! The weight of a collinearity triple centered at `i` is the product of the
//! two pairwise weights from `i` to its outer pixels.

mod normals;

pub use normals::{estimate_normals, NormalSet, DEGENERACY_RATIO};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::{Direction, ImageGrid, Triple};

/// Floor of the step weighting function.
pub const STEP_FLOOR: f64 = 1e-3;

/// Exponential scale that halves the weight for an RGB step of 0.2 at full
/// certainty: `ln 2 / 0.04`.
pub const DEFAULT_ALPHA: f64 = std::f64::consts::LN_2 / 0.04;

/// Per-pixel RGB in `[0, 1]` and semantic certainty in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    grid: ImageGrid,
    rgb: Vec<[f64; 3]>,
    certainty: Vec<f64>,
}

impl FeatureImage {
    /// Certainty defaults to 1 everywhere when `certainty` is `None`.
    pub fn new(grid: ImageGrid, rgb: Vec<[f64; 3]>, certainty: Option<Vec<f64>>) -> Result<Self> {
        if rgb.len() != grid.len() {
            return Err(config_err("rgb image size does not match grid"));
        }
        let certainty = certainty.unwrap_or_else(|| vec![1.0; grid.len()]);
        if certainty.len() != grid.len() {
            return Err(config_err("certainty image size does not match grid"));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !rgb.iter().flatten().copied().all(in_unit) {
            return Err(config_err("rgb channels must lie in [0, 1]"));
        }
        if !certainty.iter().copied().all(in_unit) {
            return Err(config_err("semantic certainty must lie in [0, 1]"));
        }
        Ok(Self {
            grid,
            rgb,
            certainty,
        })
    }

    /// Uniform gray, full certainty.
    pub fn uniform(grid: ImageGrid) -> Self {
        Self {
            grid,
            rgb: vec![[0.5; 3]; grid.len()],
            certainty: vec![1.0; grid.len()],
        }
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn rgb(&self, pixel: usize) -> [f64; 3] {
        self.rgb[pixel]
    }

    pub fn certainty(&self, pixel: usize) -> f64 {
        self.certainty[pixel]
    }
}

/// Normalized improvement of the top softmax probability over uniform
/// guessing among `num_classes` classes: `(N p - 1) / (N - 1)`.
pub fn semantic_certainty(p_max: f64, num_classes: usize) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::Domain(format!(
            "need at least two classes, got {num_classes}"
        )));
    }
    let n = num_classes as f64;
    // Small slack so that exactly 1/N computed in floating point is accepted.
    if !(p_max.is_finite() && p_max >= 1.0 / n - 1e-12 && p_max <= 1.0 + 1e-12) {
        return Err(Error::Domain(format!(
            "top class probability {p_max} outside [1/{num_classes}, 1]"
        )));
    }
    Ok(((n * p_max - 1.0) / (n - 1.0)).clamp(0.0, 1.0))
}

/// Scalar weighting function `g: [0, inf) -> (0, 1]` with `g(0) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightFunction {
    /// `exp(-alpha x)`.
    Exponential { alpha: f64 },
    /// Logistic falloff around `tau`, rescaled so that `g(0) = 1`.
    Sigmoid { alpha: f64, tau: f64 },
    /// `1` below `tau`, [`STEP_FLOOR`] from `tau` on.
    Step { tau: f64 },
    Constant,
}

impl Default for WeightFunction {
    fn default() -> Self {
        WeightFunction::Exponential {
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl WeightFunction {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            WeightFunction::Exponential { alpha } => alpha > 0.0 && alpha.is_finite(),
            WeightFunction::Sigmoid { alpha, tau } => {
                alpha > 0.0 && alpha.is_finite() && tau >= 0.0 && tau.is_finite()
            }
            // tau = 0 would make g(0) the floor instead of 1.
            WeightFunction::Step { tau } => tau > 0.0 && tau.is_finite(),
            WeightFunction::Constant => true,
        };
        if ok {
            Ok(())
        } else {
            Err(config_err(format!("invalid weight function parameters: {self:?}")))
        }
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(Error::Domain(format!(
                "weight function argument must be non-negative, got {x}"
            )));
        }
        Ok(match *self {
            WeightFunction::Exponential { alpha } => (-alpha * x).exp(),
            WeightFunction::Sigmoid { alpha, tau } => {
                // (1 + e^{-a tau}) / (1 + e^{a (x - tau)}), written to avoid overflow.
                let num = 1.0 + (-alpha * tau).exp();
                let z = alpha * (x - tau);
                if z > 0.0 {
                    num * (-z).exp() / (1.0 + (-z).exp())
                } else {
                    num / (1.0 + z.exp())
                }
            }
            WeightFunction::Step { tau } => {
                if x < tau {
                    1.0
                } else {
                    STEP_FLOOR
                }
            }
            WeightFunction::Constant => 1.0,
        })
    }
}

/// Weight for the ordered 4-neighbor pair `(i, j)`.
pub fn pairwise_weight(features: &FeatureImage, g: &WeightFunction, i: usize, j: usize) -> Result<f64> {
    let a = features.rgb(i);
    let b = features.rgb(j);
    let diff_sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    g.eval(diff_sq * features.certainty(i))
}

/// Directional pairwise weights for every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    grid: ImageGrid,
    // Indexed by `Direction as usize`; entries for missing neighbors are 0.
    pairs: Vec<[f64; 4]>,
}

impl WeightField {
    pub fn compute(features: &FeatureImage, g: &WeightFunction) -> Result<Self> {
        g.validate()?;
        let grid = features.grid();
        let pairs = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let mut w = [0.0; 4];
                for dir in Direction::ALL {
                    if let Some(j) = grid.neighbor(i, dir) {
                        w[dir as usize] = pairwise_weight(features, g, i, j)?;
                    }
                }
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, pairs })
    }

    /// Every existing pair gets weight `w`.
    pub fn uniform(grid: ImageGrid, w: f64) -> Self {
        let pairs = (0..grid.len())
            .map(|i| {
                let mut out = [0.0; 4];
                for dir in Direction::ALL {
                    if grid.neighbor(i, dir).is_some() {
                        out[dir as usize] = w;
                    }
                }
                out
            })
            .collect();
        Self { grid, pairs }
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn get(&self, pixel: usize, dir: Direction) -> f64 {
        self.pairs[pixel][dir as usize]
    }

    pub fn set(&mut self, pixel: usize, dir: Direction, w: f64) {
        self.pairs[pixel][dir as usize] = w;
    }

    /// Weight of the ordered pair `(i, j)`; `None` if they are not 4-neighbors.
    pub fn pair(&self, i: usize, j: usize) -> Option<f64> {
        Direction::ALL
            .into_iter()
            .find(|&d| self.grid.neighbor(i, d) == Some(j))
            .map(|d| self.get(i, d))
    }

    /// `w_ij * w_ik` for the triple centered at `i`.
    pub fn triple_weight(&self, t: &Triple) -> f64 {
        let wij = self.pair(t.i, t.j).unwrap_or(0.0);
        let wik = self.pair(t.i, t.k).unwrap_or(0.0);
        triple_weight(wij, wik)
    }
}

/// Product of the two pairwise weights of a triple.
#[inline]
pub fn triple_weight(w_ij: f64, w_ik: f64) -> f64 {
    w_ij * w_ik
}
