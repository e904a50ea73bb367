//! Dense depth upsampling from sparse range measurements on a pixel-grid
//! Markov random field.
//!
//! Sparse depth observations are fused with image features through a
//! regularizer that prefers locally planar surfaces where the image is
//! homogeneous. The resulting nonlinear least-squares problem is solved by a
//! bounded Levenberg-Marquardt method, and the inverse Gauss-Newton Hessian
//! yields per-pixel variances for confidence filtering.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod confidence;
pub mod error;
pub mod features;
pub mod geometry;
pub mod kdtree;
pub mod pipeline;
pub mod prior;
pub mod problem;
pub mod solver;

pub use confidence::{estimate_variances, filter_depths, ConfidenceField, VarianceSelection};
pub use error::{Error, Result};
pub use features::{FeatureImage, WeightField, WeightFunction};
pub use geometry::{build_ray_field, CameraKind, CameraModel, DepthField, ImageGrid, RayField};
pub use prior::{init_constant, init_depth, triangulate, ProjectedObservations, TriangleMesh};
pub use problem::{assemble, DepthBounds, Observation, ObservationSet, ProblemConfig, Regularizer, ResidualGraph};
pub use solver::{evaluate, solve, SolveReport, SolverConfig, Termination};
pub use nalgebra;
pub use pipeline::{run, surface_normals, CameraConfig, InitMethod, PipelineConfig, PipelineOutput};
