//! Bounded Levenberg-Marquardt over a [`ResidualGraph`].
//!
//! Each iteration solves `(J^T J + lambda diag(J^T J)) delta = -J^T r` with a
//! sparse `L D L^T` factorization (or Jacobi-preconditioned CG for large
//! problems), projects the trial point onto the depth bounds and accepts it
//! only if the cost decreases. Damping shrinks by `damping_decrease` after an
//! accepted step and grows by `damping_increase` after a rejected one.

pub mod pcg;
pub mod skyline;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::DepthField;
use crate::problem::{BlockValue, ResidualGraph};

use pcg::CsrMatrix;
use skyline::SkylineMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearSolver {
    /// Envelope Cholesky up to `pcg_threshold` parameters, CG above.
    #[default]
    Auto,
    Cholesky,
    Pcg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundsMode {
    /// Clamp every trial point onto the box.
    #[default]
    Project,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop when `|grad|_inf < gradient_tolerance * (1 + cost)`.
    pub gradient_tolerance: f64,
    /// Stop when a step's infinity norm drops below this (meters).
    pub step_tolerance: f64,
    /// Stop when an accepted step reduces the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Damping above which the solve aborts.
    pub max_damping: f64,
    pub bounds: BoundsMode,
    pub linear_solver: LinearSolver,
    pub pcg_threshold: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-10,
            cost_tolerance: 1e-9,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 3.0,
            max_damping: 1e32,
            bounds: BoundsMode::Project,
            linear_solver: LinearSolver::Auto,
            pcg_threshold: 250_000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gradient_tolerance", self.gradient_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("cost_tolerance", self.cost_tolerance),
            ("initial_damping", self.initial_damping),
            ("max_damping", self.max_damping),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(config_err(format!("solver {name} must be positive, got {v}")));
            }
        }
        if self.max_iterations < 1 {
            return Err(config_err("solver max_iterations must be at least 1"));
        }
        if !(self.damping_increase > 1.0 && self.damping_decrease > 1.0) {
            return Err(config_err("damping factors must exceed 1"));
        }
        Ok(())
    }

    fn use_pcg(&self, n: usize) -> bool {
        match self.linear_solver {
            LinearSolver::Auto => n > self.pcg_threshold,
            LinearSolver::Cholesky => false,
            LinearSolver::Pcg => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    ConvergedGradient,
    ConvergedStep,
    ConvergedCost,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    /// Linear solves, including rejected trials.
    pub linear_solves: usize,
    pub termination: Termination,
    /// Cost at the start and after every accepted step.
    pub cost_trace: Vec<f64>,
}

/// Residuals and Jacobian blocks at one state, in graph block order.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Sum of squared residuals.
    pub cost: f64,
    /// `2 J^T r`.
    pub gradient: Vec<f64>,
    pub blocks: Vec<BlockValue>,
}

/// Cost, gradient and block Jacobians. Fails on the first non-finite block.
pub fn evaluate(graph: &ResidualGraph, depths: &[f64]) -> Result<Evaluation> {
    if depths.len() != graph.num_params() {
        return Err(config_err("depth vector length does not match the graph"));
    }
    if let Some(p) = depths.iter().position(|d| !d.is_finite()) {
        return Err(Error::Numerical(format!("non-finite depth at pixel {p}")));
    }
    let blocks: Vec<BlockValue> = graph
        .blocks()
        .par_iter()
        .map(|b| b.evaluate(graph.rays(), depths, graph.eps_len()))
        .collect();
    let mut cost = 0.0;
    let mut gradient = vec![0.0; graph.num_params()];
    for (id, (block, v)) in graph.blocks().iter().zip(&blocks).enumerate() {
        let params = block.params();
        for r in 0..v.dim {
            let res = v.residual[r];
            if !res.is_finite() || v.jacobian[r].iter().any(|j| !j.is_finite()) {
                return Err(Error::NonFinite { block: id });
            }
            cost += res * res;
            for (c, &p) in params.as_slice().iter().enumerate() {
                gradient[p] += 2.0 * v.jacobian[r][c] * res;
            }
        }
    }
    Ok(Evaluation {
        cost,
        gradient,
        blocks,
    })
}

/// Storage for `J^T J`, chosen per problem size.
#[derive(Debug, Clone)]
pub(crate) enum NormalMatrix {
    Skyline(SkylineMatrix),
    Csr(CsrMatrix),
}

impl NormalMatrix {
    pub(crate) fn skyline(graph: &ResidualGraph) -> Self {
        let mut first: Vec<usize> = (0..graph.num_params()).collect();
        for b in graph.blocks() {
            let p = b.params();
            let lo = *p.as_slice().iter().min().expect("block without parameters");
            for &q in p.as_slice() {
                first[q] = first[q].min(lo);
            }
        }
        NormalMatrix::Skyline(SkylineMatrix::zeros(first))
    }

    pub(crate) fn csr(graph: &ResidualGraph) -> Self {
        let mut rows: Vec<BTreeSet<usize>> = (0..graph.num_params()).map(|i| BTreeSet::from([i])).collect();
        for b in graph.blocks() {
            let p = b.params();
            for &a in p.as_slice() {
                rows[a].extend(p.as_slice().iter().copied());
            }
        }
        let rows: Vec<Vec<usize>> = rows.into_iter().map(|r| r.into_iter().collect()).collect();
        NormalMatrix::Csr(CsrMatrix::zeros(&rows))
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        match self {
            NormalMatrix::Skyline(m) => m.add(i, j, v),
            NormalMatrix::Csr(m) => m.add(i, j, v),
        }
    }

    pub(crate) fn diag(&self, i: usize) -> f64 {
        match self {
            NormalMatrix::Skyline(m) => m.diag(i),
            NormalMatrix::Csr(m) => m.diag(i),
        }
    }

    fn add_diag(&mut self, i: usize, v: f64) {
        match self {
            NormalMatrix::Skyline(m) => m.add_diag(i, v),
            NormalMatrix::Csr(m) => m.add_diag(i, v),
        }
    }

    fn clear(&mut self) {
        match self {
            NormalMatrix::Skyline(m) => m.clear(),
            NormalMatrix::Csr(m) => m.clear(),
        }
    }

    /// Overwrites the matrix with `J^T J` of the evaluated blocks.
    pub(crate) fn assemble(&mut self, graph: &ResidualGraph, eval: &Evaluation) {
        self.clear();
        for (block, v) in graph.blocks().iter().zip(&eval.blocks) {
            if !v.active {
                continue;
            }
            let p = block.params();
            let p = p.as_slice();
            for a in 0..p.len() {
                for b in 0..=a {
                    let s: f64 = (0..v.dim).map(|r| v.jacobian[r][a] * v.jacobian[r][b]).sum();
                    if s != 0.0 {
                        self.add(p[a], p[b], s);
                    }
                }
            }
        }
    }

    /// Solves `self * x = b`. Returns `None` if CG fails to converge.
    fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        match self {
            NormalMatrix::Skyline(m) => Some(m.factor().solve(b)),
            NormalMatrix::Csr(m) => {
                let n = m.dim();
                let diag: Vec<f64> = (0..n).map(|i| m.diag(i)).collect();
                let res = pcg::pcg(|x| m.matvec(x), &diag, b, 1e-12, 20 * n.max(50));
                res.converged.then_some(res.x)
            }
        }
    }
}

/// Minimizes the graph energy starting from `init`.
///
/// The start point is projected onto the bounds. The returned field is valid
/// everywhere; its cost never exceeds the initial cost.
pub fn solve(graph: &ResidualGraph, init: &DepthField, cfg: &SolverConfig) -> Result<(DepthField, SolveReport)> {
    cfg.validate()?;
    if graph.blocks().is_empty() {
        return Err(config_err("cannot solve an empty residual graph"));
    }
    if init.grid() != graph.grid() {
        return Err(config_err("initial depth field does not match the graph grid"));
    }
    if let Some(p) = init.depths().iter().position(|d| !d.is_finite()) {
        return Err(Error::Numerical(format!("non-finite initial depth at pixel {p}")));
    }
    let n = graph.num_params();
    let bounds = graph.bounds();
    let project = |d: f64| match cfg.bounds {
        BoundsMode::Project => bounds.clamp(d),
        BoundsMode::Ignore => d,
    };
    let mut x: Vec<f64> = init.depths().iter().map(|&d| project(d)).collect();
    let mut eval = evaluate(graph, &x)?;
    let initial_cost = eval.cost;
    let mut trace = vec![eval.cost];
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;
    let mut linear_solves = 0;
    let mut normal = if cfg.use_pcg(n) {
        NormalMatrix::csr(graph)
    } else {
        NormalMatrix::skyline(graph)
    };

    let termination = 'outer: loop {
        let grad_inf = eval.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_inf < cfg.gradient_tolerance * (1.0 + eval.cost.abs()) {
            break Termination::ConvergedGradient;
        }
        if iterations >= cfg.max_iterations {
            break Termination::MaxIterations;
        }
        normal.assemble(graph, &eval);
        let max_diag = (0..n).map(|i| normal.diag(i)).fold(0.0f64, f64::max);
        let scale: Vec<f64> = (0..n).map(|i| normal.diag(i).max(1e-12 * max_diag)).collect();
        let rhs: Vec<f64> = eval.gradient.iter().map(|g| -0.5 * g).collect();

        loop {
            let mut damped = normal.clone();
            for (i, s) in scale.iter().enumerate() {
                damped.add_diag(i, lambda * s);
            }
            linear_solves += 1;
            let step = damped.solve(&rhs);
            let trial = step.as_ref().map(|delta| {
                x.iter().zip(delta).map(|(&xi, &di)| project(xi + di)).collect::<Vec<f64>>()
            });
            if let Some(trial) = trial {
                let step_inf = trial.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                if step_inf < cfg.step_tolerance {
                    break 'outer Termination::ConvergedStep;
                }
                if let Ok(trial_eval) = evaluate(graph, &trial) {
                    if trial_eval.cost < eval.cost {
                        let decrease = (eval.cost - trial_eval.cost) / eval.cost;
                        x = trial;
                        eval = trial_eval;
                        trace.push(eval.cost);
                        iterations += 1;
                        lambda = (lambda / cfg.damping_decrease).max(1e-15);
                        if decrease < cfg.cost_tolerance {
                            break 'outer Termination::ConvergedCost;
                        }
                        continue 'outer;
                    }
                }
            }
            lambda *= cfg.damping_increase;
            if lambda > cfg.max_damping {
                return Err(Error::Numerical(format!(
                    "damping exceeded {:e} without a cost decrease after {iterations} iterations (cost {:e})",
                    cfg.max_damping, eval.cost
                )));
            }
        }
    };

    log::debug!(
        "solve finished: {termination:?} after {iterations} iterations, cost {:e} -> {:e}",
        initial_cost,
        eval.cost
    );
    let report = SolveReport {
        initial_cost,
        final_cost: eval.cost,
        iterations,
        linear_solves,
        termination,
        cost_trace: trace,
    };
    Ok((DepthField::new(graph.grid(), x)?, report))
}
