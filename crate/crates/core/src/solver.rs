//! Subspace Barzilai-Borwein non-negative least squares.
//!
//! Minimizes `0.5 * ||M w - y||^2` subject to `w >= 0` using only the two
//! SpMV kernels. Iterations are numbered from 1. Each iteration computes the
//! gradient `g = M^T (M w - y)`, restricts it to the free subspace
//! (`g~`, see [`project_gradient`]), picks a step
//!
//! * odd iteration:  `alpha = <g~, g~> / <M g~, M g~>`
//! * even iteration: `alpha = <M g~, M g~> / <M^T M g~, M^T M g~>`
//!
//! and updates `w <- [w - alpha * g~]_+`.

use std::time::Duration;

use crate::datagen::Problem;
use crate::engine::{self, build_plan, ExecutionPlan, PartitionStrategy, SpmvOp};
use crate::error::{Error, Result};
use crate::restructure::sort_by;
use crate::tensor::{precompute_offsets, Dictionary, Key, OffsetPhiTensor, PhiTensor, WeightVector};

/// Restructuring and partitioning for one SpMV operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpmvSetup {
    pub restructure: Option<Key>,
    pub partition: PartitionStrategy,
}

impl SpmvSetup {
    /// Voxel order with the sync-free mapping for DSC; atom order with
    /// coefficient partitioning for WC.
    pub fn default_for(op: SpmvOp) -> Self {
        match op {
            SpmvOp::Dsc => SpmvSetup { restructure: Some(Key::Voxel), partition: PartitionStrategy::sync_free() },
            SpmvOp::Wc => SpmvSetup { restructure: Some(Key::Atom), partition: PartitionStrategy::coefficient() },
        }
    }

    pub fn unsorted() -> Self {
        SpmvSetup { restructure: None, partition: PartitionStrategy::coefficient() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop once `||g~||_2 < grad_tol`.
    pub grad_tol: f64,
    pub threads: usize,
    pub dsc: SpmvSetup,
    pub wc: SpmvSetup,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 500,
            grad_tol: 1e-12,
            threads: 1,
            dsc: SpmvSetup::default_for(SpmvOp::Dsc),
            wc: SpmvSetup::default_for(SpmvOp::Wc),
        }
    }
}

/// Call counters accumulated by a [`ConnectomeOperator`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OpCounters {
    pub dsc_calls: usize,
    pub wc_calls: usize,
    pub dsc_time: Duration,
    pub wc_time: Duration,
}

/// `M` and `M^T` as kernel calls over (possibly differently restructured)
/// copies of the tensor.
#[derive(Debug, Clone)]
pub struct ConnectomeOperator {
    dict: Dictionary,
    dsc_tensor: OffsetPhiTensor,
    dsc_plan: ExecutionPlan,
    wc_tensor: OffsetPhiTensor,
    wc_plan: ExecutionPlan,
    pub counters: OpCounters,
    /// Zero-weight skips reported by the most recent [`apply`](Self::apply).
    pub last_skipped: usize,
}

fn prepare(tensor: &PhiTensor, setup: SpmvSetup, threads: usize) -> Result<(OffsetPhiTensor, ExecutionPlan)> {
    let sorted = match setup.restructure {
        Some(key) => sort_by(tensor, key).0,
        None => tensor.clone(),
    };
    let plan = build_plan(&sorted, setup.partition, threads)?;
    Ok((precompute_offsets(sorted)?, plan))
}

impl ConnectomeOperator {
    pub fn new(
        tensor: &PhiTensor,
        dict: &Dictionary,
        dsc: SpmvSetup,
        wc: SpmvSetup,
        threads: usize,
    ) -> Result<Self> {
        crate::tensor::validate(tensor, dict, None, None)?;
        let (dsc_tensor, dsc_plan) = prepare(tensor, dsc, threads)?;
        let (wc_tensor, wc_plan) = prepare(tensor, wc, threads)?;
        Ok(ConnectomeOperator {
            dict: dict.clone(),
            dsc_tensor,
            dsc_plan,
            wc_tensor,
            wc_plan,
            counters: OpCounters::default(),
            last_skipped: 0,
        })
    }

    /// Single-threaded operator over the tensor as given.
    pub fn sequential(tensor: &PhiTensor, dict: &Dictionary) -> Result<Self> {
        Self::new(tensor, dict, SpmvSetup::unsorted(), SpmvSetup::unsorted(), 1)
    }

    pub fn n_rows(&self) -> usize {
        self.dsc_tensor.dims().n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.dsc_tensor.dims().n_fibers
    }

    /// `M w`
    pub fn apply(&mut self, w: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_rows()];
        let stats = engine::dsc_parallel(&self.dsc_tensor, &self.dict, w, &mut out, &self.dsc_plan)?;
        self.counters.dsc_calls += 1;
        self.counters.dsc_time += stats.elapsed;
        self.last_skipped = stats.skipped_coefficients;
        Ok(out)
    }

    /// `M^T y`
    pub fn apply_transpose(&mut self, y: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_cols()];
        let stats = engine::wc_parallel(&self.wc_tensor, &self.dict, y, &mut out, &self.wc_plan)?;
        self.counters.wc_calls += 1;
        self.counters.wc_time += stats.elapsed;
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gradient of the objective at some `w`, with the residual it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub grad: Vec<f64>,
    pub residual: Vec<f64>,
    /// `0.5 * ||M w - y||^2`
    pub objective: f64,
}

/// `M^T (M w - y)` using one DSC and one WC.
pub fn gradient(op: &mut ConnectomeOperator, y: &[f64], w: &[f64]) -> Result<Gradient> {
    let mut residual = op.apply(w)?;
    if residual.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "signal has length {}, expected {}",
            y.len(),
            residual.len()
        )));
    }
    for (r, b) in residual.iter_mut().zip(y) {
        *r -= b;
    }
    let objective = 0.5 * dot(&residual, &residual);
    let grad = op.apply_transpose(&residual)?;
    Ok(Gradient { grad, residual, objective })
}

/// Gradient of a [`Problem`] at `w` via sequential kernels.
pub fn problem_gradient(problem: &Problem, w: &[f64]) -> Result<Vec<f64>> {
    let mut op = ConnectomeOperator::sequential(&problem.tensor, &problem.dict)?;
    Ok(gradient(&mut op, problem.signal()?, w)?.grad)
}

/// `max(v, 0)` elementwise; negatives become exactly `0.0`.
pub fn project_nonneg(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

/// Zeroes the gradient on the active set `{f : w_f = 0 and g_f > 0}`, where a
/// descent step would immediately be clipped by the projection.
pub fn project_gradient(grad: &[f64], w: &[f64]) -> Vec<f64> {
    grad.iter()
        .zip(w)
        .map(|(&g, &x)| if x == 0.0 && g > 0.0 { 0.0 } else { g })
        .collect()
}

/// Barzilai-Borwein step for 1-based iteration `iter`.
pub fn step_size(iter: usize, g_tilde: &[f64], op: &mut ConnectomeOperator) -> Result<f64> {
    let mg = op.apply(g_tilde)?;
    let mg_sq = dot(&mg, &mg);
    let (num, den) = if iter % 2 == 1 {
        (dot(g_tilde, g_tilde), mg_sq)
    } else {
        let mtmg = op.apply_transpose(&mg)?;
        (mg_sq, dot(&mtmg, &mtmg))
    };
    let alpha = num / den;
    if den == 0.0 || !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::DegenerateStep);
    }
    Ok(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIters,
    GradTol,
    DegenerateStep,
}

/// One completed update.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    /// 1-based.
    pub iteration: usize,
    /// Objective at the iterate this update started from.
    pub objective: f64,
    pub alpha: f64,
    /// `||g~||_2` at the starting iterate.
    pub grad_norm: f64,
    /// Exact zeros in the starting iterate.
    pub zeros_before: usize,
    /// Exact zeros in the updated iterate.
    pub zeros: usize,
    /// Zero-weight skips in the gradient's DSC call.
    pub skipped: usize,
    pub dsc_calls: usize,
    pub wc_calls: usize,
    pub dsc_s: f64,
    pub wc_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub termination: Termination,
    pub records: Vec<IterRecord>,
}

/// Solves the problem with the configured restructuring and threads.
///
/// Without `w0`, starts from all ones scaled by `||y|| / ||M 1||`.
pub fn solve(problem: &Problem, w0: Option<&[f64]>, config: &SolverConfig) -> Result<(WeightVector, SolverTrace)> {
    problem.validate()?;
    let y = problem.signal()?;
    let mut op = ConnectomeOperator::new(&problem.tensor, &problem.dict, config.dsc, config.wc, config.threads)?;
    let w0 = match w0 {
        Some(w) => w.to_vec(),
        None => default_start(&mut op, y)?,
    };
    solve_with(&mut op, y, &w0, config)
}

/// Ones scaled so that `||M w0|| = ||y||`.
pub fn default_start(op: &mut ConnectomeOperator, y: &[f64]) -> Result<Vec<f64>> {
    let ones = vec![1.0; op.n_cols()];
    let m1 = norm(&op.apply(&ones)?);
    let scale = if m1 > 0.0 { norm(y) / m1 } else { 0.0 };
    Ok(vec![scale; op.n_cols()])
}

fn count_zeros(w: &[f64]) -> usize {
    w.iter().filter(|&&x| x == 0.0).count()
}

/// The iteration loop over an already-prepared operator.
pub fn solve_with(
    op: &mut ConnectomeOperator,
    y: &[f64],
    w0: &[f64],
    config: &SolverConfig,
) -> Result<(WeightVector, SolverTrace)> {
    solve_observed(op, y, w0, config, |_, _| {})
}

/// [`solve_with`], calling `observe(iteration, w)` after every update.
pub fn solve_observed<F>(
    op: &mut ConnectomeOperator,
    y: &[f64],
    w0: &[f64],
    config: &SolverConfig,
    mut observe: F,
) -> Result<(WeightVector, SolverTrace)>
where
    F: FnMut(usize, &[f64]),
{
    if w0.len() != op.n_cols() {
        return Err(Error::DimensionMismatch(format!(
            "w0 has length {}, expected {}",
            w0.len(),
            op.n_cols()
        )));
    }
    let mut w = project_nonneg(w0);
    let mut records = Vec::new();
    let mut initial_objective = None;
    let mut termination = Termination::MaxIters;

    for iter in 1..=config.max_iters.max(1) {
        let before = op.counters;
        let g = gradient(op, y, &w)?;
        let skipped = op.last_skipped;
        initial_objective.get_or_insert(g.objective);
        let g_tilde = project_gradient(&g.grad, &w);
        let grad_norm = norm(&g_tilde);
        if grad_norm < config.grad_tol || grad_norm == 0.0 {
            termination = Termination::GradTol;
            break;
        }
        let alpha = match step_size(iter, &g_tilde, op) {
            Ok(a) => a,
            Err(Error::DegenerateStep) => {
                termination = Termination::DegenerateStep;
                break;
            }
            Err(e) => return Err(e),
        };
        let zeros_before = count_zeros(&w);
        for (x, g) in w.iter_mut().zip(&g_tilde) {
            let v = *x - alpha * g;
            *x = if v > 0.0 { v } else { 0.0 };
        }
        observe(iter, &w);
        let after = op.counters;
        records.push(IterRecord {
            iteration: iter,
            objective: g.objective,
            alpha,
            grad_norm,
            zeros_before,
            zeros: count_zeros(&w),
            skipped,
            dsc_calls: after.dsc_calls - before.dsc_calls,
            wc_calls: after.wc_calls - before.wc_calls,
            dsc_s: (after.dsc_time - before.dsc_time).as_secs_f64(),
            wc_s: (after.wc_time - before.wc_time).as_secs_f64(),
        });
    }

    let mut r = op.apply(&w)?;
    for (a, b) in r.iter_mut().zip(y) {
        *a -= b;
    }
    let final_objective = 0.5 * dot(&r, &r);
    let trace = SolverTrace {
        initial_objective: initial_objective.unwrap_or(final_objective),
        final_objective,
        termination,
        records,
    };
    Ok((WeightVector(w), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig};
    use crate::tensor::{Dims, SignalVector};

    fn scalar_problem(b: f64) -> Problem {
        let tensor = PhiTensor::new(
            Dims { n_atoms: 1, n_voxels: 1, n_fibers: 1, n_dirs: 1, n_coeffs: 1 },
            vec![0],
            vec![0],
            vec![0],
            vec![1.0],
        )
        .unwrap();
        Problem {
            tensor,
            dict: Dictionary::new(1, 1, vec![1.0]).unwrap(),
            y: Some(SignalVector(vec![b])),
            w_true: None,
            config: None,
        }
    }

    #[test]
    fn scalar_gradient() {
        let p = scalar_problem(2.5);
        assert_eq!(problem_gradient(&p, &[4.0]).unwrap(), vec![1.5]);
    }

    #[test]
    fn projection() {
        assert_eq!(project_nonneg(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(project_nonneg(&[0.5, 3.0]), vec![0.5, 3.0]);
        let p = project_nonneg(&[-0.0, -1e-300]);
        assert!(p.iter().all(|x| x.to_bits() == 0));
    }

    #[test]
    fn active_set_rule() {
        let g = project_gradient(&[1.0, -1.0, 1.0, -1.0], &[0.0, 0.0, 2.0, 2.0]);
        assert_eq!(g, vec![0.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn scalar_step_sizes_are_one() {
        let p = scalar_problem(1.0);
        let mut op = ConnectomeOperator::sequential(&p.tensor, &p.dict).unwrap();
        assert_eq!(step_size(1, &[3.0], &mut op).unwrap(), 1.0);
        assert_eq!(step_size(2, &[-0.25], &mut op).unwrap(), 1.0);
        assert!(matches!(step_size(1, &[0.0], &mut op), Err(Error::DegenerateStep)));
    }

    #[test]
    fn scalar_solve_converges_in_one_step() {
        let p = scalar_problem(3.0);
        let (w, trace) = solve(&p, Some(&[0.0]), &SolverConfig::default()).unwrap();
        assert_eq!(w.0, vec![3.0]);
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].alpha, 1.0);
        assert_eq!(trace.termination, Termination::GradTol);
        assert_eq!(trace.final_objective, 0.0);
    }

    #[test]
    fn exact_start_terminates_immediately() {
        let p = generate(&GenConfig::new(
            Dims { n_atoms: 10, n_voxels: 30, n_fibers: 20, n_dirs: 8, n_coeffs: 300 },
            4,
        ))
        .unwrap();
        let w_true = p.w_true.clone().unwrap();
        let config = SolverConfig { grad_tol: 1e-10, ..SolverConfig::default() };
        let (w, trace) = solve(&p, Some(&w_true), &config).unwrap();
        assert_eq!(w, w_true);
        assert!(trace.records.is_empty());
        assert_eq!(trace.termination, Termination::GradTol);
    }

    #[test]
    fn negative_start_is_projected() {
        let p = scalar_problem(1.0);
        let config = SolverConfig { max_iters: 1, ..SolverConfig::default() };
        let (_, trace) = solve(&p, Some(&[-5.0]), &config).unwrap();
        // starts from 0, so the first objective is 0.5 * 1^2
        assert_eq!(trace.initial_objective, 0.5);
    }

    #[test]
    fn max_iters_bounds_records() {
        let p = generate(&GenConfig::new(
            Dims { n_atoms: 5, n_voxels: 10, n_fibers: 8, n_dirs: 4, n_coeffs: 60 },
            9,
        ))
        .unwrap();
        let config = SolverConfig { max_iters: 3, grad_tol: 0.0, ..SolverConfig::default() };
        let (w, trace) = solve(&p, None, &config).unwrap();
        assert!(trace.records.len() <= 3);
        assert!(w.iter().all(|&x| x >= 0.0));
    }
}
