//! Oracle suite over random small instances, shared by the `verify` CLI
//! subcommand and the test suites.
//!
//! Every check compares kernel output against an independent route: the dense
//! materialization of `M`, the sequential kernel, finite differences, or exact
//! structural properties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{generate, GenConfig, Problem};
use crate::engine::{
    build_plan, dsc_parallel, dsc_sequential, dsc_sequential_opts, wc_sequential, PartitionStrategy,
};
use crate::error::Result;
use crate::restructure::{detect_runs, sort_by};
use crate::solver::{gradient, project_gradient, step_size, ConnectomeOperator};
use crate::tensor::{materialize_dense, precompute_offsets, DenseM, Dims, Key, OffsetPhiTensor, PhiTensor};

/// Relative difference `|a - b| / max(|a|, |b|)`, zero when `a == b`.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Largest per-element [`rel_diff`]; `inf` on length mismatch.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| rel_diff(*x, *y)).fold(0.0, f64::max)
}

pub fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A random small problem plus random input vectors for both kernels.
#[derive(Debug, Clone)]
pub struct SmallInstance {
    pub problem: Problem,
    /// Nonnegative weights, about a third exactly zero.
    pub w: Vec<f64>,
    /// Arbitrary-sign signal.
    pub y: Vec<f64>,
}

/// Instance with `Nv <= 50`, `Nf <= 40`, `Na <= 30`, `Nd in {1, 8, 16}`, `Nc <= 500`.
pub fn small_instance(seed: u64) -> Result<SmallInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05EE_D0F0_AC1E);
    let n_voxels = rng.gen_range(1..=50);
    let n_fibers = rng.gen_range(1..=40);
    let n_atoms = rng.gen_range(1..=30);
    let n_dirs = [1, 8, 16][rng.gen_range(0..3)];
    let max_nc = 500.min(n_atoms * n_voxels * n_fibers);
    let n_coeffs = rng.gen_range(1..=max_nc);
    let dims = Dims { n_atoms, n_voxels, n_fibers, n_dirs, n_coeffs };
    let config = GenConfig {
        dims,
        mean_run_length: rng.gen_range(1.0..=(n_coeffs as f64).min(8.0)),
        weight_density: rng.gen_range(0.2..=1.0),
        noise_sigma: 0.05,
        seed,
    };
    let problem = generate(&config)?;
    let w = (0..n_fibers)
        .map(|_| if rng.gen_bool(1.0 / 3.0) { 0.0 } else { rng.gen_range(0.0..2.0) })
        .collect();
    let y = (0..dims.n_rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(SmallInstance { problem, w, y })
}

/// Fault injected into the suite's own kernel calls, to prove it can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negate every WC result.
    WcSignFlip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyResult {
    pub name: &'static str,
    pub passed: usize,
    pub failed: usize,
    /// Worst observed error metric for the family (relative unless noted).
    pub worst: f64,
    pub first_failure: Option<String>,
}

impl FamilyResult {
    fn new(name: &'static str) -> Self {
        FamilyResult { name, passed: 0, failed: 0, worst: 0.0, first_failure: None }
    }

    fn record(&mut self, seed: u64, ok: bool, metric: f64, detail: impl FnOnce() -> String) {
        self.worst = self.worst.max(metric);
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(format!("seed {seed}: {}", detail()));
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub seeds: usize,
    pub families: Vec<FamilyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.families.iter().all(FamilyResult::ok)
    }
}

pub const ORACLE_TOL: f64 = 1e-10;
pub const REORDER_TOL: f64 = 1e-12;
pub const FD_TOL: f64 = 1e-5;
pub const STEP_TOL: f64 = 1e-10;

struct Kernels {
    fault: Option<Fault>,
}

impl Kernels {
    fn dsc(&self, t: &OffsetPhiTensor, p: &Problem, w: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; t.dims().n_rows()];
        dsc_sequential(t, &p.dict, w, &mut y)?;
        Ok(y)
    }

    fn wc(&self, t: &OffsetPhiTensor, p: &Problem, y: &[f64]) -> Result<Vec<f64>> {
        let mut w = vec![0.0; t.dims().n_fibers];
        wc_sequential(t, &p.dict, y, &mut w)?;
        if self.fault == Some(Fault::WcSignFlip) {
            w.iter_mut().for_each(|x| *x = -*x);
        }
        Ok(w)
    }
}

/// Central finite differences of `0.5 * ||M w - y||^2` on the dense matrix.
pub fn fd_gradient(m: &DenseM, y: &[f64], w: &[f64], h: f64) -> Vec<f64> {
    let objective = |w: &[f64]| {
        let r = m.mul_vec(w);
        0.5 * r.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };
    (0..w.len())
        .map(|f| {
            let mut plus = w.to_vec();
            let mut minus = w.to_vec();
            plus[f] += h;
            minus[f] -= h;
            (objective(&plus) - objective(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Step size evaluated on the dense matrix for 1-based `iter`.
pub fn dense_step_size(m: &DenseM, iter: usize, g: &[f64]) -> f64 {
    let mg = m.mul_vec(g);
    if iter % 2 == 1 {
        dot(g, g) / dot(&mg, &mg)
    } else {
        let mtmg = m.mul_transpose_vec(&mg);
        dot(&mg, &mg) / dot(&mtmg, &mtmg)
    }
}

/// Checks run-table invariants for a tensor sorted by `key`; returns a
/// description of the first violation.
pub fn check_runs(sorted: &PhiTensor, key: Key) -> std::result::Result<(), String> {
    let runs = detect_runs(sorted, key).map_err(|e| e.to_string())?;
    let keys = sorted.keys(key);
    if runs.boundaries.first() != Some(&0) || runs.boundaries.last() != Some(&keys.len()) {
        return Err("run table does not cover [0, Nc)".into());
    }
    if runs.boundaries.len() != runs.key_values.len() + 1 && !keys.is_empty() {
        return Err("boundary / key count mismatch".into());
    }
    for (i, r) in runs.runs().enumerate() {
        if r.is_empty() {
            return Err(format!("run {i} is empty"));
        }
        if keys[r.clone()].iter().any(|&k| k != runs.key_values[i]) {
            return Err(format!("run {i} is not constant"));
        }
    }
    if runs.key_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err("run keys are not strictly increasing".into());
    }
    Ok(())
}

/// Runs every property family over seeds `0..seeds`.
pub fn run_suite(seeds: u64, fault: Option<Fault>) -> Result<VerifyReport> {
    let k = Kernels { fault };
    let mut dense_eq = FamilyResult::new("dense-equivalence");
    let mut adjoint = FamilyResult::new("adjointness");
    let mut perm = FamilyResult::new("permutation-invariance");
    let mut plans = FamilyResult::new("plan-legality");
    let mut zero_skip = FamilyResult::new("zero-skip");
    let mut grad = FamilyResult::new("gradient-fd");
    let mut steps = FamilyResult::new("step-size-dense");

    for seed in 0..seeds {
        let inst = small_instance(seed)?;
        let p = &inst.problem;
        let m = materialize_dense(&p.tensor, &p.dict)?;
        let base = precompute_offsets(p.tensor.clone())?;

        // dense equivalence
        let mw = k.dsc(&base, p, &inst.w)?;
        let mty = k.wc(&base, p, &inst.y)?;
        let e = max_rel_diff(&mw, &m.mul_vec(&inst.w)).max(max_rel_diff(&mty, &m.mul_transpose_vec(&inst.y)));
        dense_eq.record(seed, e <= ORACLE_TOL, e, || format!("max rel diff {e:e}"));

        // adjointness
        let (lhs, rhs) = (dot(&mw, &inst.y), dot(&inst.w, &mty));
        let e = rel_diff(lhs, rhs);
        adjoint.record(seed, e <= ORACLE_TOL, e, || format!("<Mw,y> = {lhs}, <w,M^T y> = {rhs}"));

        // permutation invariance
        let mut worst = 0.0f64;
        let mut failure = None;
        for key in Key::ALL {
            let (sorted, pm) = sort_by(&p.tensor, key);
            if !pm.is_bijection() || pm.restore(&sorted).values != p.tensor.values {
                failure.get_or_insert(format!("{key}: permutation is not a bijection witness"));
            }
            if let Err(msg) = check_runs(&sorted, key) {
                failure.get_or_insert(format!("{key}: {msg}"));
            }
            let st = precompute_offsets(sorted)?;
            let e = max_rel_diff(&k.dsc(&st, p, &inst.w)?, &mw).max(max_rel_diff(&k.wc(&st, p, &inst.y)?, &mty));
            worst = worst.max(e);
            if e > REORDER_TOL {
                failure.get_or_insert(format!("{key}: max rel diff {e:e}"));
            }
        }
        perm.record(seed, failure.is_none(), worst, || failure.clone().unwrap_or_default());

        // sync-free plan legality
        let (vsorted, _) = sort_by(&p.tensor, Key::Voxel);
        let vt = precompute_offsets(vsorted)?;
        let mut failure = None;
        let mut seq = vec![0.0; p.dims().n_rows()];
        dsc_sequential(&vt, &p.dict, &inst.w, &mut seq)?;
        for threads in [2, 3, 4, 8] {
            let plan = build_plan(vt.tensor(), PartitionStrategy::sync_free(), threads)?;
            let nc = p.dims().n_coeffs;
            let tiles = plan.chunks().first().map(|c| c.start) == Some(0)
                && plan.chunks().last().map(|c| c.end) == Some(nc)
                && plan.chunks().windows(2).all(|w| w[0].end == w[1].start);
            if !tiles {
                failure.get_or_insert(format!("{threads} threads: chunks do not tile"));
            }
            if let Some(b) = plan.straddled_boundary(&vt.tensor().voxels) {
                failure.get_or_insert(format!("{threads} threads: run straddles {b}"));
            }
            let mut par = vec![0.0; p.dims().n_rows()];
            dsc_parallel(&vt, &p.dict, &inst.w, &mut par, &plan)?;
            if !bitwise_eq(&par, &seq) {
                failure.get_or_insert(format!("{threads} threads: parallel DSC differs"));
            }
        }
        plans.record(seed, failure.is_none(), 0.0, || failure.clone().unwrap_or_default());

        // zero-skip soundness
        let mut on = vec![0.0; p.dims().n_rows()];
        let mut off = vec![0.0; p.dims().n_rows()];
        let stats = dsc_sequential_opts(&base, &p.dict, &inst.w, &mut on, true)?;
        dsc_sequential_opts(&base, &p.dict, &inst.w, &mut off, false)?;
        let t = &p.tensor;
        let expected = (0..t.n_coeffs()).filter(|&i| inst.w[t.fibers[i] as usize] * t.values[i] == 0.0).count();
        let ok = on == off && stats.skipped_coefficients == expected;
        zero_skip.record(seed, ok, 0.0, || {
            format!("skipped {} vs expected {expected}", stats.skipped_coefficients)
        });

        // gradient vs finite differences, and step sizes vs dense evaluation
        let mut op = ConnectomeOperator::sequential(&p.tensor, &p.dict)?;
        let y = p.signal()?;
        let g = gradient(&mut op, y, &inst.w)?.grad;
        let fd = fd_gradient(&m, y, &inst.w, 1e-3);
        let scale = fd.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let e = g
            .iter()
            .zip(&fd)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() / b.abs().max(scale) })
            .fold(0.0, f64::max);
        grad.record(seed, e <= FD_TOL, e, || format!("max rel diff {e:e}"));

        let g_tilde = project_gradient(&g, &inst.w);
        let mut worst = 0.0f64;
        let mut failure = None;
        if g_tilde.iter().any(|&x| x != 0.0) {
            for iter in [1, 2] {
                match step_size(iter, &g_tilde, &mut op) {
                    Ok(alpha) => {
                        let e = rel_diff(alpha, dense_step_size(&m, iter, &g_tilde));
                        worst = worst.max(e);
                        if e > STEP_TOL {
                            failure.get_or_insert(format!("iteration {iter}: rel diff {e:e}"));
                        }
                    }
                    Err(err) => {
                        let dense = dense_step_size(&m, iter, &g_tilde);
                        if dense.is_finite() && dense > 0.0 {
                            failure.get_or_insert(format!("iteration {iter}: {err}, dense gives {dense}"));
                        }
                    }
                }
            }
        }
        steps.record(seed, failure.is_none(), worst, || failure.clone().unwrap_or_default());
    }

    Ok(VerifyReport {
        seeds: seeds as usize,
        families: vec![dense_eq, adjoint, perm, plans, zero_skip, grad, steps],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_diff_basics() {
        assert_eq!(rel_diff(0.0, 0.0), 0.0);
        assert_eq!(rel_diff(1.0, 1.0), 0.0);
        assert_eq!(rel_diff(2.0, 1.0), 0.5);
        assert_eq!(rel_diff(1.0, 0.0), 1.0);
        assert_eq!(max_rel_diff(&[1.0], &[]), f64::INFINITY);
    }

    #[test]
    fn suite_passes_on_a_few_seeds() {
        let report = run_suite(5, None).unwrap();
        for f in &report.families {
            assert!(f.ok(), "{}: {:?}", f.name, f.first_failure);
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let report = run_suite(3, Some(Fault::WcSignFlip)).unwrap();
        assert!(!report.all_passed());
        let failing: Vec<_> = report.families.iter().filter(|f| !f.ok()).map(|f| f.name).collect();
        assert!(failing.contains(&"dense-equivalence"));
    }
}
