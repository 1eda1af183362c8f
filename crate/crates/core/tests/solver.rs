use life_core::solver::{
    default_start, gradient, project_gradient, project_nonneg, solve_observed, step_size,
    ConnectomeOperator, Termination,
};
use life_core::verify::{dense_step_size, fd_gradient, rel_diff, small_instance};
use life_core::{generate, materialize_dense, solve, Dims, GenConfig, SolverConfig, SpmvSetup};
use proptest::prelude::*;

fn noiseless(seed: u64) -> life_core::Problem {
    let mut c = GenConfig::new(Dims { n_atoms: 10, n_voxels: 30, n_fibers: 20, n_dirs: 8, n_coeffs: 300 }, seed);
    c.mean_run_length = 10.0;
    generate(&c).unwrap()
}

#[test]
fn gradient_matches_central_differences() {
    for seed in 0..10 {
        let inst = small_instance(300 + seed).unwrap();
        let p = &inst.problem;
        let y = p.y.as_ref().unwrap();
        let m = materialize_dense(&p.tensor, &p.dict).unwrap();
        let mut op = ConnectomeOperator::sequential(&p.tensor, &p.dict).unwrap();
        let g = gradient(&mut op, y, &inst.w).unwrap().grad;
        let fd = fd_gradient(&m, y, &inst.w, 1e-3);
        let scale = fd.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(scale), "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn step_sizes_match_dense_for_both_parities() {
    for seed in 0..10 {
        let inst = small_instance(400 + seed).unwrap();
        let p = &inst.problem;
        let m = materialize_dense(&p.tensor, &p.dict).unwrap();
        let mut op = ConnectomeOperator::sequential(&p.tensor, &p.dict).unwrap();
        let g = gradient(&mut op, p.y.as_ref().unwrap(), &inst.w).unwrap().grad;
        let gt = project_gradient(&g, &inst.w);
        for iter in 1..=4 {
            let dense = dense_step_size(&m, iter, &gt);
            match step_size(iter, &gt, &mut op) {
                Ok(a) => assert!(rel_diff(a, dense) <= 1e-10, "seed {seed} iter {iter}"),
                Err(_) => assert!(!(dense.is_finite() && dense > 0.0), "seed {seed} iter {iter}"),
            }
        }
    }
}

#[test]
fn noiseless_problems_converge_with_nonnegative_iterates() {
    for seed in 0..5 {
        let p = noiseless(seed);
        let y = p.y.as_ref().unwrap();
        let config = SolverConfig::default();
        let mut op = ConnectomeOperator::new(&p.tensor, &p.dict, config.dsc, config.wc, 1).unwrap();
        let w0 = default_start(&mut op, y).unwrap();
        let mut negative = false;
        let (w, trace) = solve_observed(&mut op, y, &w0, &config, |_, w| {
            negative |= w.iter().any(|&x| x < 0.0);
        })
        .unwrap();
        assert!(!negative, "seed {seed}");
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!(trace.final_objective <= 1e-6 * trace.initial_objective, "seed {seed}");
    }
}

#[test]
fn call_counts_follow_parity() {
    let p = noiseless(11);
    let config = SolverConfig { max_iters: 20, grad_tol: 0.0, ..SolverConfig::default() };
    let (_, trace) = solve(&p, None, &config).unwrap();
    for r in &trace.records {
        let expected = if r.iteration % 2 == 1 { (2, 1) } else { (2, 2) };
        assert_eq!((r.dsc_calls, r.wc_calls), expected, "iteration {}", r.iteration);
    }
}

#[test]
fn configurations_agree() {
    let p = noiseless(3);
    let base = SolverConfig { max_iters: 30, grad_tol: 0.0, ..SolverConfig::default() };
    let (w_ref, _) = solve(&p, None, &SolverConfig { dsc: SpmvSetup::unsorted(), wc: SpmvSetup::unsorted(), ..base.clone() })
        .unwrap();
    for threads in [1, 2, 4] {
        let (w, _) = solve(&p, None, &SolverConfig { threads, ..base.clone() }).unwrap();
        let scale = w_ref.iter().fold(1.0f64, |a, x| a.max(x.abs()));
        for (a, b) in w.iter().zip(w_ref.iter()) {
            assert!((a - b).abs() <= 1e-8 * scale, "{threads} threads: {a} vs {b}");
        }
    }
}

#[test]
fn iteration_limit_is_respected() {
    let p = noiseless(5);
    let config = SolverConfig { max_iters: 7, grad_tol: 0.0, ..SolverConfig::default() };
    let (_, trace) = solve(&p, None, &config).unwrap();
    assert_eq!(trace.records.len(), 7);
    assert_eq!(trace.termination, Termination::MaxIters);
}

proptest! {
    #[test]
    fn projection_is_nonnegative_and_idempotent(v in proptest::collection::vec(-5.0f64..5.0, 0..50)) {
        let p = project_nonneg(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert_eq!(project_nonneg(&p), p.clone());
        for (a, b) in v.iter().zip(&p) {
            if *a > 0.0 { prop_assert_eq!(a, b); }
        }
    }

    #[test]
    fn projected_gradient_only_masks_blocked_directions(
        pairs in proptest::collection::vec((prop_oneof![Just(0.0), 0.0f64..3.0], -3.0f64..3.0), 0..50),
    ) {
        let w: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let g: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let gt = project_gradient(&g, &w);
        for i in 0..w.len() {
            if w[i] == 0.0 && g[i] > 0.0 {
                prop_assert_eq!(gt[i], 0.0);
            } else {
                prop_assert_eq!(gt[i], g[i]);
            }
        }
    }
}
