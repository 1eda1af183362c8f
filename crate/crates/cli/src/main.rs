use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use life_core::engine::{build_plan, dsc_parallel, wc_parallel};
use life_core::io::{export_report, export_scaling, export_trace, export_weights, load, save, BenchRecord, ScalingRow};
use life_core::restructure::autotune;
use life_core::verify::{run_suite, Fault};
use life_core::{
    generate, precompute_offsets, solve, sort_by, Dims, Error, GenConfig, Key, PartitionStrategy, Problem,
    SolverConfig, SpmvOp,
};

#[derive(Parser)]
#[command(name = "life", version, about = "Sparse-Tucker SpMV kernels and NNLS solver for connectome evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic problem and write it as a container file.
    Gen(GenArgs),
    /// Time one SpMV kernel under a restructuring and partitioning.
    Spmv(SpmvArgs),
    /// Run the NNLS solver.
    Solve(SolveArgs),
    /// Pick the faster restructuring for one kernel.
    Tune(TuneArgs),
    /// Check every kernel against dense oracles on random instances.
    Verify(VerifyArgs),
    /// Solver wall time across thread counts.
    Bench(BenchArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    voxels: usize,
    #[arg(long, default_value_t = 1000)]
    fibers: usize,
    #[arg(long, default_value_t = 100)]
    atoms: usize,
    #[arg(long, default_value_t = 96)]
    dirs: usize,
    #[arg(long, default_value_t = 50_000)]
    coeffs: usize,
    /// Mean number of consecutive coefficients per fiber.
    #[arg(long, default_value_t = 4.0)]
    run_len: f64,
    /// Fraction of nonzero ground-truth weights.
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    /// Gaussian noise sigma added to the signal.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OpArg {
    Dsc,
    Wc,
}

impl From<OpArg> for SpmvOp {
    fn from(op: OpArg) -> Self {
        match op {
            OpArg::Dsc => SpmvOp::Dsc,
            OpArg::Wc => SpmvOp::Wc,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RestructureArg {
    None,
    Atom,
    Voxel,
    Fiber,
    Auto,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PartitionArg {
    Coeff,
    Atom,
    Voxel,
}

#[derive(clap::Args)]
struct SpmvArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    op: OpArg,
    #[arg(long, value_enum, default_value = "none")]
    restructure: RestructureArg,
    #[arg(long, value_enum, default_value = "coeff")]
    partition: PartitionArg,
    /// Snap chunks to voxel runs (DSC on voxel-sorted data only).
    #[arg(long)]
    sync_free: bool,
    #[arg(long, env = "LIFE_THREADS", default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SolveArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, env = "LIFE_THREADS", default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 1e-12)]
    grad_tol: f64,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out_weights: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TuneArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    op: OpArg,
    #[arg(long, env = "LIFE_THREADS", default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 3)]
    trials: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    WcSign,
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "small")]
    scale: ScaleArg,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    threads_list: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long)]
    report: PathBuf,
}

enum Failure {
    Verify,
    Input(String),
    Strategy(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verify => 1,
            Failure::Input(_) => 2,
            Failure::Strategy(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::StrategyRequiresSorted { .. } | Error::NotSorted(_) => Failure::Strategy(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Spmv(a) => cmd_spmv(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Verify => eprintln!("error: verification failed"),
                Failure::Input(m) | Failure::Strategy(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load_problem(path: &Path) -> Result<Problem, Failure> {
    load(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn check_threads(threads: usize) -> CmdResult {
    if threads == 0 {
        return Err(Failure::Input("--threads must be at least 1".into()));
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let config = GenConfig {
        dims: Dims {
            n_atoms: a.atoms,
            n_voxels: a.voxels,
            n_fibers: a.fibers,
            n_dirs: a.dirs,
            n_coeffs: a.coeffs,
        },
        mean_run_length: a.run_len,
        weight_density: a.density,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let problem = generate(&config)?;
    save(&problem, &a.out)?;
    let size = std::fs::metadata(&a.out).map_err(Error::from)?.len();
    let d = config.dims;
    println!(
        "atoms={} voxels={} fibers={} dirs={} coeffs={}",
        d.n_atoms, d.n_voxels, d.n_fibers, d.n_dirs, d.n_coeffs
    );
    println!("wrote {} ({size} bytes)", a.out.display());
    Ok(())
}

fn cmd_spmv(a: SpmvArgs) -> CmdResult {
    check_threads(a.threads)?;
    let op = SpmvOp::from(a.op);
    let problem = load_problem(&a.input)?;
    if op == SpmvOp::Wc && problem.y.is_none() {
        return Err(Failure::Input("WC needs a signal and the container has none".into()));
    }
    let key = match a.restructure {
        RestructureArg::None => None,
        RestructureArg::Atom => Some(Key::Atom),
        RestructureArg::Voxel => Some(Key::Voxel),
        RestructureArg::Fiber => Some(Key::Fiber),
        RestructureArg::Auto => {
            let choice = autotune(&problem, op, a.threads, 3)?;
            println!("auto restructure: {}", choice.key);
            Some(choice.key)
        }
    };
    if a.sync_free {
        if op != SpmvOp::Dsc {
            return Err(Failure::Strategy("--sync-free applies to DSC only".into()));
        }
        if key != Some(Key::Voxel) {
            return Err(Failure::Strategy("--sync-free requires voxel restructuring".into()));
        }
        if a.partition != PartitionArg::Coeff {
            return Err(Failure::Strategy("--sync-free uses coefficient partitioning".into()));
        }
    }
    let strategy = match a.partition {
        PartitionArg::Coeff if a.sync_free => PartitionStrategy::sync_free(),
        PartitionArg::Coeff => PartitionStrategy::coefficient(),
        PartitionArg::Atom => PartitionStrategy::by_runs(Key::Atom),
        PartitionArg::Voxel => PartitionStrategy::by_runs(Key::Voxel),
    };
    let required = match a.partition {
        PartitionArg::Atom => Some(Key::Atom),
        PartitionArg::Voxel => Some(Key::Voxel),
        PartitionArg::Coeff => None,
    };
    if let Some(req) = required {
        if key != Some(req) {
            return Err(Failure::Strategy(format!("--partition {req} requires {req} restructuring")));
        }
    }

    let tensor = match key {
        Some(k) => sort_by(&problem.tensor, k).0,
        None => problem.tensor.clone(),
    };
    let offsets = precompute_offsets(tensor)?;
    let plan = build_plan(offsets.tensor(), strategy, a.threads)?;
    let dims = problem.dims();
    let restructure = key.map_or("none".to_string(), |k| k.to_string());
    let mut rows = Vec::new();
    for run in 1..=a.repeat.max(1) {
        let stats = match op {
            SpmvOp::Dsc => {
                let w = problem.w_true.as_deref().map_or_else(|| vec![1.0; dims.n_fibers], <[f64]>::to_vec);
                let mut out = vec![0.0; dims.n_rows()];
                dsc_parallel(&offsets, &problem.dict, &w, &mut out, &plan)?
            }
            SpmvOp::Wc => {
                let mut out = vec![0.0; dims.n_fibers];
                wc_parallel(&offsets, &problem.dict, problem.signal()?, &mut out, &plan)?
            }
        };
        println!("run {run}: {:.6} s", stats.elapsed_secs());
        rows.push(BenchRecord {
            iteration: run,
            op: op.as_str().to_string(),
            restructure: restructure.clone(),
            partition: strategy.label(),
            threads: a.threads,
            elapsed_s: stats.elapsed_secs(),
            skipped: stats.skipped_coefficients,
        });
    }
    let mean = rows.iter().map(|r| r.elapsed_s).sum::<f64>() / rows.len() as f64;
    println!(
        "{} restructure={} partition={} threads={}: mean {mean:.6} s over {} runs",
        op.as_str(),
        restructure,
        strategy.label(),
        a.threads,
        rows.len()
    );
    if let Some(path) = &a.report {
        export_report(&rows, path)?;
    }
    Ok(())
}

fn cmd_solve(a: SolveArgs) -> CmdResult {
    check_threads(a.threads)?;
    let problem = load_problem(&a.input)?;
    let config = SolverConfig { max_iters: a.iters, grad_tol: a.grad_tol, threads: a.threads, ..SolverConfig::default() };
    let (w, trace) = solve(&problem, None, &config)?;
    println!(
        "iterations={} termination={:?} initial_objective={:e} final_objective={:e}",
        trace.records.len(),
        trace.termination,
        trace.initial_objective,
        trace.final_objective
    );
    println!("zeros={} of {}", w.iter().filter(|&&x| x == 0.0).count(), w.len());
    if let Some(path) = &a.trace {
        export_trace(&trace, path)?;
    }
    if let Some(path) = &a.out_weights {
        export_weights(&w, path)?;
    }
    Ok(())
}

fn cmd_tune(a: TuneArgs) -> CmdResult {
    check_threads(a.threads)?;
    let problem = load_problem(&a.input)?;
    let choice = autotune(&problem, a.op.into(), a.threads, a.trials)?;
    for (key, secs) in &choice.measured_times {
        println!("{key}: mean {secs:.6} s");
    }
    println!("chosen: {}", choice.key);
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let ScaleArg::Small = a.scale;
    let fault = a.inject_fault.map(|f| match f {
        FaultArg::WcSign => Fault::WcSignFlip,
    });
    let report = run_suite(a.seeds, fault)?;
    println!("{:<24} {:>6} {:>6} {:>10}  status", "family", "pass", "fail", "worst");
    for f in &report.families {
        println!(
            "{:<24} {:>6} {:>6} {:>10.2e}  {}",
            f.name,
            f.passed,
            f.failed,
            f.worst,
            if f.ok() { "PASS" } else { "FAIL" }
        );
        if let Some(first) = &f.first_failure {
            println!("    first failure: {first}");
        }
    }
    if report.all_passed() {
        println!("all {} families passed over {} seeds", report.families.len(), report.seeds);
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    if a.threads_list.contains(&0) {
        return Err(Failure::Input("thread counts must be at least 1".into()));
    }
    let problem = load_problem(&a.input)?;
    let time = |threads: usize| -> Result<f64, Failure> {
        let config = SolverConfig { max_iters: a.iters, grad_tol: 0.0, threads, ..SolverConfig::default() };
        let start = Instant::now();
        solve(&problem, None, &config)?;
        Ok(start.elapsed().as_secs_f64())
    };
    let mut measured = Vec::new();
    for &threads in &a.threads_list {
        measured.push((threads, time(threads)?));
    }
    let baseline = match measured.iter().find(|(t, _)| *t == 1) {
        Some(&(_, secs)) => secs,
        None => time(1)?,
    };
    let rows: Vec<ScalingRow> = measured
        .iter()
        .map(|&(threads, elapsed_s)| ScalingRow {
            threads,
            iters: a.iters,
            elapsed_s,
            speedup_vs_1thread: baseline / elapsed_s,
        })
        .collect();
    for r in &rows {
        println!("threads={} iters={} elapsed={:.6} s speedup={:.2}", r.threads, r.iters, r.elapsed_s, r.speedup_vs_1thread);
    }
    export_scaling(&rows, &a.report)?;
    Ok(())
}
