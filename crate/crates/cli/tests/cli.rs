use std::path::Path;
use std::process::{Command, Output};

fn life(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_life"))
        .args(args)
        .env_remove("LIFE_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_small(dir: &Path, name: &str, seed: &str) -> String {
    let path = dir.join(name).to_string_lossy().into_owned();
    let o = life(&[
        "gen", "--voxels", "60", "--fibers", "40", "--atoms", "12", "--dirs", "8", "--coeffs", "600", "--seed", seed,
        "--out", &path,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_defaults_are_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.life");
    let o = life(&["gen", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("dirs=96"));
    let p = life_core::io::load(&out).unwrap();
    assert_eq!(p.dims().n_dirs, 96);
}

#[test]
fn gen_rejects_zero_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.life");
    assert_eq!(life(&["gen", "--dirs", "0", "--out", out.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_small(dir.path(), "a.life", "9");
    let b = gen_small(dir.path(), "b.life", "9");
    let c = gen_small(dir.path(), "c.life", "10");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn unknown_flag_is_rejected() {
    assert_eq!(life(&["gen", "--bogus", "1"]).status.code(), Some(2));
}

#[test]
fn spmv_strategy_combinations() {
    let dir = tempfile::tempdir().unwrap();
    let p = gen_small(dir.path(), "p.life", "1");
    let run = |extra: &[&str]| {
        let mut args = vec!["spmv", "--in", &p, "--threads", "3"];
        args.extend_from_slice(extra);
        life(&args).status.code()
    };
    assert_eq!(run(&["--op", "dsc", "--restructure", "voxel", "--sync-free"]), Some(0));
    assert_eq!(run(&["--op", "dsc", "--restructure", "atom", "--sync-free"]), Some(3));
    assert_eq!(run(&["--op", "dsc", "--sync-free"]), Some(3));
    assert_eq!(run(&["--op", "wc", "--restructure", "voxel", "--sync-free"]), Some(3));
    assert_eq!(run(&["--op", "wc", "--restructure", "atom", "--partition", "voxel"]), Some(3));
    assert_eq!(run(&["--op", "wc", "--restructure", "atom", "--partition", "atom"]), Some(0));
    assert_eq!(run(&["--op", "dsc", "--restructure", "fiber"]), Some(0));
    assert_eq!(run(&["--op", "wc", "--restructure", "auto"]), Some(0));
}

#[test]
fn spmv_report_has_one_row_per_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let p = gen_small(dir.path(), "p.life", "2");
    let report = dir.path().join("r.csv");
    let o = life(&[
        "spmv", "--in", &p, "--op", "dsc", "--restructure", "voxel", "--sync-free", "--threads", "2", "--repeat", "3",
        "--report", report.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("mean"));
    let rows = csv_rows(&report);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0], ["iteration", "op", "restructure", "partition", "threads", "elapsed_s", "skipped"]);
    assert!(rows[1..].iter().all(|r| r[3] == "coeff+syncfree" && r[4] == "2"));
}

#[test]
fn threads_fall_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = gen_small(dir.path(), "p.life", "3");
    let report = dir.path().join("r.csv");
    let args = ["spmv", "--in", &p, "--op", "dsc", "--report", report.to_str().unwrap()];
    let o = Command::new(env!("CARGO_BIN_EXE_life")).args(args).env("LIFE_THREADS", "5").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(csv_rows(&report)[1][4], "5");
    let o = Command::new(env!("CARGO_BIN_EXE_life"))
        .args(args)
        .args(["--threads", "2"])
        .env("LIFE_THREADS", "5")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(csv_rows(&report)[1][4], "2");
}

#[test]
fn solve_writes_trace_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let p = gen_small(dir.path(), "p.life", "4");
    let trace = dir.path().join("t.csv");
    let weights = dir.path().join("w.txt");
    let o = life(&[
        "solve", "--in", &p, "--iters", "1", "--trace", trace.to_str().unwrap(), "--out-weights",
        weights.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let rows = csv_rows(&trace);
    assert_eq!(rows[0], ["iteration", "objective", "alpha", "grad_norm", "zeros", "dsc_s", "wc_s"]);
    assert_eq!(rows.len(), 2);
    let w: Vec<f64> = std::fs::read_to_string(&weights).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(w.len(), 40);
    assert!(w.iter().all(|&x| x >= 0.0));
}

#[test]
fn solve_reduces_objective_on_noiseless_instance() {
    let dir = tempfile::tempdir().unwrap();
    let p = gen_small(dir.path(), "p.life", "5");
    let trace = dir.path().join("t.csv");
    let o = life(&["solve", "--in", &p, "--iters", "100", "--trace", trace.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let rows = csv_rows(&trace);
    let first: f64 = rows[1][1].parse().unwrap();
    let last: f64 = rows.last().unwrap()[1].parse().unwrap();
    assert!(last < first);
}

#[test]
fn solve_missing_file_exits_2() {
    assert_eq!(life(&["solve", "--in", "/nonexistent/p.life"]).status.code(), Some(2));
}

#[test]
fn tune_picks_argmin_of_printed_means() {
    let dir = tempfile::tempdir().unwrap();
    let p = gen_small(dir.path(), "p.life", "6");
    for op in ["dsc", "wc"] {
        let o = life(&["tune", "--in", &p, "--op", op, "--trials", "1"]);
        assert_eq!(o.status.code(), Some(0));
        let text = stdout(&o);
        let mut means = Vec::new();
        let mut chosen = None;
        for line in text.lines() {
            if let Some(k) = line.strip_prefix("chosen: ") {
                chosen = Some(k.to_string());
            } else if let Some((k, rest)) = line.split_once(": mean ") {
                means.push((k.to_string(), rest.trim_end_matches(" s").parse::<f64>().unwrap()));
            }
        }
        let chosen = chosen.unwrap();
        assert!(chosen == "atom" || chosen == "voxel");
        let best = means.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
        let chosen_mean = means.iter().find(|m| m.0 == chosen).unwrap().1;
        // printed means are rounded to microseconds
        assert!(chosen_mean <= best + 1e-6);
    }
}

#[test]
fn verify_passes_and_detects_injected_fault() {
    let ok = life(&["verify", "--seeds", "5"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).lines().filter(|l| l.ends_with("PASS")).count() >= 5);
    let bad = life(&["verify", "--seeds", "5", "--inject-fault", "wc-sign"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn bench_report_columns() {
    let dir = tempfile::tempdir().unwrap();
    let p = gen_small(dir.path(), "p.life", "7");
    let report = dir.path().join("b.csv");
    let o = life(&["bench", "--in", &p, "--threads-list", "1", "--iters", "3", "--report", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let rows = csv_rows(&report);
    assert_eq!(rows[0], ["threads", "iters", "elapsed_s", "speedup_vs_1thread"]);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][3].parse::<f64>().unwrap(), 1.0);

    let o = life(&["bench", "--in", &p, "--threads-list", "2,4", "--iters", "3", "--report", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let rows = csv_rows(&report);
    assert_eq!(rows.iter().skip(1).map(|r| r[0].as_str()).collect::<Vec<_>>(), ["2", "4"]);
}
