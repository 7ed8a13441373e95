use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rmdn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmdn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RMDN_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, name: &str, len: &str, seed: &str) {
    let o = rmdn(
        &[
            "simulate", "garch", "--alpha0", "0.05", "--alpha1", "0.1", "--beta1", "0.85", "-T",
            len, "--seed", seed, "--out", name,
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn simulate_writes_requested_length() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "a.csv", "1000", "7");
    let text = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "return");
    assert_eq!(lines.len(), 1001);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "a.csv", "300", "7");
    simulate(dir.path(), "b.csv", "300", "7");
    simulate(dir.path(), "c.csv", "300", "8");
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
}

#[test]
fn simulate_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmdn(
        &["simulate", "mixture", "-T", "50", "--seed", "1", "--out", "m.csv"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(text.lines().count(), 51);
}

#[test]
fn nonstationary_spec_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmdn(
        &[
            "simulate", "garch", "--alpha1", "0.3", "--beta1", "0.7", "-T", "10", "--out", "x.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonstationary"), "{}", stderr(&o));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn fit_garch_prints_five_estimates() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "d.csv", "500", "3");
    let o = rmdn(&["fit", "--model", "garch", "d.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for key in ["a0=", "a1=", "alpha0=", "alpha1=", "beta1=", "loglik="] {
        assert!(out.contains(key), "{out}");
    }
    assert!(dir.path().join("d.garch.json").exists());
}

#[test]
fn fit_rmdn_schedules() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "d.csv", "200", "3");
    let o = rmdn(
        &[
            "fit", "--model", "rmdn", "--pretrain-epochs", "20", "--epochs", "300", "d.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epochs=320/320"), "{}", stdout(&o));
    assert!(stdout(&o).contains("status=Converged"));

    let o = rmdn(
        &[
            "fit", "--model", "rmdn", "--pretrain-epochs", "0", "--epochs", "30", "--out",
            "plain.json", "d.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epochs=30/30"));
    let model = fs::read_to_string(dir.path().join("plain.json")).unwrap();
    assert!(model.contains("\"version\""));
}

#[test]
fn divergent_fit_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "d.csv", "200", "3");
    let o = rmdn(
        &[
            "fit", "--model", "rmdn", "--pretrain-epochs", "0", "--epochs", "40", "--lr", "1e6",
            "d.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("status="), "{}", stdout(&o));
}

#[test]
fn unreadable_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmdn(&["fit", "--model", "garch", "nope.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("bad.csv"), "return\n0.1\nabc\n").unwrap();
    let o = rmdn(&["fit", "--model", "garch", "bad.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmdn(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).starts_with("PASS"));

    let o = rmdn(&["gradcheck", "--corrupt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("max_rel_dev"));

    let o = rmdn(&["gradcheck", "--tol", "1e-12"], dir.path());
    let code = o.status.code();
    assert!(code == Some(0) || code == Some(1));
    assert!(format!("{}{}", stdout(&o), stderr(&o)).contains("max_rel_dev"));
}

#[test]
fn benchmark_without_input_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmdn(&["benchmark", "--seeds", "2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn benchmark_reports_identical_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "s1.csv", "150", "1");
    simulate(dir.path(), "s2.csv", "150", "2");
    let run = |workers: &str, out: &str| {
        let o = rmdn(
            &[
                "benchmark", "--seeds", "3", "--meta-seed", "42", "--epochs", "15",
                "--pretrain-epochs", "5", "--workers", workers, "--out-dir", out, "s1.csv",
                "s2.csv",
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        o
    };
    let o = run("1", "w1");
    run("4", "w4");
    for f in ["report.txt", "report.csv"] {
        let a = fs::read(dir.path().join("w1").join(f)).unwrap();
        let b = fs::read(dir.path().join("w4").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let text = stdout(&o);
    assert!(text.contains("Not Converged"));
    assert!(text.contains("Average log-likelihood"));
    let csv = fs::read_to_string(dir.path().join("w1/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn benchmark_workers_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rmdn"))
        .args([
            "benchmark", "--simulate", "garch", "--sim-len", "100", "--seeds", "1", "--epochs",
            "3", "--pretrain-epochs", "1", "--out-dir", "r",
        ])
        .current_dir(dir.path())
        .env("RMDN_WORKERS", "0")
        .output()
        .unwrap();
    // zero workers from the environment is rejected like the flag
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmdn(&["benchmark", "--help"], dir.path());
    let help = stdout(&o);
    assert!(help.contains("[default: 20]"), "{help}");
    assert!(help.contains("[default: 300]"));
    assert!(help.contains("[default: 0.01]"));
    assert!(help.contains("0-50000"));
    let o = rmdn(&["fit", "--help"], dir.path());
    let help = stdout(&o);
    assert!(help.contains("[default: 20]"));
    assert!(help.contains("[default: 300]"));
    let o = rmdn(&["gradcheck", "--help"], dir.path());
    let help = stdout(&o);
    assert!(help.contains("[default: 0.00001]") || help.contains("[default: 1e-5]"), "{help}");
    assert!(!help.contains("corrupt"));
}
