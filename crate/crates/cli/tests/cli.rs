//! End-to-end checks of the `vreg` binary: exit codes, artifact layout,
//! and the generate/partition/run pipeline.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vreg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vreg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn pipeline_generate_partition_run_compare() {
    let dir = tempfile::tempdir().unwrap();
    let out = vreg(
        &[
            "generate",
            "--nodes",
            "40",
            "--max-branching",
            "3",
            "--seed",
            "5",
            "--out",
            "feeder.txt",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("feeder.txt").exists());

    let out = vreg(
        &[
            "partition",
            "--feeder",
            "feeder.txt",
            "--k",
            "3",
            "--out",
            "part.txt",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("3 subtrees"));

    let out = vreg(
        &[
            "run",
            "--feeder",
            "feeder.txt",
            "--partition",
            "part.txt",
            "--solver",
            "both",
            "--cp",
            "0.05",
            "--cq",
            "0.05",
            "--phi",
            "0.05",
            "--sigma",
            "1e-7",
            "--max-iter",
            "200000",
            "--out-dir",
            "out",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for artifact in [
        "out/central.trace.csv",
        "out/hierarchical.trace.csv",
        "out/messages.csv",
        "out/voltages.csv",
        "out/report.txt",
        "out/partition.txt",
        "out/feeder.txt",
    ] {
        assert!(dir.path().join(artifact).exists(), "missing {artifact}");
    }

    let out = vreg(
        &[
            "compare",
            "--feeder",
            "feeder.txt",
            "--auto-k",
            "3",
            "--iters",
            "50",
            "--cp",
            "0.05",
            "--cq",
            "0.05",
            "--phi",
            "0.05",
            "--out-dir",
            "cmp",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("max relative deviation"));
}

#[test]
fn certify_prints_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let out = vreg(
        &["generate", "--nodes", "10", "--seed", "2", "--out", "f.txt"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = vreg(
        &["certify", "--feeder", "f.txt", "--phi", "0.02"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("monotonicity_m"));
    assert!(text.contains("step_bound"));
}

#[test]
fn malformed_feeder_exits_2_and_names_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.txt"),
        "[feeder]\nv0 1.0\n\n[nodes]\n1 -0.01 oops\n",
    )
    .unwrap();
    let out = vreg(
        &["run", "--feeder", "bad.txt", "--out-dir", "out"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 5"), "stderr: {}", stderr(&out));
}

#[test]
fn usage_error_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = vreg(&["run", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = vreg(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // stiff two-device feeder; far beyond the certified bound the stiff
    // coordinate flips between box corners and the detector fires
    fs::write(
        dir.path().join("stiff.txt"),
        "[feeder]\nv0 1.0\n\n[nodes]\n1 0 0\n2 0 0\n\n[lines]\n0 1 0.02 0.04\n1 2 0.03 0.05\n\n\
         [devices]\n1 0.9 0.9 0 0 -5 5 -5 5\n2 0.1 0.1 0 0 -5 5 -5 5\n\n\
         [bounds]\ndefault 1.02 1.2\n",
    )
    .unwrap();
    let out = vreg(
        &[
            "run",
            "--feeder",
            "stiff.txt",
            "--phi",
            "0.2",
            "--epsilon",
            "1.23",
            "--max-iter",
            "10000",
            "--out-dir",
            "out",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("divergence"));
}

#[test]
fn preset_runs_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = vreg(
        &[
            "run",
            "--preset",
            "undervoltage-chain-20",
            "--out-dir",
            "out",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("central: converged true"), "stdout: {text}");
}

#[test]
fn preset_keeps_its_own_solver_choice() {
    // the equivalence preset runs both drivers; flags the user did not
    // pass must not override what the preset configured
    let dir = tempfile::tempdir().unwrap();
    let out = vreg(
        &["run", "--preset", "equivalence-60x3", "--out-dir", "out"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("hierarchical: converged"), "stdout: {text}");
    assert!(text.contains("max_iterate_deviation"), "stdout: {text}");
    assert!(dir.path().join("out/hierarchical.trace.csv").exists());
}
