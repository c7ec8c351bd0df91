//! End-to-end tests of the `axrx` binary: verb plumbing, exit codes,
//! config-file overrides, and byte-identical reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn axrx() -> Command {
    Command::new(env!("CARGO_BIN_EXE_axrx"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    axrx()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn axrx")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// One tiny dataset + linear checkpoint shared by the tests below.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("ds.bin");
    let model = dir.join("lin.bin");
    assert_ok(&run(
        &[
            "gen-data", "--n", "60", "--side", "8", "--labels", "2", "--seed", "5", "--out",
            "ds.bin",
        ],
        dir,
    ));
    assert_ok(&run(
        &[
            "train", "--data", "ds.bin", "--arch", "linear", "--epochs", "3", "--seed", "5",
            "--out", "lin.bin",
        ],
        dir,
    ));
    (data, model)
}

#[test]
fn attack_verb_writes_csv_and_json_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let args = [
        "attack",
        "--model",
        "lin.bin",
        "--data",
        "ds.bin",
        "--method",
        "pgd",
        "--epsilon",
        "0.1",
        "--iterations",
        "3",
        "--max-examples",
        "16",
        "--out-json",
        "report.json",
        "--out-csv",
        "report.csv",
    ];
    assert_ok(&run(&args, dir.path()));
    let json1 = fs::read(dir.path().join("report.json")).unwrap();
    let csv1 = fs::read(dir.path().join("report.csv")).unwrap();
    assert_ok(&run(&args, dir.path()));
    assert_eq!(json1, fs::read(dir.path().join("report.json")).unwrap());
    assert_eq!(csv1, fs::read(dir.path().join("report.csv")).unwrap());

    let text = String::from_utf8(csv1).unwrap();
    assert!(text.starts_with("experiment,source,target,method,epsilon,"));
    assert!(text.contains(",pgd,0.1,"));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"attack": {"method": "fgsm", "epsilon": 0.25}, "max_examples": 8}"#,
    )
    .unwrap();
    assert_ok(&run(
        &[
            "attack",
            "--model",
            "lin.bin",
            "--data",
            "ds.bin",
            "--epsilon",
            "0.9",
            "--out-csv",
            "out.csv",
            "--config",
            "cfg.json",
        ],
        dir.path(),
    ));
    let text = fs::read_to_string(dir.path().join("out.csv")).unwrap();
    assert!(text.contains(",fgsm,0.25,"), "config did not win: {text}");
}

#[test]
fn validation_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    // Missing checkpoint.
    let out = run(&["attack", "--model", "missing.bin", "--data", "ds.bin"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    // Malformed attack spec.
    let out = run(
        &[
            "attack", "--model", "lin.bin", "--data", "ds.bin", "--epsilon", "-1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    // Unknown flag (clap usage error).
    let out = run(&["attack", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    // Malformed config file.
    fs::write(dir.path().join("bad.json"), "{not json").unwrap();
    let out = run(
        &[
            "attack", "--model", "lin.bin", "--data", "ds.bin", "--config", "bad.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    // Config key that matches no flag.
    fs::write(dir.path().join("typo.json"), r#"{"epsilonn": 0.1}"#).unwrap();
    let out = run(
        &[
            "attack", "--model", "lin.bin", "--data", "ds.bin", "--config", "typo.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn worker_cap_is_validated_and_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let base = [
        "attack",
        "--model",
        "lin.bin",
        "--data",
        "ds.bin",
        "--max-examples",
        "12",
        "--out-csv",
        "w.csv",
    ];
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let out = axrx()
            .args(base)
            .env("AXRX_WORKERS", workers)
            .current_dir(dir.path())
            .output()
            .unwrap();
        assert_ok(&out);
        outputs.push(fs::read(dir.path().join("w.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let out = axrx()
        .args(["attack", "--model", "lin.bin", "--data", "ds.bin"])
        .env("AXRX_WORKERS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_and_matrix_verbs_produce_expected_grids() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    assert_ok(&run(
        &[
            "train", "--data", "ds.bin", "--arch", "mlp", "--epochs", "2", "--seed", "5",
            "--out", "mlp.bin",
        ],
        dir.path(),
    ));
    assert_ok(&run(
        &[
            "matrix",
            "--models",
            "lin.bin",
            "mlp.bin",
            "--data",
            "ds.bin",
            "--methods",
            "fgsm,pgd",
            "--epsilon",
            "0.1",
            "--iterations",
            "2",
            "--max-examples",
            "10",
            "--out-csv",
            "matrix.csv",
        ],
        dir.path(),
    ));
    let matrix = fs::read_to_string(dir.path().join("matrix.csv")).unwrap();
    // 2 sources x 2 methods x 2 targets + header.
    assert_eq!(matrix.lines().count(), 9);

    assert_ok(&run(
        &[
            "sweep",
            "eps",
            "--model",
            "lin.bin",
            "--data",
            "ds.bin",
            "--methods",
            "fgsm",
            "--grid",
            "0.0,0.1",
            "--max-examples",
            "10",
            "--out-csv",
            "eps.csv",
        ],
        dir.path(),
    ));
    let eps = fs::read_to_string(dir.path().join("eps.csv")).unwrap();
    assert_eq!(eps.lines().count(), 3);
    // The eps=0 row must report zero perturbation distance.
    assert!(eps.lines().nth(1).unwrap().ends_with(",0"));
}

#[test]
fn ensemble_verb_requires_two_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = run(
        &[
            "ensemble", "--models", "lin.bin", "--data", "ds.bin", "--out-csv", "e.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
