//! End-to-end tests of the `same` binary: synth -> inspect -> train ->
//! probe -> transfer -> report on a small fixture, plus exit-code and
//! determinism contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_same"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn arg(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }
}

fn make_fixture(ws: &Workspace) -> String {
    let data = ws.arg("data/fixture-communities");
    run_ok(&[
        "synth",
        "--kind",
        "communities",
        "--graphs",
        "20",
        "--seed",
        "5",
        "--out",
        &data,
    ]);
    data
}

#[test]
fn inspect_reports_counts() {
    let ws = Workspace::new();
    let parser_fixture = ws.arg("data/fixture");
    run_ok(&["synth", "--kind", "parser-fixture", "--out", &parser_fixture]);
    let out = run_ok(&["inspect", "--dataset", &parser_fixture]);
    assert!(
        stdout(&out).contains("2 graphs, 2 graph classes"),
        "{}",
        stdout(&out)
    );
}

#[test]
fn inspect_missing_directory_is_format_error() {
    let out = bin()
        .args(["inspect", "--dataset", "/nonexistent/nowhere"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_strategy_is_usage_error() {
    let ws = Workspace::new();
    let data = make_fixture(&ws);
    let out = bin()
        .args([
            "train",
            "--dataset",
            &data,
            "--strategy",
            "not-a-strategy",
            "--out",
            &ws.arg("run"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dataset_root_env_var_is_honoured() {
    let ws = Workspace::new();
    make_fixture(&ws);
    let out = bin()
        .args(["inspect", "--dataset", "fixture-communities"])
        .env("SAME_DATA_ROOT", ws.path("data"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("20 graphs"));
}

fn strip_wall_time(curve_csv: &str) -> String {
    curve_csv
        .lines()
        .map(|line| {
            match line.rsplit_once(',') {
                Some((rest, _wall)) if !line.starts_with('#') => rest.to_string(),
                _ => line.to_string(),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn train_probe_report_round_trip_is_deterministic() {
    let ws = Workspace::new();
    let data = make_fixture(&ws);

    let train_args = |out: &str| {
        vec![
            "train".to_string(),
            "--dataset".into(),
            data.clone(),
            "--strategy".into(),
            "esame".into(),
            "--tasks".into(),
            "gc,nc".into(),
            "--folds".into(),
            "3".into(),
            "--fold".into(),
            "0".into(),
            "--seed".into(),
            "11".into(),
            "--epochs".into(),
            "3".into(),
            "--batch-size".into(),
            "10".into(),
            "--hidden-dim".into(),
            "12".into(),
            "--num-layers".into(),
            "2".into(),
            "--eval-every".into(),
            "1".into(),
            "--out".into(),
            ws.arg(out),
        ]
    };

    let args_a: Vec<String> = train_args("run_a");
    let refs: Vec<&str> = args_a.iter().map(String::as_str).collect();
    run_ok(&refs);
    let args_b: Vec<String> = train_args("run_b");
    let refs: Vec<&str> = args_b.iter().map(String::as_str).collect();
    run_ok(&refs);

    // checkpoints and curves (minus wall time) are byte-identical
    let ckpt_a = std::fs::read_to_string(ws.path("run_a/fold_0/checkpoint.txt")).unwrap();
    let ckpt_b = std::fs::read_to_string(ws.path("run_b/fold_0/checkpoint.txt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
    let curve_a = std::fs::read_to_string(ws.path("run_a/fold_0/curve.csv")).unwrap();
    let curve_b = std::fs::read_to_string(ws.path("run_b/fold_0/curve.csv")).unwrap();
    assert_eq!(strip_wall_time(&curve_a), strip_wall_time(&curve_b));

    // config snapshot exists (replayability is covered in the config test)
    assert!(ws.path("run_a/config_snapshot.cfg").is_file());

    // probe both runs: metric CSV bodies must be byte-identical
    for (run, probe_out) in [("run_a", "probe_a"), ("run_b", "probe_b")] {
        run_ok(&[
            "probe",
            "--dataset",
            &data,
            "--run",
            &ws.arg(run),
            "--probe",
            "linear",
            "--out",
            &ws.arg(probe_out),
        ]);
    }
    let metrics_a = std::fs::read_to_string(ws.path("probe_a/metrics.csv")).unwrap();
    let metrics_b = std::fs::read_to_string(ws.path("probe_b/metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b);
    assert!(metrics_a.starts_with("# config_hash="));

    // head-mode probe also works on the same checkpoints
    run_ok(&[
        "probe",
        "--dataset",
        &data,
        "--run",
        &ws.arg("run_a"),
        "--probe",
        "head",
        "--out",
        &ws.arg("probe_head"),
    ]);

    // report aggregates the probe rows
    let out = run_ok(&[
        "report",
        "--results",
        &ws.arg("probe_a"),
        "--out",
        &ws.arg("report"),
    ]);
    assert!(stdout(&out).contains("aggregated"));
    for file in [
        "summary.csv",
        "q1_single_task.csv",
        "delta_m.csv",
        "transfer.csv",
        "fig1_drop_matrix.csv",
    ] {
        assert!(ws.path(&format!("report/{file}")).is_file(), "{file} missing");
    }

    // reports over identical inputs are byte-identical
    run_ok(&[
        "report",
        "--results",
        &ws.arg("probe_b"),
        "--out",
        &ws.arg("report_b"),
    ]);
    assert_eq!(
        std::fs::read_to_string(ws.path("report/summary.csv")).unwrap(),
        std::fs::read_to_string(ws.path("report_b/summary.csv")).unwrap()
    );
}

#[test]
fn config_file_with_flag_overrides() {
    let ws = Workspace::new();
    let data = make_fixture(&ws);
    let cfg_path = ws.path("run.cfg");
    std::fs::write(
        &cfg_path,
        format!(
            "[run]\ndataset = {data}\nstrategy = classical-mt\ntasks = gc,nc\nfolds = 3\n\
             fold_filter = 0\nseed = 2\nepochs = 2\nbatch_size = 10\nhidden_dim = 8\n\
             num_layers = 2\neval_every = 1\n"
        ),
    )
    .unwrap();
    // flag overrides the file's strategy
    run_ok(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--strategy",
        "classical-st",
        "--tasks",
        "gc",
        "--out",
        &ws.arg("run_cfg"),
    ]);
    let snapshot = std::fs::read_to_string(ws.path("run_cfg/config_snapshot.cfg")).unwrap();
    assert!(snapshot.contains("strategy = classical-st"), "{snapshot}");

    // and the snapshot itself is a valid config file
    run_ok(&[
        "train",
        "--config",
        ws.path("run_cfg/config_snapshot.cfg").to_str().unwrap(),
        "--out",
        &ws.arg("run_replay"),
    ]);
    let ckpt_a = std::fs::read_to_string(ws.path("run_cfg/fold_0/checkpoint.txt")).unwrap();
    let ckpt_b = std::fs::read_to_string(ws.path("run_replay/fold_0/checkpoint.txt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn transfer_runs_and_tags_rows() {
    let ws = Workspace::new();
    let data = make_fixture(&ws);
    run_ok(&[
        "transfer",
        "--dataset",
        &data,
        "--strategy",
        "isame",
        "--tasks",
        "gc,nc",
        "--eval-task",
        "lp",
        "--probe",
        "linear",
        "--folds",
        "3",
        "--fold",
        "0",
        "--seed",
        "4",
        "--epochs",
        "2",
        "--batch-size",
        "10",
        "--hidden-dim",
        "12",
        "--num-layers",
        "2",
        "--eval-every",
        "1",
        "--out",
        &ws.arg("transfer"),
    ]);
    let metrics = std::fs::read_to_string(ws.path("transfer/metrics.csv")).unwrap();
    assert!(metrics.contains(",transfer,"), "{metrics}");
    assert!(metrics.contains("gc+nc,lp,"), "{metrics}");
    assert!(Path::new(&ws.arg("transfer/source/fold_0/checkpoint.txt")).is_file());
}

#[test]
fn corrupt_checkpoint_is_integrity_error() {
    let ws = Workspace::new();
    let data = make_fixture(&ws);
    std::fs::create_dir_all(ws.path("bad/fold_0")).unwrap();
    std::fs::write(ws.path("bad/fold_0/checkpoint.txt"), "garbage\n").unwrap();
    let out = bin()
        .args([
            "probe",
            "--dataset",
            &data,
            "--run",
            &ws.arg("bad"),
            "--out",
            &ws.arg("probe_bad"),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
