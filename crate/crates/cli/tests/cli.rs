use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use owl_core::protocol::parse_report_csv;

fn owl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("owl runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = owl(dir, args);
    assert!(
        out.status.success(),
        "owl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, out: &str, seed: &str) {
    ok(
        dir,
        &["synth", "--classes", "10", "--dim", "16", "--train", "40", "--val", "20", "--seed", seed, "--out", out],
    );
}

const INCREMENTAL: &str = r#"
mode = "incremental"
learner = "ffil"
seed = 5
features_path = "data/features.owlf"
initial_classes = [0, 1, 2, 3]

[[phases]]
new_classes = [4, 5, 6]

[[phases]]
new_classes = [7, 8, 9]
"#;

const OPEN_WORLD: &str = r#"
mode = "openworld"
learner = "ffowl"
seed = 5
target_uda = 0.5
features_path = "data/features.owlf"
initial_classes = [0, 1, 2, 3, 4]

[[phases]]
new_classes = [5, 6]

[[phases]]
new_classes = [7, 8, 9]
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", "7");
    fs::write(dir.path().join("inc.toml"), INCREMENTAL).unwrap();
    fs::write(dir.path().join("ow.toml"), OPEN_WORLD).unwrap();
    dir
}

#[test]
fn synth_is_readable_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        dir.path(),
        &["synth", "--classes", "10", "--dim", "32", "--train", "100", "--val", "50", "--seed", "7", "--out", "d"],
    );
    assert!(stdout.contains("features.owlf") && stdout.contains("manifest.csv"));
    let data = owl_core::read_features(&dir.path().join("d/features.owlf")).unwrap();
    assert_eq!(data.len(), 10 * 150);
    assert_eq!(data.dim(), 32);
    ok(
        dir.path(),
        &["synth", "--classes", "10", "--dim", "32", "--train", "100", "--val", "50", "--seed", "7", "--out", "e"],
    );
    for f in ["features.owlf", "manifest.csv"] {
        assert_eq!(
            fs::read(dir.path().join("d").join(f)).unwrap(),
            fs::read(dir.path().join("e").join(f)).unwrap()
        );
    }
}

#[test]
fn synth_rejects_zero_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = owl(
        dir.path(),
        &["synth", "--classes", "0", "--dim", "4", "--train", "2", "--val", "2", "--out", "z"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("z").exists());
}

#[test]
fn incremental_run_writes_one_row_per_evaluation() {
    let dir = workspace();
    ok(dir.path(), &["run", "--config", "inc.toml", "--out", "r1"]);
    let report = fs::read_to_string(dir.path().join("r1/report.csv")).unwrap();
    let rows = parse_report_csv(&report).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.uda.is_none() && r.cwca.unwrap() > 0.95));
    assert_eq!(rows[2].n_known, 200);
    assert!(dir.path().join("r1/model.owle").exists());

    ok(dir.path(), &["run", "--config", "inc.toml", "--out", "r2"]);
    assert_eq!(report, fs::read_to_string(dir.path().join("r2/report.csv")).unwrap());
    let manifest = |d: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(dir.path().join(d).join("manifest.json")).unwrap()).unwrap()
    };
    let (m1, m2) = (manifest("r1"), manifest("r2"));
    assert_eq!(m1["config_hash"], m2["config_hash"]);
    assert_eq!(m1["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m1["engine_version"], "0.1.0");
    assert!(m1["started_at"].as_str().unwrap().ends_with('Z'));

    ok(dir.path(), &["run", "--config", "inc.toml", "--out", "r3", "--override", "evm.dm=0.5"]);
    assert_ne!(manifest("r3")["config_hash"], m1["config_hash"]);
}

#[test]
fn zero_threshold_override_detects_nothing() {
    let dir = workspace();
    ok(dir.path(), &["run", "--config", "ow.toml", "--out", "r", "--override", "delta=0"]);
    let rows = parse_report_csv(&fs::read_to_string(dir.path().join("r/report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.detected == 0 && r.enrolled == 0));
}

#[test]
fn failed_run_leaves_no_outputs() {
    let dir = workspace();
    let out = owl(
        dir.path(),
        &["run", "--config", "inc.toml", "--out", "r", "--override", "initial_classes=[0]", "--override", "evm.exemplars=0"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("negatives"));
    assert!(!dir.path().join("r").exists());

    let bad = owl(dir.path(), &["run", "--config", "inc.toml", "--out", "r", "--override", "learner=afowl"]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(owl(dir.path(), &["run", "--out", "r"]).status.code(), Some(1));
    let missing = owl(dir.path(), &["run", "--config", "inc.toml", "--features", "nope.owlf"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn sweep_marks_the_dominating_cell() {
    let dir = workspace();
    let csv = ok(
        dir.path(),
        &["sweep", "--config", "inc.toml", "--dm", "0.01,0.7", "--ct", "0.8,0.9", "--out", "s"],
    );
    let lines: Vec<&str> = csv.lines().take_while(|l| !l.starts_with("best")).collect();
    assert_eq!(lines.len(), 1 + 4);
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    let best: Vec<&Vec<&str>> = rows.iter().filter(|r| r[4] == "true").collect();
    assert_eq!(best.len(), 1);
    assert_eq!(best[0][0], "0.7");
    let acc = |r: &Vec<&str>| r[3].parse::<f64>().unwrap();
    assert!(rows.iter().filter(|r| r[0] == "0.01").all(|r| acc(r) < acc(best[0])));
    assert_eq!(fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap(), lines.join("\n") + "\n");

    let single = ok(dir.path(), &["sweep", "--config", "inc.toml", "--dm", "0.7", "--ct", "0.8", "--tailsize", "20", "--out", "s1"]);
    assert!(single.lines().nth(1).unwrap().ends_with(",true"));
    let threads = Command::new(env!("CARGO_BIN_EXE_owl"))
        .current_dir(dir.path())
        .env("OWL_THREADS", "zero")
        .args(["sweep", "--config", "inc.toml", "--dm", "0.7", "--ct", "0.8"])
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
}

#[test]
fn calibrate_from_scores() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scores.txt"), "0.2\n0.4\n0.6\n0.8\n").unwrap();
    let half = ok(dir.path(), &["calibrate", "--scores", "scores.txt", "--target-uda", "0.5", "--out", "c"]);
    assert_eq!(half.trim(), "0.6");
    let fragment = fs::read_to_string(dir.path().join("c/calibrated.toml")).unwrap();
    assert!(fragment.contains("delta = 0.6"));
    let all = ok(dir.path(), &["calibrate", "--scores", "scores.txt", "--target-uda", "1.0", "--out", "c"]);
    assert_eq!(all.trim().parse::<f64>().unwrap(), owl_core::REJECT_ALL);
    fs::write(dir.path().join("empty.txt"), "").unwrap();
    let none = owl(dir.path(), &["calibrate", "--scores", "empty.txt", "--target-uda", "0.5"]);
    assert_eq!(none.status.code(), Some(2));
}

#[test]
fn calibrated_threshold_reproduces_target_in_a_run() {
    let dir = workspace();
    // a closed-world model over the initial classes
    fs::write(
        dir.path().join("init.toml"),
        INCREMENTAL.replace("initial_classes = [0, 1, 2, 3]", "initial_classes = [0, 1, 2, 3, 4]")
            .split("[[phases]]")
            .next()
            .unwrap(),
    )
    .unwrap();
    ok(dir.path(), &["run", "--config", "init.toml", "--out", "m"]);
    let delta = ok(
        dir.path(),
        &[
            "calibrate", "--model", "m/model.owle", "--features", "data/features.owlf",
            "--unknown-classes", "5,6", "--target-uda", "0.5", "--out", "c",
        ],
    );
    let no_unknowns = owl(
        dir.path(),
        &["calibrate", "--model", "m/model.owle", "--features", "data/features.owlf", "--unknown-classes", "3", "--target-uda", "0.5"],
    );
    assert_ne!(no_unknowns.status.code(), Some(0));

    let delta = delta.trim();
    ok(
        dir.path(),
        &["run", "--config", "ow.toml", "--out", "r", "--override", &format!("delta={delta}")],
    );
    let rows = parse_report_csv(&fs::read_to_string(dir.path().join("r/report.csv")).unwrap()).unwrap();
    let uda = rows[0].uda.unwrap();
    assert!((uda - 0.5).abs() <= 1.0 / rows[0].n_unknown as f64, "UDA {uda}");
    let table = ok(dir.path(), &["report", "r/report.csv"]);
    assert!(table.contains("OwCA") && table.lines().count() == 7);
}
