use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use dfl_core::analysis::{compute_constants, BoundInputs};
use dfl_core::control::{solve_p, ProblemInput};
use dfl_core::metrics::{read_rows, summarize, MetricsRow, SummaryRow, SweepRecord};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn dfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfl")).args(args).output().unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes `ridge_minimal.json` after `edit` into `dir`.
fn edited_ridge(dir: &Path, name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(config("ridge_minimal.json")).unwrap()).unwrap();
    edit(&mut doc);
    let path = dir.join(name);
    fs::write(&path, doc.to_string()).unwrap();
    path
}

#[test]
fn run_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    let o = dfl(&["run", path_str(&config("ridge_minimal.json")), "--out", path_str(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(10));
    let o = dfl(&["run", path_str(&config("ridge_minimal.json")), "--out", path_str(&b)]);
    assert!(o.status.success());
    for name in ["metrics_seed1.csv", "events_seed1.csv", "manifest_seed1.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let rows: Vec<MetricsRow> = read_rows(&a.join("metrics_seed1.csv")).unwrap();
    assert_eq!(rows.len(), 200);
    assert!(rows.iter().all(|r| r.e1.is_some() && r.gap.is_some()));
    let header = fs::read_to_string(a.join("metrics_seed1.csv")).unwrap();
    assert!(header.starts_with("t,k,F,gap,e1,e2,e3,cumEnergy,cumDelay\n"), "{}", header.lines().next().unwrap());
}

#[test]
fn seed_offset_shifts_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let shifted = dir.path().join("shifted");
    let direct = dir.path().join("direct");
    let o = dfl(&["run", path_str(&config("ridge_minimal.json")), "--out", path_str(&shifted), "--seed-offset", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seed4 = edited_ridge(dir.path(), "seed4.json", |d| d["seed"] = 4.into());
    assert!(dfl(&["run", path_str(&seed4), "--out", path_str(&direct)]).status.success());
    assert!(!shifted.join("metrics_seed1.csv").exists());
    assert_eq!(
        fs::read(shifted.join("metrics_seed4.csv")).unwrap(),
        fs::read(direct.join("metrics_seed4.csv")).unwrap()
    );
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let broken = edited_ridge(dir.path(), "broken.json", |d| {
        d["training"]["mode"].as_object_mut().unwrap().remove("tau");
    });
    let o = dfl(&["run", path_str(&broken), "--out", path_str(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("training.mode.tau"), "{}", stderr(&o));
    let o = dfl(&["run", path_str(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_writes_one_directory_per_value_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = edited_ridge(dir.path(), "ablation.json", |d| {
        d["num_seeds"] = 2.into();
        d["training"]["allow_full_combiner"] = true.into();
        d["training"]["total_steps"] = 60.into();
    });
    let out = dir.path().join("sweep");
    let o = dfl(&[
        "sweep",
        path_str(&cfg),
        "--axis",
        "training.mode.alpha",
        "--values",
        "0,0.5,1",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for v in ["0", "0.5", "1"] {
        let d = out.join(format!("training.mode.alpha={v}"));
        assert!(d.join("metrics_seed1.csv").exists() && d.join("metrics_seed2.csv").exists(), "{v}");
    }
    let records: Vec<SweepRecord> = read_rows(&out.join("sweep.csv")).unwrap();
    assert_eq!(records.iter().filter(|r| r.metric == "final_loss").count(), 6);
    let alphas: Vec<f64> = records.iter().filter(|r| r.metric == "mean_alpha").map(|r| r.result).collect();
    assert_eq!(alphas, vec![0.0, 0.0, 0.5, 0.5, 1.0, 1.0]);
    let summary: Vec<SummaryRow> = read_rows(&out.join("summary.csv")).unwrap();
    assert_eq!(format!("{summary:?}"), format!("{:?}", summarize(&records)));

    let o = dfl(&["sweep", path_str(&cfg), "--axis", "training.mode.alpha", "--values", "", "--out", path_str(&out)]);
    assert!(!o.status.success());
    let o = dfl(&["sweep", path_str(&cfg), "--axis", "training.mode.alpha", "--values", "2", "--out", path_str(&out)]);
    assert!(!o.status.success());
}

#[test]
fn bounds_prints_the_library_constants() {
    let path = config("bounds_example.json");
    let o = dfl(&["bounds", path_str(&path), "--horizon", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let inputs: BoundInputs = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let want = compute_constants(&inputs).unwrap();
    for (key, value) in [
        ("c1", want.c1),
        ("c2", want.c2),
        ("c3", want.c3),
        ("k1", want.k1),
        ("k2", want.k2),
        ("y1", want.y1),
        ("y2", want.y2),
        ("y3", want.y3),
        ("alpha_star", want.alpha_star),
        ("eta_limit", want.eta_limit),
        ("gamma_limit", want.gamma_limit),
    ] {
        assert_eq!(got[key].as_f64(), Some(value), "{key}");
    }
    let gaps: Vec<f64> = got["gap_bound"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(gaps, (0..=5).map(|k| want.theorem_bound(k)).collect::<Vec<_>>());
}

#[test]
fn control_prints_the_solver_decision() {
    let path = config("control_snapshot.json");
    let o = dfl(&["control", path_str(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let input: ProblemInput = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let want = solve_p(&input).unwrap();
    assert_eq!(got["decision"]["tau"].as_u64(), Some(want.tau as u64));
    assert_eq!(got["decision"]["alpha"].as_f64(), Some(want.alpha));
    assert_eq!(got["decision"]["objective"].as_f64(), Some(want.objective));
    assert_eq!(got["breakdown"]["objective"].as_f64(), Some(want.objective));
}

#[test]
fn validate_reports_each_check() {
    let o = dfl(&["validate", "facts", "--seeds", "10"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS ")).count() >= 1);
    assert!(!text.contains("FAIL "));
    assert!(text.trim_end().ends_with("0 failed"));
    let o = dfl(&["validate", "nonsense"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown suite"));
}
