use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
model_dims = 79, 9
clients_per_cohort = 10
sample_fraction = 0.3
sigma = 1.5
synth_rows = 4000
train_eval_rows = 300
seed = 4
";

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cohort-dp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Vec<PathBuf> {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(PathBuf::from)
        .collect()
}

fn config(dir: &Path, extra: &str) -> String {
    let path = dir.join(format!("run{}.conf", extra.len()));
    std::fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.display().to_string()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn partition_is_deterministic_and_splits_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let a = ok(&["--config", &cfg, "--out", &dir.path().join("a").display().to_string(), "partition"]);
    let b = ok(&["--config", &cfg, "--out", &dir.path().join("b").display().to_string(), "partition"]);
    assert_eq!(read(&a[0]), read(&b[0]));
    assert_eq!(read(&a[1]), read(&b[1]));

    let manifest = read(&a[0]);
    let mut sets = vec![BTreeSet::new(), BTreeSet::new()];
    for line in manifest.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let cohort: usize = cols[1].parse().unwrap();
        let labels: Vec<usize> = cols[2].split(';').map(|l| l.parse().unwrap()).collect();
        assert_eq!(labels[0], 0, "benign first");
        assert!(labels.len() <= 3);
        sets[cohort].extend(labels[1..].iter().copied());
    }
    assert_eq!((sets[0].len(), sets[1].len()), (4, 4));
    assert!(sets[0].is_disjoint(&sets[1]));
}

#[test]
fn train_is_reproducible_and_rho_zero_matches_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name).display().to_string();
    let cfg = config(dir.path(), "");
    let a = ok(&["--config", &cfg, "--algo", "dp", "--out", &out("a"), "train"]);
    let b = ok(&["--config", &cfg, "--algo", "dp", "--out", &out("b"), "train"]);
    assert_eq!(a.len(), 3);
    assert_eq!(a[0].file_name(), b[0].file_name());
    assert!(a[0].file_name().unwrap().to_str().unwrap().ends_with("_4.csv"));
    assert_eq!(read(&a[0]), read(&b[0]));

    let rho0 = config(dir.path(), "rho = 0\n");
    let r = ok(&["--config", &rho0, "--algo", "dp-r", "--out", &out("r"), "train"]);
    assert_ne!(r[0].file_name(), a[0].file_name());
    assert_eq!(read(&r[0]), read(&a[0]));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().display().to_string();
    let a = ok(&["--config", &cfg, "--seed", "9", "--algo", "nonprivate", "--out", &out, "train"]);
    assert!(a[0].file_name().unwrap().to_str().unwrap().ends_with("_9.csv"));
    let text = read(&a[0]);
    // Nonprivate runs leave the delta columns empty.
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("0,,,00,"), "{row}");
}

#[test]
fn resume_then_continue_equals_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name).display().to_string();
    let cfg = config(dir.path(), "");
    let straight = ok(&["--config", &cfg, "--algo", "dp-si", "--out", &out("s"), "train"]);
    let part = ok(&["--config", &cfg, "--algo", "dp-si", "--out", &out("p"), "train", "--stop-after", "7"]);
    let cp = part[1].display().to_string();
    let rest = ok(&["--out", &out("r"), "train", "--resume", &cp]);
    assert_eq!(read(&rest[0]), read(&straight[0]));
    assert!(!cli(&["--config", &cfg, "train", "--resume", &cp]).status.success());
}

#[test]
fn relax_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let cfg = config(dir.path(), "");
    let trained = ok(&["--config", &cfg, "--algo", "dp-r", "--out", &out, "train"]);
    let cp = trained[1].display().to_string();

    let none = ok(&["--out", &out, "relax", "--checkpoint", &cp, "--cohort", "0", "--extra-rounds", "0"]);
    let text = read(&none[0]);
    assert_eq!(text.lines().count(), 2, "header plus the checkpoint's final row");
    assert_eq!(text.lines().nth(1), read(&trained[0]).lines().last());

    let ten = ok(&["--out", &out, "relax", "--checkpoint", &cp, "--cohort", "1"]);
    assert!(read(&ten[0]).lines().count() >= 12);
    assert!(!cli(&["--out", &out, "relax", "--checkpoint", &cp, "--cohort", "5"]).status.success());

    let eval = cli(&["evaluate", "--checkpoint", &cp]);
    assert!(eval.status.success());
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["per_class_f1"].as_array().unwrap().len(), 9);
    let saved: serde_json::Value = serde_json::from_str(&read(&trained[2])).unwrap();
    assert_eq!(report, saved);
}

#[test]
fn accountant_table() {
    let out = cli(&["accountant", "--q", "0.1", "--sigma", "1", "--epsilon", "6", "--delta-threshold", "1e-5"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "round,delta");
    let deltas: Vec<f64> = lines[1..lines.len() - 1]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(deltas.windows(2).all(|w| w[1] > w[0]));
    assert!(*deltas.last().unwrap() > 1e-5);
    assert_eq!(lines.last().unwrap(), &format!("# exhaustion_round = {}", deltas.len()));
}

#[test]
fn sample_fraction_sweep_rounds_decrease() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let cfg = config(dir.path(), "");
    let files = ok(&[
        "--config", &cfg, "--algo", "dp", "--out", &out, "sweep", "--parameter", "sample_fraction", "--values",
        "0.2,0.3,0.5", "--seeds", "1,2",
    ]);
    let text = read(&files[0]);
    assert!(text.starts_with("value,seed,micro_f1,macro_f1,weighted_f1,rounds\n"));
    let medians: Vec<f64> = text
        .lines()
        .filter(|l| l.split(',').nth(1) == Some("median"))
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    assert_eq!(medians.len(), 3);
    assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
    assert_eq!(text.lines().count(), 1 + 6 + 3);
}

#[test]
fn bad_inputs_fail_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "learning_rat = 0.1\n");
    let out = cli(&["--config", &cfg, "partition"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let out = cli(&["--algo", "fedprox", "partition"]);
    assert!(!out.status.success());
    let out = cli(&["sweep", "--parameter", "momentum", "--values", "1"]);
    assert!(!out.status.success());
}
