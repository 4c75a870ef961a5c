use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gazefl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazefl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gazefl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn column(csv_text: &str, name: &str) -> Vec<String> {
    let mut lines = csv_text.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

const SMALL: &[&str] = &["--set", "data.synth.participants=3", "--set", "data.synth.max_count=250"];

#[test]
fn synth_writes_one_file_per_participant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["synth", "--participants", "15", "--seed", "1", "--set", "data.synth.max_count=200", "--out", p(&out)]);
    let gzfl = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "gzfl"))
        .count();
    assert_eq!(gzfl, 15);
}

#[test]
fn paired_modes_share_cohorts() {
    let dir = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    for mode in ["fedavg", "fedadam"] {
        let out = dir.path().join(mode);
        let mut args = vec!["train", "--mode", mode, "--seed", "5", "--rounds", "4", "--client-lr", "0.01", "--out", p(&out)];
        args.extend(SMALL);
        ok(&args);
        metrics.push(fs::read_to_string(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(column(&metrics[0], "cohort"), column(&metrics[1], "cohort"));
    assert_eq!(column(&metrics[0], "cohort").len(), 4);
    assert_ne!(column(&metrics[0], "mae_deg"), column(&metrics[1], "mae_deg"));
}

#[test]
fn snapshot_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let mut args = vec!["train", "--mode", "fedadam", "--rounds", "3", "--server-lr", "0.01", "--out", p(&first)];
    args.extend(SMALL);
    ok(&args);
    let second = dir.path().join("b");
    ok(&["train", "--config", p(&first.join("config.txt")), "--out", p(&second)]);
    for file in ["metrics.csv", "checkpoint.ckpt", "report.csv", "config.txt"] {
        assert_eq!(fs::read(first.join(file)).unwrap(), fs::read(second.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn individual_mode_writes_per_participant_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ind");
    let mut args = vec!["train", "--mode", "individual", "--rounds", "2", "--client-lr", "0.01", "--out", p(&out)];
    args.extend(SMALL);
    ok(&args);
    assert_eq!(fs::read_dir(out.join("checkpoints")).unwrap().count(), 3);
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap().lines().count(), 4);
}

#[test]
fn leave_one_out_report_has_one_row_per_participant() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--participants", "3", "--set", "data.synth.max_count=250", "--out", p(&data)]);
    let out = dir.path().join("loo");
    ok(&["eval", "--protocol", "leave-one-out", "--mode", "central", "--rounds", "2", "--data", p(&data), "--out", p(&out)]);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(column(&report, "participant"), ["0", "1", "2"]);
    assert!(out.join("held-out-02").join("metrics.csv").exists());
}

#[test]
fn saved_checkpoint_can_be_scored() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--mode", "central", "--rounds", "2", "--client-lr", "0.01", "--out", p(&run)];
    args.extend(SMALL);
    ok(&args);
    let scored = dir.path().join("scored");
    let ckpt = run.join("checkpoint.ckpt");
    let mut args = vec!["eval", "--checkpoint", p(&ckpt), "--out", p(&scored)];
    args.extend(SMALL);
    ok(&args);
    let report = fs::read_to_string(scored.join("report.csv")).unwrap();
    assert_eq!(column(&report, "participant").len(), 3);
}

#[test]
fn stats_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["stats", "--out", p(dir.path())];
    args.extend(SMALL);
    ok(&args);
    assert_eq!(fs::read_to_string(dir.path().join("stats.csv")).unwrap().lines().count(), 4);
    assert!(dir.path().join("label_distance.csv").exists());
}

#[test]
fn usage_errors_exit_two() {
    let out = gazefl(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "--out", p(dir.path()), "--set", "no.such.key=1"],
        vec!["train", "--out", p(dir.path()), "--bogus-flag"],
        vec!["train", "--out", p(dir.path()), "--set", "noise.fraction=2"],
        vec!["train", "--out", p(dir.path()), "--mode", "fedsgd"],
    ] {
        assert_eq!(gazefl(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("broken.gzfl"), b"XXXXnot a dataset").unwrap();
    let out_dir = dir.path().join("o");
    let out = gazefl(&["train", "--data", p(dir.path()), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 0"));
}
