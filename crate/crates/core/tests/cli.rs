use std::path::Path;
use std::process::Command;

fn gil() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gil"));
    c.env("GIL_THREADS", "2");
    c
}

const SMALL: &str = r#"
seeds = [0, 1, 2]
out_dir = "out"

[dataset]
kind = "synthetic_mnar"
n = 200
d = 6

[mask]
mechanism = "mcar"
rate = 0.2

[defaults]
max_iter = 12
eval_every = 5
batch_size = 16
model = { kind = "mlp", hidden = [8] }
rl = { hidden = [8, 8] }

[[run]]
name = "zero"
variant = "baseline"
imputer = "zero"

[[run]]
name = "gil"
variant = "gil"
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn two_variants_three_seeds_give_two_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = gil().arg("run").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[3], "3", "{row}");
        assert!(!cols[6].is_empty(), "std over three seeds missing: {row}");
    }
    let results = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 7);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["runs"].as_array().unwrap().len(), 6);
}

#[test]
fn reruns_and_report_replays_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert!(gil().arg("run").arg(&cfg).arg("--out-dir").arg(&a).status().unwrap().success());
    assert!(gil().env("GIL_THREADS", "1").arg("run").arg(&cfg).arg("--out-dir").arg(&b).status().unwrap().success());
    assert!(gil().arg("run").arg(a.join("report.json")).arg("--out-dir").arg(&c).status().unwrap().success());
    for run in ["zero-s0", "zero-s2", "gil-s1"] {
        let read = |d: &Path| std::fs::read(d.join("runs").join(run).join("metrics.csv")).unwrap();
        assert_eq!(read(&a), read(&b), "{run}");
        assert_eq!(read(&a), read(&c), "{run}");
    }
}

#[test]
fn seed_override_runs_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert!(gil().arg("run").arg(&cfg).args(["--seed-override", "7"]).status().unwrap().success());
    let runs: Vec<String> = std::fs::read_dir(dir.path().join("out/runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(runs.len(), 2);
    assert!(runs.iter().all(|r| r.ends_with("-s7")));
}

#[test]
fn malformed_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("variant = \"gil\"", "variant = gil"));
    let out = gil().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("out").exists());

    let cfg = write_config(dir.path(), &SMALL.replace("variant = \"gil\"", "variant = \"gil_x\""));
    assert_eq!(gil().arg("run").arg(&cfg).status().unwrap().code(), Some(2));
    assert!(!dir.path().join("out").exists());

    let out = gil().env("GIL_THREADS", "zero").arg("run").arg(write_config(dir.path(), SMALL)).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn failed_run_gives_exit_1_and_others_continue() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("name = \"gil\"\nvariant = \"gil\"", "name = \"gil\"\nvariant = \"gil\"\nbatch_size = 1000");
    let cfg = write_config(dir.path(), &text);
    let out = gil().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let results = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(results.lines().filter(|l| l.contains(",failed,")).count(), 3);
    assert_eq!(results.lines().filter(|l| l.contains(",ok,")).count(), 3);
    assert!(dir.path().join("out/runs/zero-s1/metrics.csv").exists());
}

#[test]
fn correlate_command_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("name = \"gil\"\nvariant = \"gil\"", "name = \"mean\"\nvariant = \"baseline\"\nimputer = \"mean\"");
    let cfg = write_config(dir.path(), &text);
    assert!(gil().arg("run").arg(&cfg).status().unwrap().success());
    let out = gil().arg("correlate").arg(dir.path().join("out")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/correlation.csv")).unwrap();
    assert!(csv.contains("imputation_mse,accuracy,6,"));

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(gil().arg("correlate").arg(empty.path()).status().unwrap().code(), Some(1));
}

#[test]
fn checkpoints_are_written_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("out_dir = \"out\"", "out_dir = \"out\"\nsave_checkpoints = true"));
    let out = gil().arg("run").arg(&cfg).arg("--seed-override").arg("3").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for run in ["zero-s3", "gil-s3"] {
        let text = std::fs::read_to_string(dir.path().join("out/runs").join(run).join("model.ckpt")).unwrap();
        let model = gil_core::models::checkpoint::mlp_from_str(&text).unwrap();
        assert_eq!(gil_core::models::checkpoint::mlp_to_string(&model), text);
    }
    let plain = dir.path().join("plain");
    assert!(gil().arg("run").arg(write_config(dir.path(), SMALL)).arg("--out-dir").arg(&plain).status().unwrap().success());
    assert!(!plain.join("runs/zero-s0/model.ckpt").exists());
}
