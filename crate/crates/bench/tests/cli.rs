use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "# smoke settings\nseeds = 1\nsteps = 4\neval_interval = 2\nholdout = 2\nmechanisms = DCA\n";

fn locattn(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_locattn"));
    cmd.args(args).env_remove("LOCATTN_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("LOCATTN_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("bad stdout `{text}`: {e}"))
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn trials_write_tables_and_echo_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = locattn(&["trials", "--config", &cfg, "--out", out_dir.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["status"], "ok");
    for name in ["trial_rows.partial.csv", "trials.csv", "trials.json", "runs.csv", "runs.json"] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
    let trials: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("trials.json")).unwrap()).unwrap();
    assert_eq!(trials["schema_version"], 1);
    assert_eq!(trials["kind"], "trials");
    assert_eq!(trials["metadata"]["config_text"], SMALL);
    assert_eq!(trials["metadata"]["settings"]["steps"], 4);
    assert_eq!(trials["rows"].as_array().unwrap().len(), 3);
    let partial = fs::read_to_string(out_dir.join("trial_rows.partial.csv")).unwrap();
    assert_eq!(partial.lines().count(), 4);
}

#[test]
fn flags_override_config_and_env_sets_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let env_dir = dir.path().join("from_env");
    let out = locattn(
        &["trials", "--config", &cfg, "--mechanism", "gmmv2b,LSA", "--steps", "2", "--seed", "7", "--precision", "64"],
        Some(&env_dir),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Value = serde_json::from_str(&fs::read_to_string(env_dir.join("runs.json")).unwrap()).unwrap();
    let rows = runs["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["mechanism"].as_str().unwrap()).collect();
    assert_eq!(names, vec!["GMMv2b", "LSA"]);
    assert!(rows.iter().all(|r| r["seed"] == 7 && r["steps_completed"] == 2));
    assert_eq!(runs["metadata"]["settings"]["precision"], "F64");
}

#[test]
fn identical_invocations_give_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let rows = |sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = locattn(&["trials", "--config", &cfg, "--out", out_dir.to_str().unwrap()], None);
        assert!(out.status.success());
        let mut v: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("trials.json")).unwrap()).unwrap();
        for r in v["rows"].as_array_mut().unwrap() {
            r["wall_time_s"] = Value::Null;
        }
        v["rows"].clone()
    };
    assert_eq!(rows("a"), rows("b"));
}

#[test]
fn bad_mechanism_gives_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = locattn(&["trials", "--mechanism", "XYZ", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim().lines().last().unwrap()).unwrap();
    assert_eq!(err["status"], "error");
    assert_eq!(err["kind"], "unknown_mechanism");
}

#[test]
fn unknown_config_key_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seeds = 1\nlearning_rat = 0.1\n");
    let out = locattn(&["trials", "--config", &cfg, "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim().lines().last().unwrap()).unwrap();
    assert_eq!(err["kind"], "config");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("run.cfg:2"), "{msg}");
}

#[test]
fn rollout_table_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = locattn(
        &["rollout", "--steps", "5", "--length", "30", "--out", dir.path().to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("rollout.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6 * 30);
    let means: Vec<f64> = rows
        .iter()
        .filter(|r| r["position"] == 0)
        .map(|r| r["mean"].as_f64().unwrap())
        .collect();
    assert!(means.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(table["metadata"]["settings"]["taps"].as_array().unwrap().len(), 11);
}

#[test]
fn gradcheck_passes_for_a_chosen_mechanism() {
    let dir = tempfile::tempdir().unwrap();
    let out = locattn(&["gradcheck", "--mechanism", "DCA,GMMv1b", "--out", dir.path().to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["passed"] == true));
}

#[test]
fn sweep_saves_checkpoints_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}sweep.multipliers = 1, 2\nsweep.samples = 1\n"));
    let out_dir = dir.path().join("out");
    let out = locattn(&["sweep", "--config", &cfg, "--out", out_dir.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("checkpoints/DCA_seed1.ckpt").exists());
    let sweep: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("sweep.json")).unwrap()).unwrap();
    let lengths: Vec<u64> = sweep["rows"].as_array().unwrap().iter().map(|r| r["length"].as_u64().unwrap()).collect();
    assert_eq!(lengths, vec![12, 24]);
}

#[test]
fn export_converts_json_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    let out = locattn(&["rollout", "--steps", "2", "--length", "4", "--out", src.to_str().unwrap()], None);
    assert!(out.status.success());
    let dest = dir.path().join("dest");
    let out = locattn(
        &["export", "--input", src.join("rollout.json").to_str().unwrap(), "--format", "csv", "--out", dest.to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dest.join("rollout.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "schema_version,step,position,mass,mean,std");
    assert_eq!(lines.count(), 3 * 4);
}
