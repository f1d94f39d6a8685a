use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dpgrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpgrad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const HEADLINE: &str = r#"{"d":16,"r":4,"k":8,"D":2.0,"nu":0.015625,
  "novel_schedule":[true,false,true,false,true,false,true,false],"seed":0,"snapshot_every":100}"#;

const SMALL: &str = r#"{"d":6,"r":2,"k":3,"D":2.0,"nu":0.015625,
  "novel_schedule":[true,true,false],"seed":4,"snapshot_every":10}"#;

/// `w₁ = e₁`, `w₂ = e₂` in `R⁴` with room for `r` features.
fn orthogonal_instance(r: usize) -> String {
    format!(
        r#"{{"d":4,"r":{r},"k":2,"D":2.0,"nu":0.015625,
  "w_list":[[1.0,0.0,0.0,0.0],[0.0,1.0,0.0,0.0]],"novel_flags":[true,true],"seed":null}}"#
    )
}

#[test]
fn generate_is_deterministic_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", HEADLINE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dpgrad(&["generate", "--config", &cfg, "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("validator: pass"));
    }
    assert_eq!(
        fs::read(a.join("instance.json")).unwrap(),
        fs::read(b.join("instance.json")).unwrap()
    );
    let o = dpgrad(&["generate", "--config", &cfg, "--out", s(&b), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(
        fs::read(a.join("instance.json")).unwrap(),
        fs::read(b.join("instance.json")).unwrap()
    );
}

#[test]
fn rank_larger_than_dimension_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cfg.json",
        r#"{"d":2,"r":3,"k":1,"D":2.0,"nu":0.015625,"novel_schedule":[true],"seed":0}"#,
    );
    let o = dpgrad(&["generate", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("r must not exceed d"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cfg.json",
        r#"{"d":4,"r":2,"k":1,"D":2.0,"nu":0.015625,"novel_schedule":[true],"seed":0,"sigmaa":1}"#,
    );
    let o = dpgrad(&["generate", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigmaa"));
}

#[test]
fn missing_instance_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", SMALL);
    let missing = dir.path().join("nope.json");
    let o = dpgrad(&["run", "--config", &cfg, "--instance", s(&missing), "--out", s(dir.path())]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));
}

#[test]
fn headline_dpgrad_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", HEADLINE);
    let out = dir.path().join("run");
    let o = dpgrad(&["run", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["all_converged"], true);
    assert_eq!(summary["method"], "dpgrad");
    assert_eq!(summary["seed"], 0);
    assert_eq!(summary["config"]["d"], 16);
    assert!(summary["forgetting"]["max_forgetting"].as_f64().unwrap() <= 1e-3);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("# config {"));

    let shown = dpgrad(&["report", s(&out.join("summary.json"))]);
    assert_eq!(shown.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&shown.stdout).contains("max_forgetting"));
}

#[test]
fn run_outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dpgrad(&["run", "--config", &cfg, "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["trace.csv", "summary.json", "checkpoint.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn naive_on_conflicting_instance_signals_forgetting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cfg.json",
        r#"{"d":4,"r":1,"k":2,"D":2.0,"nu":0.015625,"novel_schedule":[true,true],"seed":0,"method":"naive"}"#,
    );
    let inst = write(dir.path(), "inst.json", &orthogonal_instance(1));
    let o = dpgrad(&["run", "--config", &cfg, "--instance", &inst, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));

    let cfg2 = write(
        dir.path(),
        "cfg2.json",
        r#"{"d":4,"r":2,"k":2,"D":2.0,"nu":0.015625,"novel_schedule":[true,true],"seed":0}"#,
    );
    let inst2 = write(dir.path(), "inst2.json", &orthogonal_instance(2));
    let o = dpgrad(&["run", "--config", &cfg2, "--instance", &inst2, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn lowerbound_rejects_zero_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lb.json", r#"{"resolution":0}"#);
    let o = dpgrad(&["lowerbound", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("resolution"));
}

#[test]
fn lowerbound_witnesses_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lb.json", "{}");
    let o = dpgrad(&["lowerbound", "--config", &cfg, "--witness-only", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.matches("loss1=0 loss2=0").count(), 2, "{stdout}");
}

#[test]
fn lowerbound_coarse_grid_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lb.json", r#"{"resolution":0.5,"starts":64}"#);
    let o = dpgrad(&["lowerbound", "--config", &cfg, "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("min adversary value"));
    let game: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("game.json")).unwrap()).unwrap();
    assert_eq!(game["config"]["resolution"], 0.5);
    assert_eq!(game["reports"].as_array().unwrap().len(), 13 * 13);
}
