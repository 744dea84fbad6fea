use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn surgscene(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surgscene"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: &str = r#"{
  "synth": {"videos": 5, "frames": 4, "grid": [4, 4, 8], "resolution": [8, 8], "region": [1, 1]},
  "model": {"d_enc": 4, "d_llm": 6, "d_sam": 3, "proj_hidden": 4},
  "train": {"steps": 5}
}"#;

#[test]
fn version_reports_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = surgscene(&["--version"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("(schema 1)"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["gradcheck", "--bogus"],
        &["train", "--ablation", "no_everything"],
        &["gradcheck", "--module", "grammar"],
        &[],
    ] {
        let o = surgscene(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("error") || stderr(&o).contains("Usage"), "{args:?}");
    }
    assert!(stderr(&surgscene(&["frobnicate"], dir.path())).contains("Usage"));
}

#[test]
fn gradcheck_prints_every_op() {
    let dir = tempfile::tempdir().unwrap();
    let o = surgscene(&["gradcheck", "--module", "losses"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    for op in ["token_ce", "bce", "dice"] {
        assert!(out.contains(&format!("losses::{op} ")), "{out}");
    }
    assert!(out.lines().all(|l| l.contains("max rel err") && l.ends_with("ok")));
    assert!(stderr(&o).contains("resolved config"));
}

#[test]
fn synth_then_validate_matches_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let o = surgscene(&["synth", "--config", "tiny.json", "--out", "ds"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = surgscene(&["validate-dataset", "--root", "ds", "--strict"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stats: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(stats["frames"], 20);
    assert_eq!(stats["videos"].as_array().unwrap().len(), 5);
    assert_eq!(stats["resolution"], serde_json::json!([8, 8]));
    assert!(stats["frames_per_video"].as_object().unwrap().values().all(|v| v == 4));

    // A record with an out-of-range phase fails validation.
    let path = dir.path().join("ds/annotations/SYN01.json");
    let mut records = json(&path);
    records[0]["phase"] = 9.into();
    fs::write(&path, records.to_string()).unwrap();
    let lenient = surgscene(&["validate-dataset", "--root", "ds"], dir.path());
    assert_eq!(lenient.status.code(), Some(1));
    assert!(stderr(&lenient).contains("invalid record"));
    let strict = surgscene(&["validate-dataset", "--root", "ds", "--strict"], dir.path());
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn render_then_parse_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("sem.json"),
        r#"[{"frame": 0, "phase": 1, "triplets": [2, 3], "think": "hook on tissue"},
            {"frame": 1, "phase": 0, "triplets": []}]"#,
    )
    .unwrap();
    let o = surgscene(&["render", "--in", "sem.json", "--out", "text.json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = surgscene(&["parse", "--in", "text.json", "--out", "parsed.json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let parsed = json(&dir.path().join("parsed.json"));
    assert_eq!(parsed[0]["think_text"], "hook on tissue");
    assert_eq!(parsed[0]["semantics"]["phase"], 1);
    assert_eq!(parsed[0]["seg_markers"].as_array().unwrap().len(), 4);
    assert_eq!(parsed[1]["semantics"]["triplets"].as_array().unwrap().len(), 0);

    fs::write(dir.path().join("bad.txt"), "<think></think><answer> During lunch phase").unwrap();
    let o = surgscene(&["parse", "--in", "bad.txt"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    fs::write(dir.path().join("bad.json"), r#"[{"frame": 0, "phase": 0, "triplets": [99]}]"#).unwrap();
    let o = surgscene(&["render", "--in", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let o = surgscene(&["synth", "--config", "tiny.json", "--out", "ds"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = surgscene(&["train", "--config", "tiny.json", "--fold", "2", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("mIoU"));
    let manifest = json(&dir.path().join("run/manifest.json"));
    assert_eq!(manifest["fold"], 2);
    assert!(dir.path().join("run/checkpoint.bin").exists());
    assert!(dir.path().join("run/checkpoint.manifest").exists());

    let o = surgscene(
        &["eval", "--pred", "run/predictions", "--gt", "ds", "--report", "eval.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = json(&dir.path().join("eval.json"));
    assert_eq!(report["videos"], manifest["test_videos"]);
    for key in ["accuracy", "jaccard", "ap_ivt", "ap_i"] {
        assert_eq!(report["overall"][key], manifest["metrics"][key], "{key}");
    }

    let o = surgscene(&["report", "--manifest", "run/manifest.json", "--format", "json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(serde_json::from_str::<Value>(&stdout(&o)).unwrap(), manifest);
    let o = surgscene(&["report", "--manifest", "eval.json"], dir.path());
    assert!(stdout(&o).contains("AP_IVT"));
    let o = surgscene(&["report", "--manifest", "tiny.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    // Same config and seed: bitwise-identical manifest.
    let o = surgscene(&["train", "--config", "tiny.json", "--fold", "2", "--out", "again"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        fs::read(dir.path().join("run/manifest.json")).unwrap(),
        fs::read(dir.path().join("again/manifest.json")).unwrap()
    );
    // The seed flag overrides the config.
    let o = surgscene(&["train", "--config", "tiny.json", "--seed", "7"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("\"seed\":7"));
}

#[test]
fn eval_against_itself_with_folds() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    surgscene(&["synth", "--config", "tiny.json", "--out", "ds"], dir.path());
    let o = surgscene(
        &["eval", "--pred", "ds", "--gt", "ds", "--folds", "ds/folds.json", "--report", "r.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&dir.path().join("r.json"));
    assert_eq!(r["folds"].as_array().unwrap().len(), 5);
    assert_eq!(r["overall"]["accuracy"], 1.0);
    assert_eq!(r["overall"]["miou"], 1.0);
    assert_eq!(r["summary"]["metrics"]["accuracy"]["std"], 0.0);
}

#[test]
fn crossval_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let o = surgscene(
        &["crossval", "--config", "tiny.json", "--ablation", "no_grounding", "--report", "cv.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(&dir.path().join("cv.json"));
    assert_eq!(r["ablation"], "no_grounding");
    assert_eq!(r["folds"].as_array().unwrap().len(), 5);
    assert!(r["summary"]["metrics"]["miou"].is_null());
    assert!(r["summary"]["metrics"]["accuracy"].is_object());
    let o = surgscene(&["report", "--manifest", "cv.json"], dir.path());
    assert!(stdout(&o).contains("mean ± std"));
}
