use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pinsight"));
    c.env_remove("PINSIGHT_DATA");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn pinsight");
    if !out.status.success() {
        eprintln!("stdout:\n{}", String::from_utf8_lossy(&out.stdout));
        eprintln!("stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn run_json(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

#[test]
fn rank_prints_the_worked_example_top3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["rank", "--dists"])
        .arg(fixture("example_dists.json"))
        .args(["--k", "3", "--out"])
        .arg(tmp.path()));
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let pins: Vec<&str> = stdout.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(pins, ["73632", "73633", "73636"]);
    let record = run_json(tmp.path());
    assert_eq!(record["subcommand"], "rank");
    assert_eq!(record["status"], "ok");
    assert_eq!(record["seed"], 0);
    assert!(tmp.path().join("ranked.json").exists());
}

#[test]
fn swap_strategy_second_guess_swaps_the_closest_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["rank", "--strategy", "swap", "--k", "2", "--dists"])
        .arg(fixture("example_dists.json"))
        .arg("--out")
        .arg(tmp.path()));
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let pins: Vec<&str> = stdout.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(pins, ["73632", "73633"]);
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_bad_enum_flag_exit_2() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(2));
    let out = bin().args(["evaluate", "--scenario", "sideways"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn off_grid_shield_exits_2_and_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["segment", "--data", "/nonexistent", "--shield", "30", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run_json(tmp.path())["status"], "error");
}

#[test]
fn stage_failure_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["ingest", "--data", "/nonexistent/pinsight-data", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_data_root_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["ingest", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_environment_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 5, "strategy": "swap", "data": "/from/file"}"#).unwrap();

    let a = tmp.path().join("a");
    assert!(run(bin()
        .args(["rank", "--dists"])
        .arg(fixture("example_dists.json"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&a))
    .status
    .success());
    let rec = run_json(&a);
    assert_eq!(rec["seed"], 5);
    assert_eq!(rec["effective"]["strategy"], "swap");

    let b = tmp.path().join("b");
    assert!(run(bin()
        .args(["rank", "--strategy", "product", "--seed", "9", "--dists"])
        .arg(fixture("example_dists.json"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&b))
    .status
    .success());
    let rec = run_json(&b);
    assert_eq!(rec["seed"], 9);
    assert_eq!(rec["effective"]["strategy"], "product");

    // Environment beats the file's data root; the empty directory ingests cleanly.
    let data = tempfile::tempdir().unwrap();
    let c = tmp.path().join("c");
    let out = run(bin()
        .arg("ingest")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&c)
        .env("PINSIGHT_DATA", data.path()));
    assert!(out.status.success());
    assert_eq!(run_json(&c)["settings"]["data"], data.path().to_str().unwrap());
}

#[test]
fn encoded_container_is_refused_as_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["synth-gen", "--container", "encoded", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn files_with_suffix(dir: &Path, suffix: &str) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_str().unwrap().ends_with(suffix))
        .map(|p| (p.file_name().unwrap().to_str().unwrap().to_string(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let p = |name: &str| tmp.path().join(name);

    let ok = |cmd: &mut Command| assert!(run(cmd).status.success());
    ok(bin().args(["synth-gen", "--participants", "6", "--pins", "4", "--seed", "3", "--out"]).arg(&data));
    assert!(data.join("manifest.json").exists());

    ok(bin().args(["ingest", "--data"]).arg(&data).arg("--out").arg(p("ingest")));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(p("ingest/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["records"].as_array().unwrap().len(), 24);

    ok(bin().args(["detect", "--data"]).arg(&data).arg("--out").arg(p("detect")));
    let det: Value = serde_json::from_str(&fs::read_to_string(p("detect/detect.json")).unwrap()).unwrap();
    for e in det.as_array().unwrap() {
        assert_eq!(e["offset_ms"], 0);
        assert_eq!(e["detected"], e["keylog_downs"]);
    }

    // Non-training stages are byte-identical on re-run.
    for dir in ["seg1", "seg2"] {
        ok(bin().args(["segment", "--shield", "25", "--frame-error-k", "3", "--data"]).arg(&data).arg("--out").arg(p(dir)));
    }
    let a = files_with_suffix(&p("seg1"), ".samples.f32");
    assert_eq!(a.len(), 24);
    assert_eq!(a, files_with_suffix(&p("seg2"), ".samples.f32"));
    assert_eq!(files_with_suffix(&p("seg1"), ".samples.json"), files_with_suffix(&p("seg2"), ".samples.json"));

    ok(bin()
        .args(["train", "--ratios", "4,1,1", "--epochs", "1", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(p("train")));
    let model = p("train/model.lrcn");
    assert!(model.exists());
    assert_eq!(fs::read_to_string(p("train/history.csv")).unwrap().lines().count(), 2);

    ok(bin().arg("predict").arg("--model").arg(&model).arg("--samples").arg(p("seg1")).arg("--out").arg(p("pred")));
    let preds: Value = serde_json::from_str(&fs::read_to_string(p("pred/predictions.json")).unwrap()).unwrap();
    assert_eq!(preds.as_array().unwrap().len(), 24);

    ok(bin()
        .args(["evaluate", "--ratios", "4,1,1", "--sweep", "shield", "--data"])
        .arg(&data)
        .arg("--model-file")
        .arg(&model)
        .arg("--out")
        .arg(p("eval")));
    for s in [0, 25, 50, 75, 100] {
        let dir = p(&format!("eval/shield{s}_fe0_res64"));
        for f in ["report.json", "accuracy.svg", "heatmaps.svg", "confusion.svg"] {
            assert!(dir.join(f).exists(), "{}/{f}", dir.display());
        }
    }

    let out = run(bin().arg("report").arg("--input").arg(p("eval")).arg("--out").arg(p("report")));
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 5);
    assert!(p("report/summary.txt").exists());
    for dir in ["ingest", "detect", "seg1", "train", "pred", "eval", "report"] {
        assert_eq!(run_json(&p(dir))["status"], "ok", "{dir}");
    }
}
