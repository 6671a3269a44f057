//! Drives the `scenesig` binary through a small synthetic workflow.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scenesig::features::parse_feature_dump;
use scenesig::fv::load_signature;
use scenesig::pipeline::PipelineConfig;
use scenesig::retrieval::SignatureDatabase;
use scenesig::segmentation::parse_segmentation;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scenesig"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn args(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn json_lines(s: &str) -> Vec<Value> {
    s.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Two synthetic rooms with trained models and an index, built once.
fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut cfg = PipelineConfig::desk();
    cfg.ica.max_samples = 8000;
    cfg.gmm.max_samples = 8000;
    cfg.gmm.components = 6;
    cfg.paths.ica = Some("ica.bin".into());
    cfg.paths.gmm = Some("gmm.txt".into());
    cfg.paths.db = Some("db.bin".into());
    std::fs::write(d.join("config.toml"), cfg.to_toml()).unwrap();
    let synth = json_lines(&ok(d, &["--config", "config.toml", "synth", "--out", "data", "--rooms", "2", "--db-frames", "10", "--queries", "3"]));
    assert_eq!(synth[0]["scenes"], serde_json::json!(["room0", "room1"]));
    let ica = json_lines(&ok(d, &["--config", "config.toml", "train-ica", "--data", "data/room0/db", "data/room1/db", "--stride", "2"]));
    assert_eq!(ica[0]["model"], "ica");
    ok(d, &["--config", "config.toml", "train-gmm", "--data", "data/room0/db", "data/room1/db", "--stride", "2"]);
    assert!(std::fs::read_to_string(d.join("gmm.txt")).unwrap().starts_with("scenesig-model 1"));
    let idx = json_lines(&ok(d, &["--config", "config.toml", "index", "--data", "data/room0/db", "data/room1/db"]));
    assert_eq!(idx[0]["entries"], 20);
    tmp
}

#[test]
fn workflow() {
    let tmp = workspace();
    let d = tmp.path();
    let c = ["--config", "config.toml"];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };

    // stats in both forms
    let text = ok(d, &args(&with(&["db", "stats"])));
    assert!(text.contains("entries        20") && text.contains("dimension      600"), "{text}");
    let st = json_lines(&ok(d, &args(&with(&["db", "stats", "--json", "db.bin"]))));
    assert_eq!(st[0]["dim"], 600);
    let db = SignatureDatabase::open(&d.join("db.bin")).unwrap();
    assert_eq!(db.len(), 20);
    assert_eq!(db.entry(0).frame_id, "room0/db/frame-000000");

    // encode with dumps; the files parse back
    let enc = json_lines(&ok(d, &args(&with(&["encode", "--data", "data/room1/queries", "--out", "sigs", "--features", "--segmentation"]))));
    assert_eq!(enc.len(), 3);
    let sig = load_signature(&PathBuf::from(d).join(enc[0]["signature"].as_str().unwrap())).unwrap();
    assert_eq!(sig.frame_id, "room1/queries/frame-000000");
    assert_eq!(sig.len(), 600);
    let (fid, levels) = parse_feature_dump(&std::fs::read_to_string(d.join(enc[0]["features"].as_str().unwrap())).unwrap()).unwrap();
    assert_eq!((fid.as_str(), levels.len()), ("room1/queries/frame-000000", 4));
    let seg = parse_segmentation(&std::fs::read_to_string(d.join(enc[0]["segmentation"].as_str().unwrap())).unwrap()).unwrap();
    assert_eq!(seg.levels.len(), 4);

    // a query frame duplicated from the database comes back first with s = 0
    let q = json_lines(&ok(d, &args(&with(&["query", "--data", "data/room0/db", "--frame", "3", "--variant", "R", "--k", "7"]))));
    assert_eq!(q[0]["hits"].as_array().unwrap().len(), 7);
    assert_eq!(q[0]["hits"][0]["frame_id"], "room0/db/frame-000003");
    assert_eq!(q[0]["hits"][0]["s"], 0.0);
    let ranks: Vec<f64> = q[0]["hits"].as_array().unwrap().iter().map(|h| h["s"].as_f64().unwrap()).collect();
    assert!(ranks.windows(2).all(|w| w[0] >= w[1]));

    // signature queries: DR keeps the top hit first, VDR needs frames
    let sp = d.join(enc[1]["signature"].as_str().unwrap()).display().to_string();
    let dr = json_lines(&ok(d, &args(&with(&["query", "--signature", &sp, "--variant", "DR", "--diversify", "3,,,2", "--dump-kernel", "kernels.txt"]))));
    assert_eq!(dr[0]["diversified"].as_array().unwrap().len(), 3);
    assert_eq!(dr[0]["diversified"][0]["frame_id"], dr[0]["hits"][0]["frame_id"]);
    assert!(std::fs::read_to_string(d.join("kernels.txt")).unwrap().contains("scenesig-dpp-kernel 20"));
    assert_eq!(run(d, &args(&with(&["query", "--signature", &sp, "--variant", "VDR"]))).status.code(), Some(2));

    // VDR on held-out frames reports validations
    let v = json_lines(&ok(d, &args(&with(&["query", "--data", "data/room1/queries", "--variant", "VDR"]))));
    assert_eq!(v.len(), 3);
    assert!(v.iter().all(|r| !r["validations"].as_array().unwrap().is_empty()));

    // evaluation: JSON lines plus a summary record per variant, R and DR share top-1
    let out = ok(d, &args(&with(&["evaluate", "--data", "data/room0/queries", "data/room1/queries", "--variant", "R,DR,VDR"])));
    let recs = json_lines(&out);
    assert_eq!(recs.len(), 3 * 7);
    let summaries: Vec<&Value> = recs.iter().filter(|r| r["summary"] == true).collect();
    assert_eq!(summaries.len(), 3);
    for s in &summaries {
        let a = s["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a));
    }
    for i in 0..6 {
        assert_eq!(recs[i]["top_result"], recs[7 + i]["top_result"]);
    }
    let table = ok(d, &args(&with(&["evaluate", "--data", "data/room1/queries", "--variant", "R", "--sparsity", "4", "--report", "rep.jsonl"])));
    assert!(table.contains("database entries: 6 (1/4 sparsity)"), "{table}");
    assert_eq!(json_lines(&std::fs::read_to_string(d.join("rep.jsonl")).unwrap()).len(), 4);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let code = |args: &[&str]| run(d, args).status.code();
    // usage and configuration errors
    assert_eq!(code(&["query", "--variant", "X"]), Some(2));
    assert_eq!(code(&["query", "--diversify", "0"]), Some(2));
    assert_eq!(code(&["query", "--diversify", "2,-1"]), Some(2));
    assert_eq!(code(&["--config", "missing.toml", "db", "stats"]), Some(2));
    std::fs::write(d.join("bad.toml"), "k_dpp = 0\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "db", "stats"]), Some(2));
    std::fs::write(d.join("unknown.toml"), "colour = 1\n").unwrap();
    assert_eq!(code(&["--config", "unknown.toml", "db", "stats"]), Some(2));
    assert_eq!(code(&["db", "stats"]), Some(2));
    assert_eq!(code(&["synth", "--out", "x", "--noise", "-1"]), Some(2));
    // data errors
    std::fs::write(d.join("junk.bin"), b"not a database").unwrap();
    assert_eq!(code(&["db", "stats", "junk.bin"]), Some(3));
    ok(d, &["synth", "--out", "data", "--db-frames", "2", "--queries", "1"]);
    let out = run(d, &["--desk", "train-gmm", "--data", "data/room0/db", "--ica", "nowhere/ica.bin", "--out", "g.bin"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/ica.bin"));
    assert_eq!(code(&["--desk", "train-ica", "--data", "empty-dir-that-is-missing", "--out", "i.bin"]), Some(3));
    assert_eq!(code(&["--help"]), Some(0));
}

#[test]
fn synth_from_scene_file_and_clusters() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "a", "--db-frames", "3", "--queries", "1"]);
    let scene = d.join("a/room0/scene.txt");
    let s = scene.display().to_string();
    let out = json_lines(&ok(d, &["synth", "--out", "b", "--scene", &s, "--db-frames", "4", "--queries", "2"]));
    assert_eq!(out[0]["scenes"][0], "scene");
    let n = std::fs::read_dir(d.join("b/scene/db")).unwrap().filter(|e| e.as_ref().unwrap().path().to_string_lossy().ends_with(".depth.png")).count();
    assert_eq!(n, 4);
    let out = json_lines(&ok(d, &["synth", "--out", "c", "--clustered", "3x2", "--queries", "1"]));
    assert_eq!(out[0]["db_frames"], 6);
    assert_eq!(run(d, &["synth", "--out", "c", "--clustered", "3"]).status.code(), Some(2));
    // identical seeds give identical files
    ok(d, &["synth", "--out", "a2", "--db-frames", "3", "--queries", "1"]);
    for f in ["room0/db/frame-000001.depth.png", "room0/db/frame-000001.pose.txt", "room0/scene.txt"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("a2").join(f)).unwrap());
    }
}
