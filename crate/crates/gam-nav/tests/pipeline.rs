//! End-to-end pipeline tests through the CLI binary: stage wiring,
//! artifact formats, manifests, exit codes, and deterministic reruns.

use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gam-nav"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        r#"
[explore]
steps = 400

[similarity]
embed_dim = 16
n_pairs = 3000
epochs = 3

[graph]
stride = 5

[agent]
total_steps = 2000
n_workers = 2

[diag]
k_max = 2000
"#,
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_small_budget() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());
    let p = |n: &str| dir.path().join(n);

    let st = bin()
        .args(["explore", "--maze", "small", "--seed", "3"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(p("explore"))
        .status()
        .unwrap();
    assert!(st.success());
    assert!(p("explore/db.jsonl").exists());
    assert!(p("explore/explore.manifest.json").exists());

    let st = bin()
        .args(["train-sim", "--seed", "3"])
        .arg("--db").arg(p("explore/db.jsonl"))
        .arg("--config").arg(&cfg)
        .arg("--out").arg(p("sim"))
        .status()
        .unwrap();
    assert!(st.success());
    assert!(p("sim/sim.ckpt").exists());

    let st = bin()
        .args(["build-graph", "--maze", "small", "--seed", "3"])
        .arg("--db").arg(p("explore/db.jsonl"))
        .arg("--sim").arg(p("sim"))
        .arg("--config").arg(&cfg)
        .arg("--out").arg(p("graph"))
        .status()
        .unwrap();
    assert!(st.success());
    assert!(p("graph/graph.json").exists());
    assert!(p("graph/graph_overlay.csv").exists());
    assert!(p("graph/graph_quality.json").exists());

    let st = bin()
        .args(["train", "--maze", "small", "--variant", "gam", "--seed", "3"])
        .arg("--sim").arg(p("sim"))
        .arg("--graph").arg(p("graph/graph.json"))
        .arg("--config").arg(&cfg)
        .arg("--out").arg(p("agent"))
        .status()
        .unwrap();
    assert!(st.success());
    assert!(p("agent/agent.ckpt").exists());
    let metrics = fs::read_to_string(p("agent/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,update,epsilon,"));
    assert!(metrics.lines().count() > 2);

    let st = bin()
        .args(["eval", "--maze", "small", "--seed", "3"])
        .arg("--agent").arg(p("agent"))
        .arg("--sim").arg(p("sim"))
        .arg("--graph").arg(p("graph/graph.json"))
        .arg("--out").arg(p("eval"))
        .status()
        .unwrap();
    assert!(st.success());
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p("eval/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["report"]["outcomes"].as_array().unwrap().len(), 6);
    assert_eq!(eval["score_window_steps"], 2000);

    let st = bin()
        .args(["diag-converge", "--seed", "3"])
        .arg("--graph").arg(p("graph/graph.json"))
        .arg("--config").arg(&cfg)
        .arg("--out").arg(p("diag"))
        .status()
        .unwrap();
    assert!(st.success());
    let csv = fs::read_to_string(p("diag/converge.csv")).unwrap();
    assert!(csv.starts_with("k,step_gap,gap_to_limit"));

    // manifest hashes match the artifacts on disk
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p("graph/build-graph.manifest.json")).unwrap())
            .unwrap();
    for (name, hash) in manifest["outputs"].as_object().unwrap() {
        let data = fs::read(p("graph").join(name)).unwrap();
        let mut h = <sha2::Sha256 as sha2::Digest>::new();
        sha2::Digest::update(&mut h, &data);
        let got: String = sha2::Digest::finalize(h)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(&got, hash.as_str().unwrap(), "hash mismatch for {name}");
    }
}

#[test]
fn explore_rerun_is_byte_identical() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());
    for out in ["a", "b"] {
        let st = bin()
            .args(["explore", "--maze", "small", "--seed", "11"])
            .arg("--config").arg(&cfg)
            .arg("--out").arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(st.success());
    }
    let a = fs::read(dir.path().join("a/db.jsonl")).unwrap();
    let b = fs::read(dir.path().join("b/db.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn blind_db_omits_poses_and_skips_oracle_outputs() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());
    let st = bin()
        .args(["explore", "--maze", "small", "--blind", "--seed", "5"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(dir.path().join("explore"))
        .status()
        .unwrap();
    assert!(st.success());
    let db = fs::read_to_string(dir.path().join("explore/db.jsonl")).unwrap();
    assert!(!db.contains("pose"));

    let st = bin()
        .args(["train-sim", "--seed", "5"])
        .arg("--db").arg(dir.path().join("explore/db.jsonl"))
        .arg("--config").arg(&cfg)
        .arg("--out").arg(dir.path().join("sim"))
        .status()
        .unwrap();
    assert!(st.success());

    let st = bin()
        .args(["build-graph", "--maze", "small", "--seed", "5"])
        .arg("--db").arg(dir.path().join("explore/db.jsonl"))
        .arg("--sim").arg(dir.path().join("sim"))
        .arg("--config").arg(&cfg)
        .arg("--out").arg(dir.path().join("graph"))
        .status()
        .unwrap();
    assert!(st.success());
    assert!(dir.path().join("graph/graph.json").exists());
    // oracle outputs need ground-truth poses
    assert!(!dir.path().join("graph/graph_overlay.csv").exists());
    assert!(!dir.path().join("graph/graph_quality.json").exists());
}

#[test]
fn bad_config_exits_2() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[explore]\nnot_a_field = true\n").unwrap();
    let st = bin()
        .args(["explore", "--maze", "small"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn missing_artifact_exits_3() {
    let dir = tempdir().unwrap();
    let st = bin()
        .args(["eval", "--maze", "small"])
        .arg("--agent").arg(dir.path().join("nonexistent"))
        .arg("--out").arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
}

#[test]
fn gam_without_graph_exits_3() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());
    let st = bin()
        .args(["train", "--maze", "small", "--variant", "gam"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
}

#[test]
fn unknown_variant_exits_2() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path());
    let st = bin()
        .args(["train", "--maze", "small", "--variant", "dqn"])
        .arg("--config").arg(&cfg)
        .arg("--out").arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}
