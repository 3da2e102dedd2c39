mod common;

use std::process::Command;

use common::{cli, path_str};
use serde_json::Value;

fn json(s: &str) -> Value {
    serde_json::from_str(s.trim()).unwrap_or_else(|e| panic!("not JSON ({e}): {s}"))
}

fn synth(dir: &std::path::Path, frames: usize) {
    let (code, _, err) = cli(&["synth-data", "--out", &path_str(dir), "--frames", &frames.to_string(), "--width", "32", "--height", "32", "--seed", "3"]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn eval_of_an_image_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let frame = path_str(&degs::dataset::frame_path(dir.path(), 0));
    let (code, out, err) = cli(&["eval", "--a", &frame, "--b", &frame]);
    assert_eq!(code, 0, "{err}");
    let v = json(&out);
    assert_eq!(v["ssim"], 1.0);
    assert_eq!(v["psnr"], "inf");
}

#[test]
fn gradcheck_small_scene_passes() {
    let (code, out, err) = cli(&["gradcheck", "--seed", "7", "--splats", "5", "--scenes", "2"]);
    assert_eq!(code, 0, "{err}");
    let v = json(&out);
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-3);
}

#[test]
fn motion_without_a_static_checkpoint_is_a_prerequisite_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"), 2);
    let (code, out, err) = cli(&[
        "train", "--stage", "motion", "--dataset", &path_str(&dir.path().join("data")), "--out", &path_str(&dir.path().join("run")),
    ]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert_eq!(json(&err)["error"], "prerequisite");
}

#[test]
fn finetune_after_static_only_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = path_str(&dir.path().join("data"));
    let run = path_str(&dir.path().join("run"));
    synth(&dir.path().join("data"), 2);
    let (code, _, err) = cli(&["train", "--stage", "static", "--dataset", &data, "--out", &run, "--iters", "2"]);
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = cli(&["train", "--stage", "finetune", "--dataset", &data, "--out", &run, "--iters", "2"]);
    assert_eq!(code, 1);
    assert_eq!(json(&err)["error"], "prerequisite");
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [&["train", "--bogus"][..], &["no-such-command"][..], &["eval"][..], &["train", "--stage", "sideways"][..]] {
        let (code, _, err) = cli(args);
        assert_eq!(code, 2, "{args:?}");
        assert_eq!(json(&err)["error"], "usage");
    }
}

#[test]
fn bad_config_is_reported_as_config() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"), 1);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[loss]\nlamda = 0.5\n").unwrap();
    let (code, _, err) = cli(&[
        "train", "--stage", "static", "--config", &path_str(&cfg), "--dataset", &path_str(&dir.path().join("data")), "--out",
        &path_str(&dir.path().join("run")),
    ]);
    assert_eq!(code, 1);
    assert_eq!(json(&err)["error"], "config");
}

#[test]
fn inspect_surfaces_shapes_and_stages() {
    let dir = tempfile::tempdir().unwrap();
    let data = path_str(&dir.path().join("data"));
    let run = dir.path().join("run");
    synth(&dir.path().join("data"), 1);
    let (code, _, err) = cli(&["train", "--stage", "static", "--dataset", &data, "--out", &path_str(&run), "--iters", "1"]);
    assert_eq!(code, 0, "{err}");
    let ckpt = path_str(&run.join("checkpoint.degs"));
    let (code, out, _) = cli(&["inspect-ckpt", &ckpt]);
    assert_eq!(code, 0);
    for needle in ["version = 1", "completed_stages = static", "face.embedding_dim = 32", "mouth.splats = 150"] {
        assert!(out.contains(needle), "missing `{needle}` in\n{out}");
    }
    let (code, text, _) = cli(&["inspect-ckpt", "--text", &ckpt]);
    assert_eq!(code, 0);
    assert!(text.starts_with("DEGS-TEXT 1"));
}

#[test]
fn missing_checkpoint_file_is_an_io_error() {
    let (code, _, err) = cli(&["inspect-ckpt", "/nonexistent/ckpt.degs"]);
    assert_eq!(code, 1);
    assert_eq!(json(&err)["error"], "io");
}

#[test]
fn binary_exit_codes_match() {
    let bin = env!("CARGO_BIN_EXE_degs");
    let st = Command::new(bin).args(["gradcheck", "--nope"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    let st = Command::new(bin).args(["inspect-ckpt", "/nonexistent"]).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    let st = Command::new(bin).args(["--help"]).output().unwrap();
    assert_eq!(st.status.code(), Some(0));
}
