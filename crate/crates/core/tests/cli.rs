//! The command-line front end, driven in process.

use std::path::{Path, PathBuf};

use ssgnet::cli::run;
use ssgnet::io::{load_image, load_raw_maps, save_rgb_png, Checkpoint};
use ssgnet::synthetic::scene;
use ssgnet::{SsgConfig, SsgNet};

fn ssgnet(args: &[&str]) -> i32 {
    run(std::iter::once("ssgnet").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scenes_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/scenes")
}

fn checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("net.ssgn");
    Checkpoint::from_model(&SsgNet::<f32>::new(SsgConfig::default(), 1).unwrap(), None)
        .save(&path)
        .unwrap();
    path
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(ssgnet(&[]), 2);
    assert_eq!(ssgnet(&["frobnicate"]), 2);
    assert_eq!(ssgnet(&["train", "--data"]), 2);
    assert_eq!(ssgnet(&["version"]), 0);
    assert_eq!(ssgnet(&["--help"]), 0);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ssgnet(&["graph", s(&dir.path().join("missing.png"))]), 1);
    let mut bytes = b"SSGN".to_vec();
    bytes.extend_from_slice(&9u32.to_le_bytes());
    let bad = dir.path().join("v9.ssgn");
    std::fs::write(&bad, bytes).unwrap();
    let img = scenes_dir().join("scene_0.png");
    assert_eq!(ssgnet(&["infer", "--checkpoint", s(&bad), s(&img), "-o", s(dir.path())]), 1);
}

#[test]
fn graph_writes_matrix_market() {
    let dir = tempfile::tempdir().unwrap();
    let mtx = dir.path().join("l.mtx");
    let img = scenes_dir().join("scene_1.png");
    assert_eq!(ssgnet(&["graph", s(&img), "--k", "6", "--mtx", s(&mtx)]), 0);
    let text = std::fs::read_to_string(&mtx).unwrap();
    assert!(text.starts_with("%%MatrixMarket matrix coordinate real"));
    assert_eq!(ssgnet(&["graph", s(&img), "--kind", "affinity", "--mtx", s(&mtx)]), 0);
}

#[test]
fn eigs_writes_reference_maps() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("small.png");
    save_rgb_png(&scene::<f32>(3, 16, 20, 2), &img).unwrap();
    let out = dir.path().join("eigs");
    assert_eq!(ssgnet(&["eigs", s(&img), "-o", s(&out), "--n-eigen", "3"]), 0);
    let maps = load_raw_maps(out.join("eig.ssgm")).unwrap();
    assert_eq!(maps.maps.shape(), &[1, 3, 16, 20]);
    for k in 0..3 {
        assert!(out.join(format!("eig_{k}.png")).exists());
    }
}

#[test]
fn infer_pads_and_crops_odd_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("odd.png");
    save_rgb_png(&scene::<f32>(2, 255, 255, 4), &img).unwrap();
    let ck = checkpoint(dir.path());
    let out = dir.path().join("maps");
    assert_eq!(ssgnet(&["infer", "--checkpoint", s(&ck), s(&img), "-o", s(&out)]), 0);
    let maps = load_raw_maps(out.join("map.ssgm")).unwrap();
    assert_eq!(maps.maps.shape(), &[1, 3, 255, 255]);
    let (sum_err, min) = maps.simplex_error();
    assert!(sum_err <= 1e-6 && min >= 0.0);
    assert_eq!(load_image::<f32>(out.join("map_0.png")).unwrap().shape(), &[3, 255, 255]);
}

#[test]
fn fuse_checks_weight_count() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(dir.path());
    let img = scenes_dir().join("scene_2.png");
    let out = dir.path().join("fused.png");
    assert_eq!(ssgnet(&["fuse", "--checkpoint", s(&ck), s(&img), "-o", s(&out), "--weights", "1,0,0"]), 0);
    assert_eq!(load_image::<f32>(&out).unwrap().shape(), &[3, 64, 64]);
    assert_eq!(ssgnet(&["fuse", "--checkpoint", s(&ck), s(&img), "-o", s(&out), "--weights", "1,0"]), 1);
    assert_eq!(ssgnet(&["fuse", "--checkpoint", s(&ck), s(&img), "-o", s(&out)]), 0);
}

#[test]
fn short_training_run_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let data = scenes_dir();
    let args = [
        "train", "--data", s(&data), "-o", s(&out), "--steps", "3", "--batch", "2", "--resolution", "16",
        "--crop-mode", "center", "--checkpoint-every", "2",
    ];
    assert_eq!(ssgnet(&args), 0);
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "step,l_eigen,l_spatial,l_ssg,wall_ms");
    assert_eq!(lines.len(), 4);
    assert!(out.join("step_000002.ssgn").exists());
    let ck = Checkpoint::load(out.join("final.ssgn")).unwrap();
    assert_eq!(ck.to_adam().unwrap().unwrap().step, 3);
    assert_eq!(ck.to_model().unwrap().param_count(), 54_435);
}

#[test]
fn invalid_loss_settings_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let data = scenes_dir();
    let base = ["train", "--data", s(&data), "-o", s(&out), "--steps", "1", "--resolution", "8"];
    assert_eq!(ssgnet(&[&base[..], &["--gamma", "1.5"]].concat()), 1);
    assert_eq!(ssgnet(&[&base[..], &["--lambda=-1"]].concat()), 1);
}
