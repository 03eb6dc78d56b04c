use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use dgcrf::checkpoint;
use dgcrf::pnm::{load_disparity, save_disparity, save_image};
use dgcrf_core::Tensor;

const TINY: &str = "\
[model]
encoder = 8, 16
shared_depth = 2
hall_encoder = 4
disc = 8

[crf]
window = 5
iterations = 2

[train]
lr = 0.01
batch_size = 2
max_iters = 20
checkpoint_every = 10
seed = 4

[data]
width = 32
height = 16
law = constant
disparity = 2
d_max = 3
count = 8
";

fn dgcrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgcrf")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(dir: &Path, variant: &str) -> std::path::PathBuf {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.join(format!("run-{variant}"));
    let o = dgcrf(&["train", "--config", s(&cfg), "--variant", variant, "--out", s(&out), "--log-every", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn missing_config_prints_usage() {
    let o = dgcrf(&["train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = dgcrf(&["train", "--config", "/nonexistent/run.cfg"]);
    assert!(!o.status.success());
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[train]\nlr = 0.1\nmomentun = 0.9\n").unwrap();
    let o = dgcrf(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.cfg:3"), "{err}");
}

#[test]
fn smoke_train_writes_artifacts_and_records_variant() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let out = train_tiny(dir.path(), "coupled-d");
    assert!(t.elapsed().as_secs() < 60);
    let manifest = std::fs::read_to_string(out.join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("variant = coupled-d"));
    assert!(manifest.contains("seed = 4"));
    assert!(manifest.contains("config_sha256_blob = "));
    let losses = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 21);
    assert!(out.join("checkpoints/ckpt_00000010.bin").exists());
    let ck = checkpoint::load(&out.join("checkpoints/latest.bin")).unwrap();
    assert_eq!(ck.state.iteration, 20);
    assert_eq!(ck.variant.to_string(), "coupled-d");
}

#[test]
fn monocular_inference_reads_one_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "coupled-gd");
    // A directory holding only the input image: no right view exists.
    let solo = dir.path().join("solo");
    std::fs::create_dir(&solo).unwrap();
    let img = solo.join("zero.ppm");
    save_image(&img, &Tensor::zeros(&[3, 16, 32])).unwrap();
    let pred = dir.path().join("pred");
    let ckpt = out.join("checkpoints/latest.bin");
    let o = dgcrf(&["infer", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&pred), "--diagnostics"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&solo).unwrap().count(), 1);
    let d_max = 0.3 * 32.0;
    for sub in ["disparity", "generator", "hallucinated", "fused"] {
        let d = load_disparity(&pred.join(sub).join("zero.pgm")).unwrap();
        assert_eq!(d.shape(), &[1, 16, 32]);
        assert!(d.data().iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= d_max));
    }
    let trace = std::fs::read_to_string(pred.join("diagnostics/zero_crf.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 1 + 2);

    let wrong = solo.join("wrong.ppm");
    save_image(&wrong, &Tensor::zeros(&[3, 16, 16])).unwrap();
    let o = dgcrf(&["infer", "--checkpoint", s(&ckpt), "--image", s(&wrong), "--out", s(&pred)]);
    assert!(!o.status.success());
}

fn write_maps(dir: &Path, maps: &[(&str, Vec<f64>)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (name, v) in maps {
        let t = Tensor::new(&[1, 1, v.len()], v.clone()).unwrap();
        save_disparity(&dir.join(format!("{name}.pgm")), &t).unwrap();
    }
}

fn eval_json(pred: &Path, gt: &Path, out: &Path, cap: &str) -> serde_json::Value {
    // f = 2, B = 1: depth = 2 / disparity.
    let o = dgcrf(&[
        "eval", "--pred", s(pred), "--gt", s(gt), "--cap", cap, "--focal", "2", "--baseline-m", "1", "--out", s(out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn eval_matches_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    let (p, g) = (dir.path().join("p"), dir.path().join("g"));
    // Depth pred [2, 2] vs gt [1, 4]: disparities [1, 1] and [2, 0.5].
    write_maps(&p, &[("a", vec![1.0, 1.0]), ("b", vec![0.5, 2.0])]);
    write_maps(&g, &[("a", vec![2.0, 0.5]), ("b", vec![0.5, 2.0])]);
    let v = eval_json(&p, &g, &dir.path().join("e"), "80");
    assert_eq!(v["images"]["a"]["rel"], 0.75);
    assert_eq!(v["images"]["a"]["d1"], 0.0);
    assert_eq!(v["images"]["b"]["rel"], 0.0);
    assert_eq!(v["images"]["b"]["d1"], 1.0);
    assert_eq!(v["aggregate"]["rel"], 0.375);
    let csv = std::fs::read_to_string(dir.path().join("e/metrics.csv")).unwrap();
    assert!(csv.starts_with("name,rel,sq_rel,rms,rms_log,log10,d1,d2,d3"));

    // Cap 3 m drops the 4 m pixel, leaving the exact one.
    let v = eval_json(&p, &g, &dir.path().join("e3"), "3");
    assert_eq!(v["images"]["a"]["rel"], 1.0);
    assert_eq!(v["images"]["a"]["valid_pixels"], 1);

    let v = eval_json(&g, &g, &dir.path().join("same"), "80");
    assert_eq!(v["aggregate"]["rel"], 0.0);
}

#[test]
fn eval_rejects_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (p, g) = (dir.path().join("p"), dir.path().join("g"));
    write_maps(&p, &[("a", vec![1.0])]);
    write_maps(&g, &[("a", vec![1.0]), ("b", vec![1.0])]);
    let o = dgcrf(&["eval", "--pred", s(&p), "--gt", s(&g), "--focal", "1", "--baseline-m", "1"]);
    assert!(!o.status.success());
}

#[test]
fn self_checks_exit_cleanly() {
    let o = dgcrf(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("worst:"));
    let dir = tempfile::tempdir().unwrap();
    let o = dgcrf(&["crf-oracle", "--size", "8", "--seed", "5", "--diagnostics", "--out", s(dir.path())]);
    assert!(o.status.success());
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("max |mean-field - exact|"));
    assert!(dir.path().join("crf_oracle_8_5.csv").exists());
}

#[test]
fn synthetic_export_loads_back_through_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("corpus");
    let o = dgcrf(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success());
    let samples = dgcrf::manifest::load_manifest(&out.join("manifest.tsv")).unwrap();
    assert_eq!(samples.len(), 8);
    assert_eq!(samples[0].gt_disparity.as_ref().unwrap().data()[0], 2.0);
}
