use std::path::Path;

use dgcrf::config::RunConfig;
use dgcrf::fit::{fit, latest_checkpoint, FitOptions, LOSS_FILE};
use dgcrf::manifest::load_dataset;
use dgcrf_core::networks::ModelState;
use dgcrf_core::trainer::Variant;

const TINY: &str = "\
[model]
encoder = 4, 8
shared_depth = 1
hall_encoder = 4
disc = 4

[crf]
window = 3
iterations = 2

[train]
lr = 0.01
batch_size = 2
max_iters = 50
checkpoint_every = 25
seed = 9

[data]
width = 16
height = 8
disparity = 2
d_max = 3
count = 6
";

fn bits_equal(a: &ModelState, b: &ModelState) -> bool {
    let same = |x: &std::collections::BTreeMap<String, dgcrf_core::Tensor>,
                y: &std::collections::BTreeMap<String, dgcrf_core::Tensor>| {
        x.len() == y.len()
            && x.iter().all(|(k, t)| {
                y.get(k)
                    .is_some_and(|u| t.data().iter().zip(u.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
            })
    };
    a.iteration == b.iteration && same(&a.params, &b.params) && same(&a.momentum, &b.momentum)
}

fn run(out: &Path, stop_at: Option<u64>, resume: bool) -> ModelState {
    let cfg = RunConfig::parse(TINY, "tiny", Path::new(".")).unwrap();
    let data = load_dataset(&cfg.data).unwrap();
    let mut opts = FitOptions::new(out, Variant::CoupledGD);
    opts.stop_at = stop_at;
    opts.resume = resume;
    fit(&cfg, TINY, &data, &opts).unwrap().state
}

#[test]
fn resumed_run_matches_continuous_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    let a = run(&full, None, false);
    run(&split, Some(25), false);
    let b = run(&split, None, true);
    assert!(bits_equal(&a, &b));
    let la = std::fs::read_to_string(full.join(LOSS_FILE)).unwrap();
    let lb = std::fs::read_to_string(split.join(LOSS_FILE)).unwrap();
    assert_eq!(la.lines().count(), 51);
    assert_eq!(la, lb);
}

#[test]
fn resume_discards_rows_past_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let crash = dir.path().join("crash");
    run(&full, None, false);
    // Log rows reach 40 but the newest checkpoint is the one from step 25.
    run(&crash, Some(40), false);
    std::fs::copy(crash.join("checkpoints/ckpt_00000025.bin"), latest_checkpoint(&crash)).unwrap();
    run(&crash, None, true);
    let la = std::fs::read_to_string(full.join(LOSS_FILE)).unwrap();
    let lb = std::fs::read_to_string(crash.join(LOSS_FILE)).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn resume_refuses_a_different_run() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), Some(25), false);
    let cfg = RunConfig::parse(TINY, "tiny", Path::new(".")).unwrap();
    let data = load_dataset(&cfg.data).unwrap();
    let mut opts = FitOptions::new(dir.path(), Variant::Baseline);
    opts.resume = true;
    assert!(fit(&cfg, TINY, &data, &opts).is_err());
}

#[test]
fn different_seed_changes_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(TINY, "tiny", Path::new(".")).unwrap();
    let data = load_dataset(&cfg.data).unwrap();
    let mut opts = FitOptions::new(dir.path().join("a"), Variant::CoupledGD);
    opts.stop_at = Some(3);
    let a = fit(&cfg, TINY, &data, &opts).unwrap();
    cfg.train.seed = 10;
    opts.out_dir = dir.path().join("b");
    let b = fit(&cfg, TINY, &data, &opts).unwrap();
    assert_ne!(a.reports, b.reports);
}
