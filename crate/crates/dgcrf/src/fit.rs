//! Training runs on disk: run manifest, loss log, periodic checkpoints and
//! resume.
//!
//! Output directory layout:
//!
//! ```text
//! run_manifest.txt         resolved config, seed, variant, config hash
//! losses.csv               one row per completed iteration
//! checkpoints/ckpt_<iteration>.bin
//! checkpoints/latest.bin
//! ```

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dgcrf_core::data::StereoSample;
use dgcrf_core::networks::ModelState;
use dgcrf_core::objectives::LossReport;
use dgcrf_core::trainer::{Trainer, Variant};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{create_dir, io_err, read_text, write_atomic, Error, Result};
use crate::hash::blob_hash;

pub const MANIFEST_FILE: &str = "run_manifest.txt";
pub const LOSS_FILE: &str = "losses.csv";

pub struct FitOptions {
    pub out_dir: PathBuf,
    pub variant: Variant,
    /// Continue from `checkpoints/latest.bin` when it exists.
    pub resume: bool,
    /// Stop early at this iteration instead of `max_iters`.
    pub stop_at: Option<u64>,
    /// Print a progress line every this many iterations (0 disables).
    pub log_every: u64,
}

impl FitOptions {
    pub fn new(out_dir: impl Into<PathBuf>, variant: Variant) -> Self {
        Self {
            out_dir: out_dir.into(),
            variant,
            resume: false,
            stop_at: None,
            log_every: 0,
        }
    }
}

pub struct FitResult {
    pub state: ModelState,
    /// Reports produced by this invocation only.
    pub reports: Vec<LossReport>,
    /// Iteration training started from (non-zero after a resume).
    pub started_at: u64,
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn latest_checkpoint(out: &Path) -> PathBuf {
    checkpoint_dir(out).join("latest.bin")
}

pub fn run_manifest(run: &RunConfig, config_text: &str, variant: Variant) -> String {
    format!(
        "variant = {variant}\nseed = {}\nconfig_sha256_blob = {}\n\n# resolved configuration\n{}",
        run.train.seed,
        blob_hash(config_text.as_bytes()),
        run.to_text()
    )
}

/// Keeps the header and every row whose iteration is below `before`.
fn truncate_losses(path: &Path, before: u64) -> Result<()> {
    let text = read_text(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|it| it < before);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

/// Trains `dataset` per `run`, writing artifacts under `opts.out_dir`.
/// `config_text` is the file the run was configured from; only its hash is
/// recorded.
pub fn fit(run: &RunConfig, config_text: &str, dataset: &[StereoSample], opts: &FitOptions) -> Result<FitResult> {
    let out = &opts.out_dir;
    let ckpt_dir = checkpoint_dir(out);
    create_dir(&ckpt_dir)?;
    let first = dataset.first().ok_or(dgcrf_core::Error::EmptyDataset)?;
    let (height, width) = (first.height(), first.width());
    let loss_path = out.join(LOSS_FILE);
    let latest = latest_checkpoint(out);

    let mut state = if opts.resume && latest.exists() {
        let ck = checkpoint::load(&latest)?;
        if ck.variant != opts.variant || ck.seed != run.train.seed || ck.state.spec != run.model {
            return Err(Error::Mismatch(format!(
                "{} was written by a different run (variant {}, seed {})",
                latest.display(),
                ck.variant,
                ck.seed
            )));
        }
        if loss_path.exists() {
            truncate_losses(&loss_path, ck.state.iteration)?;
        } else {
            write_atomic(&loss_path, format!("{}\n", LossReport::CSV_HEADER).as_bytes())?;
        }
        ck.state
    } else {
        write_atomic(&loss_path, format!("{}\n", LossReport::CSV_HEADER).as_bytes())?;
        ModelState::new(run.model.clone(), run.train.seed)?
    };
    write_atomic(
        &out.join(MANIFEST_FILE),
        run_manifest(run, config_text, opts.variant).as_bytes(),
    )?;

    let started_at = state.iteration;
    let until = opts.stop_at.unwrap_or(run.train.max_iters).min(run.train.max_iters);
    let file = OpenOptions::new().append(true).open(&loss_path).map_err(io_err(&loss_path))?;
    let mut log = BufWriter::new(file);
    let mut trainer = Trainer::new(run.train.clone(), opts.variant, dataset)?;
    let mut reports = Vec::new();
    while state.iteration < until {
        let step = trainer.step(&mut state)?;
        writeln!(log, "{}", step.report.csv_row()).map_err(io_err(&loss_path))?;
        let it = state.iteration;
        if opts.log_every > 0 && (it % opts.log_every == 0 || it == until) {
            let r = &step.report;
            eprintln!(
                "iter {it:>6}  rec {:.5}  h {:.5}  gan {:.5}  crf {:.5}  d {:.5}  total {:.5}",
                r.parts.rec, r.parts.h, r.parts.gan, r.parts.crf, r.d_loss, r.total
            );
        }
        reports.push(step.report);
        if it % run.train.checkpoint_every == 0 || it == until {
            // Rows must be on disk before a checkpoint claims them.
            log.flush().map_err(io_err(&loss_path))?;
            let ck = Checkpoint {
                state: state.clone(),
                variant: opts.variant,
                height,
                width,
                seed: run.train.seed,
            };
            let bytes = checkpoint::encode(&ck);
            if it % run.train.checkpoint_every == 0 {
                let path = ckpt_dir.join(format!("ckpt_{it:08}.bin"));
                write_atomic(&path, &bytes)?;
            }
            write_atomic(&latest, &bytes)?;
        }
    }
    log.flush().map_err(io_err(&loss_path))?;
    Ok(FitResult {
        state,
        reports,
        started_at,
    })
}
