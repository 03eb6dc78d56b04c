use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dgcrf::commands::{crf_oracle, eval_dirs, export_synthetic, gradcheck, infer, write_eval};
use dgcrf::config::{DataSource, RunConfig};
use dgcrf::error::{Error, Result};
use dgcrf::fit::{fit, FitOptions};
use dgcrf::manifest::load_dataset;
use dgcrf_core::trainer::Variant;

#[derive(Parser)]
#[command(name = "dgcrf", version, about = "Stereo-supervised monocular disparity with CRF-coupled adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, a loss log and a run manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// baseline, hall, adv, coupled-d or coupled-gd (default: the
        /// config's value, else coupled-gd).
        #[arg(long)]
        variant: Option<Variant>,
        /// Overrides the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Overrides max_iters from the config.
        #[arg(long)]
        max_iters: Option<u64>,
        /// Progress line every N iterations (0 is silent).
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Predict disparity for one image from a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "pred")]
        out: PathBuf,
        /// Also write preview images and the CRF energy trace.
        #[arg(long)]
        diagnostics: bool,
        /// Accepted for uniformity; inference is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Depth metrics between predicted and ground-truth disparity maps.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Maximum ground-truth depth in meters.
        #[arg(long, default_value_t = 80.0)]
        cap: f64,
        /// Focal length in pixels.
        #[arg(long)]
        focal: f64,
        /// Stereo baseline in meters.
        #[arg(long)]
        baseline_m: f64,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Accepted for uniformity; evaluation is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference gradient checks of every primitive and the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean-field against the exact solution on a random instance.
    CrfOracle {
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        /// Write the per-iteration trace as CSV into --out.
        #[arg(long)]
        diagnostics: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write the synthetic corpus of a config to disk with a manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        /// Overrides the data seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn config_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            variant,
            seed,
            out,
            resume,
            max_iters,
            log_every,
        } => {
            let text = config_text(&config)?;
            let mut run = RunConfig::load(&config)?;
            if let Some(s) = seed {
                run.train.seed = s;
            }
            if let Some(m) = max_iters {
                run.train.max_iters = m;
            }
            let variant = variant.or(run.variant).unwrap_or(Variant::CoupledGD);
            run.variant = Some(variant);
            run.train.validate()?;
            let dataset = load_dataset(&run.data)?;
            let mut opts = FitOptions::new(&out, variant);
            opts.resume = resume;
            opts.log_every = log_every;
            let result = fit(&run, &text, &dataset, &opts)?;
            println!(
                "trained {variant} from iteration {} to {}; outputs in {}",
                result.started_at,
                result.state.iteration,
                out.display()
            );
            Ok(true)
        }
        Command::Infer {
            checkpoint,
            image,
            out,
            diagnostics,
            seed: _,
        } => {
            let r = infer(&checkpoint, &image, &out, diagnostics)?;
            let d = r.prediction.disparity();
            println!("disparity range [{:.4}, {:.4}]", d.min_value(), d.max_value());
            for p in r.written {
                println!("wrote {}", p.display());
            }
            Ok(true)
        }
        Command::Eval {
            pred,
            gt,
            cap,
            focal,
            baseline_m,
            out,
            seed: _,
        } => {
            let report = eval_dirs(&pred, &gt, cap, focal, baseline_m)?;
            write_eval(&report, &out)?;
            print!("{}", report.to_csv());
            Ok(true)
        }
        Command::Gradcheck { seed } => {
            let cases = gradcheck(seed)?;
            for c in &cases {
                println!(
                    "{:<32} {:>10.3e}  tol {:.0e}  {}",
                    c.name,
                    c.max_rel_error,
                    c.tolerance,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            let worst = cases
                .iter()
                .max_by(|a, b| (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance)))
                .expect("suite is not empty");
            println!("worst: {} ({:.3e})", worst.name, worst.max_rel_error);
            Ok(cases.iter().all(|c| c.passed()))
        }
        Command::CrfOracle {
            size,
            seed,
            iterations,
            diagnostics,
            out,
        } => {
            let c = crf_oracle(size, seed, iterations)?;
            println!("iteration,energy,sup_diff");
            let mut csv = String::from("iteration,energy,sup_diff\n");
            for (t, e) in c.energies.iter().enumerate() {
                let diff = if t == 0 { String::new() } else { format!("{:?}", c.sup_diffs[t - 1]) };
                let row = format!("{t},{e:?},{diff}");
                println!("{row}");
                csv.push_str(&row);
                csv.push('\n');
            }
            println!("max |mean-field - exact| = {:e}", c.max_diff);
            println!("exact fixed-point gap    = {:e}", c.fixed_point_gap);
            println!("exact residual           = {:e}", c.exact_residual);
            if diagnostics {
                std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
                let p = out.join(format!("crf_oracle_{size}_{seed}.csv"));
                std::fs::write(&p, csv).map_err(|source| Error::Io { path: p.clone(), source })?;
            }
            // Mean-field never increases the energy, and the exact solution
            // must be a fixed point of the update.
            let monotone = c
                .energies
                .windows(2)
                .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
            let ok = monotone && c.fixed_point_gap < 1e-10;
            if !ok {
                eprintln!("oracle assertions failed (monotone energy: {monotone})");
            }
            Ok(ok)
        }
        Command::Synth { config, out, seed } => {
            let run = RunConfig::load(&config)?;
            let DataSource::Synthetic(mut recipe) = run.data else {
                return Err(Error::Mismatch(format!("{} does not describe a synthetic corpus", config.display())));
            };
            if let Some(s) = seed {
                recipe.seed = s;
            }
            let manifest = export_synthetic(&recipe, &out)?;
            println!("wrote {} samples; manifest {}", recipe.count, manifest.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
