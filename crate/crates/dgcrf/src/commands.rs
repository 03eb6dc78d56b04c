//! Command bodies shared by the binary and the tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dgcrf_core::crf::{build_kernels, compare, meanfield_iterate, random_instance, OracleComparison};
use dgcrf_core::data::{synth_dataset, SynthRecipe};
use dgcrf_core::gradsuite::{run_suite, CaseResult};
use dgcrf_core::metrics::{disparity_to_depth, evaluate};
use dgcrf_core::trainer::{predict, Prediction};
use dgcrf_core::{Rng, Tensor};

use crate::checkpoint;
use crate::error::{create_dir, io_err, write_atomic, Error, Result};
use crate::manifest::as_rgb;
use crate::pnm::{load_disparity, load_image, save_disparity, save_image};
use crate::report::{aggregate, EvalReport};

/// Subdirectories written by [`infer`].
pub const DISPARITY_DIR: &str = "disparity";
pub const GENERATOR_DIR: &str = "generator";
pub const HALLUCINATED_DIR: &str = "hallucinated";
pub const FUSED_DIR: &str = "fused";
pub const DIAGNOSTICS_DIR: &str = "diagnostics";

pub struct InferOutput {
    pub prediction: Prediction,
    pub written: Vec<PathBuf>,
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

/// Disparity normalized by `d_max` as an 8-bit gray image, for figures.
fn preview(d: &Tensor, d_max: f64) -> Result<Tensor> {
    let s = d.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok(Tensor::new(&[1, h, w], d.data().iter().map(|v| v / d_max).collect())?)
}

/// Monocular inference on one image. Only the given image is read.
///
/// Writes `disparity/<stem>.pgm` (the final map), `generator/<stem>.pgm`,
/// and, when present, `hallucinated/<stem>.pgm` and `fused/<stem>.pgm`.
/// With `diagnostics`, also writes 8-bit previews and the per-iteration CRF
/// trace under `diagnostics/`.
pub fn infer(ckpt_path: &Path, image_path: &Path, out_dir: &Path, diagnostics: bool) -> Result<InferOutput> {
    let ck = checkpoint::load(ckpt_path)?;
    let mut image = load_image(image_path)?;
    if ck.state.spec.image_channels == 3 {
        image = as_rgb(image)?;
    }
    let s = image.shape().to_vec();
    if s[0] != ck.state.spec.image_channels || s[1] != ck.height || s[2] != ck.width {
        return Err(Error::Mismatch(format!(
            "{} is {}x{} with {} channels; {} expects {}x{} with {}",
            image_path.display(),
            s[1],
            s[2],
            s[0],
            ckpt_path.display(),
            ck.height,
            ck.width,
            ck.state.spec.image_channels
        )));
    }
    let batch = image.reshape(&[1, s[0], s[1], s[2]])?;
    let prediction = predict(&ck.state, &batch, ck.variant)?;
    let name = stem(image_path);
    let mut written = Vec::new();
    let mut put = |dir: &str, t: &Tensor| -> Result<()> {
        let d = out_dir.join(dir);
        create_dir(&d)?;
        let p = d.join(format!("{name}.pgm"));
        save_disparity(&p, t)?;
        written.push(p);
        Ok(())
    };
    put(DISPARITY_DIR, prediction.disparity())?;
    put(GENERATOR_DIR, &prediction.d_a)?;
    if let Some(h) = &prediction.d_h {
        put(HALLUCINATED_DIR, h)?;
    }
    if let Some(f) = &prediction.fused {
        put(FUSED_DIR, f)?;
    }
    if diagnostics {
        let dir = out_dir.join(DIAGNOSTICS_DIR);
        create_dir(&dir)?;
        let d_max = ck.state.spec.d_max(ck.width);
        let maps = [
            ("generator", Some(&prediction.d_a)),
            ("hallucinated", prediction.d_h.as_ref()),
            ("fused", prediction.fused.as_ref()),
        ];
        for (label, map) in maps {
            if let Some(m) = map {
                let p = dir.join(format!("{name}_{label}.pgm"));
                save_image(&p, &preview(m, d_max)?)?;
                written.push(p);
            }
        }
        if let (Some(d_h), Some(_)) = (&prediction.d_h, &prediction.fused) {
            let params = ck.state.crf_params()?;
            let bank = build_kernels(&image, &params)?;
            let (_, trace) = meanfield_iterate(&prediction.d_a, d_h, &bank, &params.weights(), params.iterations)?;
            let mut csv = String::from("iteration,energy,sup_diff\n");
            for (t, e) in trace.energies.iter().enumerate() {
                let diff = if t == 0 { String::new() } else { format!("{:?}", trace.sup_diffs[t - 1]) };
                writeln!(csv, "{t},{e:?},{diff}").expect("string write");
            }
            let p = dir.join(format!("{name}_crf.csv"));
            write_atomic(&p, csv.as_bytes())?;
            written.push(p);
        }
    }
    Ok(InferOutput { prediction, written })
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

/// Compares predicted against ground-truth disparity maps (16-bit PGMs,
/// paired by sorted file name) in depth space.
pub fn eval_dirs(pred_dir: &Path, gt_dir: &Path, cap: f64, focal_px: f64, baseline_m: f64) -> Result<EvalReport> {
    let preds = pgm_files(pred_dir)?;
    let gts = pgm_files(gt_dir)?;
    if preds.len() != gts.len() {
        return Err(Error::Mismatch(format!(
            "{} holds {} maps but {} holds {}",
            pred_dir.display(),
            preds.len(),
            gt_dir.display(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Mismatch(format!("no .pgm files in {}", pred_dir.display())));
    }
    let mut per_image = Vec::new();
    for (p, g) in preds.iter().zip(&gts) {
        let pred = load_disparity(p)?;
        let gt = load_disparity(g)?;
        if pred.shape() != gt.shape() {
            return Err(Error::Mismatch(format!(
                "{} is {:?} but {} is {:?}",
                p.display(),
                pred.shape(),
                g.display(),
                gt.shape()
            )));
        }
        let pred_depth = disparity_to_depth(&pred, focal_px, baseline_m);
        // Zero disparity marks missing ground truth; it maps to depth 0,
        // which evaluation treats as invalid.
        let gt_depth: Vec<f64> = disparity_to_depth(&gt, focal_px, baseline_m)
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&z, &d)| if d > 0.0 { z } else { 0.0 })
            .collect();
        let r = evaluate(pred_depth.data(), &gt_depth, cap, None)
            .map_err(|e| Error::Mismatch(format!("{}: {e}", g.display())))?;
        per_image.push((stem(g), r));
    }
    let reports: Vec<_> = per_image.iter().map(|(_, r)| r.clone()).collect();
    Ok(EvalReport {
        aggregate: aggregate(&reports).expect("non-empty"),
        per_image,
    })
}

pub fn write_eval(report: &EvalReport, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let json = serde_json::to_string_pretty(&report.to_json())?;
    write_atomic(&out_dir.join("metrics.json"), json.as_bytes())?;
    write_atomic(&out_dir.join("metrics.csv"), report.to_csv().as_bytes())
}

pub fn gradcheck(seed: u64) -> Result<Vec<CaseResult>> {
    Ok(run_suite(seed)?)
}

/// Mean-field against the exact solve on one random `size x size` instance.
pub fn crf_oracle(size: usize, seed: u64, iterations: usize) -> Result<OracleComparison> {
    let inst = random_instance(size, size, &mut Rng::new(seed))?;
    Ok(compare(&inst, iterations)?)
}

/// Writes a synthetic corpus as PPM pairs plus 16-bit disparities and a
/// manifest.
pub fn export_synthetic(recipe: &SynthRecipe, out_dir: &Path) -> Result<PathBuf> {
    create_dir(out_dir)?;
    let mut manifest = String::new();
    for (k, s) in synth_dataset(recipe)?.iter().enumerate() {
        let (l, r, d) = (format!("{k:05}_l.ppm"), format!("{k:05}_r.ppm"), format!("{k:05}_d.pgm"));
        save_image(&out_dir.join(&l), &s.left)?;
        save_image(&out_dir.join(&r), &s.right)?;
        if let Some(gt) = &s.gt_disparity {
            save_disparity(&out_dir.join(&d), gt)?;
            writeln!(manifest, "{l}\t{r}\t{d}").expect("string write");
        } else {
            writeln!(manifest, "{l}\t{r}").expect("string write");
        }
    }
    let path = out_dir.join("manifest.tsv");
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}
