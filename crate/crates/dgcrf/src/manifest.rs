//! Tab-separated stereo manifests: `left<TAB>right[<TAB>disparity]` per line.
//!
//! Images are 8-bit PPM/PGM (gray inputs are replicated to three channels),
//! disparities are 16-bit PGMs written by [`crate::pnm::save_disparity`].
//! Relative paths resolve against the manifest's directory. Blank lines and
//! lines starting with `#` are skipped.

use std::path::{Path, PathBuf};

use dgcrf_core::data::{synth_dataset, StereoSample};
use dgcrf_core::Tensor;

use crate::config::DataSource;
use crate::error::{read_text, Error, Result};
use crate::pnm::{load_disparity, load_image};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub left: PathBuf,
    pub right: PathBuf,
    pub disparity: Option<PathBuf>,
}

pub fn parse_manifest(text: &str, base: &Path, origin: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Config {
                path: origin.to_string(),
                line: line_no,
                message: format!("expected 2 or 3 tab-separated paths, found {}", fields.len()),
            });
        }
        out.push(ManifestEntry {
            left: base.join(fields[0]),
            right: base.join(fields[1]),
            disparity: fields.get(2).map(|p| base.join(p)),
        });
    }
    Ok(out)
}

/// Gray images become three identical channels.
pub fn as_rgb(t: Tensor) -> Result<Tensor> {
    match t.shape() {
        &[1, h, w] => {
            let data = t.data().repeat(3);
            Ok(Tensor::new(&[3, h, w], data)?)
        }
        _ => Ok(t),
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<StereoSample>> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, base, &path.display().to_string())?;
    entries
        .iter()
        .map(|e| {
            let left = as_rgb(load_image(&e.left)?)?;
            let right = as_rgb(load_image(&e.right)?)?;
            let gt = e.disparity.as_deref().map(load_disparity).transpose()?;
            StereoSample::new(left, right, gt)
                .map_err(|err| Error::Mismatch(format!("{}: {err}", e.left.display())))
        })
        .collect()
}

/// Materializes a data source, attaching ground-truth depth when the
/// disparity is known.
pub fn load_dataset(source: &DataSource) -> Result<Vec<StereoSample>> {
    let (samples, f, b) = match source {
        DataSource::Synthetic(r) => (synth_dataset(r)?, r.focal_px, r.baseline_m),
        DataSource::Manifest {
            path,
            focal_px,
            baseline_m,
        } => (load_manifest(path)?, *focal_px, *baseline_m),
    };
    Ok(samples.into_iter().map(|s| s.with_depth(f, b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_and_three_columns() {
        let m = parse_manifest("# pairs\nl.ppm\tr.ppm\n\na.ppm\tb.ppm\td.pgm\n", Path::new("/data"), "m").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].left, Path::new("/data/l.ppm"));
        assert_eq!(m[1].disparity.as_deref(), Some(Path::new("/data/d.pgm")));
    }

    #[test]
    fn bad_line_is_located() {
        match parse_manifest("l.ppm\tr.ppm\nonly-one\n", Path::new("."), "m") {
            Err(Error::Config { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
