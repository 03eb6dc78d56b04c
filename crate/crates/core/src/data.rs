//! Synthetic rectified stereo pairs with known disparity, and seed-fixed
//! batch ordering.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::metrics::disparity_to_depth;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::warp::{warp, Direction};

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub left: Tensor,
    pub right: Tensor,
    /// `[1, H, W]`, pixels.
    pub gt_disparity: Option<Tensor>,
    /// `[1, H, W]`, meters; zero where the disparity is zero.
    pub gt_depth: Option<Tensor>,
}

impl StereoSample {
    pub fn new(left: Tensor, right: Tensor, gt_disparity: Option<Tensor>) -> Result<Self> {
        let (c, h, w) = match left.shape() {
            &[c, h, w] => (c, h, w),
            other => {
                return Err(Error::InvalidShape {
                    op: "stereo sample",
                    reason: alloc::format!("expected [C, H, W], got {other:?}"),
                })
            }
        };
        right.expect_shape("stereo sample", &[c, h, w])?;
        if let Some(d) = &gt_disparity {
            d.expect_shape("stereo sample", &[1, h, w])?;
            if d.data().iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidParameter("negative ground-truth disparity".into()));
            }
        }
        Ok(Self {
            left,
            right,
            gt_disparity,
            gt_depth: None,
        })
    }

    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }

    /// Fills `gt_depth = f * B / d` from the ground-truth disparity.
    pub fn with_depth(mut self, focal_px: f64, baseline_m: f64) -> Self {
        self.gt_depth = self.gt_disparity.as_ref().map(|d| {
            let depth = disparity_to_depth(d, focal_px, baseline_m);
            depth.zip_map(d, |z, dv| if dv > 0.0 { z } else { 0.0 }).expect("same shape")
        });
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pattern {
    /// Sum of box-smoothed white noise at several scales.
    Noise,
    /// Random colored rectangles, lightly smoothed.
    Blocks,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DisparityLaw {
    Constant(f64),
    /// A random foreground rectangle over a background.
    TwoRegion { background: f64, foreground: f64 },
    /// Linear in `x` from the left edge to the right edge.
    Planar { left: f64, right: f64 },
}

impl DisparityLaw {
    fn extremes(&self) -> [f64; 2] {
        match *self {
            DisparityLaw::Constant(v) => [v, v],
            DisparityLaw::TwoRegion { background, foreground } => [background, foreground],
            DisparityLaw::Planar { left, right } => [left, right],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecipe {
    pub width: usize,
    pub height: usize,
    pub pattern: Pattern,
    pub law: DisparityLaw,
    /// Standard deviation of Gaussian noise added to the right view.
    pub noise: f64,
    pub count: usize,
    pub seed: u64,
    /// Upper bound on the disparity; must stay below `W / 4`.
    pub d_max: f64,
    pub focal_px: f64,
    pub baseline_m: f64,
}

impl Default for SynthRecipe {
    fn default() -> Self {
        Self {
            width: 64,
            height: 32,
            pattern: Pattern::Noise,
            law: DisparityLaw::Constant(4.0),
            noise: 0.0,
            count: 200,
            seed: 0,
            d_max: 12.0,
            focal_px: 64.0,
            baseline_m: 0.5,
        }
    }
}

impl SynthRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 1 {
            return Err(Error::InvalidParameter("synthetic images need W >= 4 and H >= 1".into()));
        }
        if !(self.d_max < self.width as f64 / 4.0) || !(self.d_max > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!(
                "d_max {} must be positive and below W/4 = {}",
                self.d_max,
                self.width as f64 / 4.0
            )));
        }
        if self.law.extremes().iter().any(|v| !(0.0..=self.d_max).contains(v)) {
            return Err(Error::InvalidParameter(alloc::format!(
                "disparity law {:?} outside [0, {}]",
                self.law,
                self.d_max
            )));
        }
        if !(self.noise >= 0.0) || !(self.focal_px > 0.0) || !(self.baseline_m > 0.0) {
            return Err(Error::InvalidParameter(
                "noise must be non-negative; focal length and baseline positive".into(),
            ));
        }
        Ok(())
    }
}

/// Separable box blur of radius `r` with clamped borders.
fn box_blur(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let norm = 1.0 / (2 * r + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in -(r as isize)..=r as isize {
                let xx = (x as isize + k).clamp(0, w as isize - 1) as usize;
                acc += plane[y * w + xx];
            }
            tmp[y * w + x] = acc * norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in -(r as isize)..=r as isize {
                let yy = (y as isize + k).clamp(0, h as isize - 1) as usize;
                acc += tmp[yy * w + x];
            }
            out[y * w + x] = acc * norm;
        }
    }
    out
}

fn normalize(plane: &mut [f64], lo: f64, hi: f64) {
    let (min, max) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (max - min).max(1e-12);
    for v in plane.iter_mut() {
        *v = lo + (hi - lo) * (*v - min) / span;
    }
}

fn texture(pattern: Pattern, h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let mut data = Vec::with_capacity(3 * h * w);
    match pattern {
        Pattern::Noise => {
            for _ in 0..3 {
                let mut plane = vec![0.0; h * w];
                for (r, amp) in [(1usize, 0.5), (2, 1.0), (4, 1.5)] {
                    let white: Vec<f64> = (0..h * w).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
                    let smooth = box_blur(&box_blur(&white, h, w, r), h, w, r);
                    for (p, s) in plane.iter_mut().zip(smooth) {
                        *p += amp * s;
                    }
                }
                normalize(&mut plane, 0.05, 0.95);
                data.extend(plane);
            }
        }
        Pattern::Blocks => {
            let mut planes: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.uniform_range(0.2, 0.8); h * w]).collect();
            let blocks = 6 + (h * w) / 128;
            for _ in 0..blocks {
                let bw = 2 + rng.below((w / 3).max(1));
                let bh = 2 + rng.below((h / 3).max(1));
                let x0 = rng.below(w);
                let y0 = rng.below(h);
                let color = [rng.uniform(), rng.uniform(), rng.uniform()];
                for (c, plane) in planes.iter_mut().enumerate() {
                    for y in y0..(y0 + bh).min(h) {
                        for x in x0..(x0 + bw).min(w) {
                            plane[y * w + x] = color[c];
                        }
                    }
                }
            }
            for plane in planes {
                let mut p = box_blur(&plane, h, w, 1);
                normalize(&mut p, 0.05, 0.95);
                data.extend(p);
            }
        }
    }
    data
}

fn disparity_field(law: DisparityLaw, h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    match law {
        DisparityLaw::Constant(v) => vec![v; h * w],
        DisparityLaw::TwoRegion { background, foreground } => {
            let fw = w / 4 + rng.below(w / 4 + 1);
            let fh = (h / 3).max(1) + rng.below(h / 3 + 1);
            let x0 = rng.below(w - fw + 1);
            let y0 = rng.below(h - fh.min(h) + 1);
            let mut d = vec![background; h * w];
            for y in y0..(y0 + fh).min(h) {
                for x in x0..(x0 + fw).min(w) {
                    d[y * w + x] = foreground;
                }
            }
            d
        }
        DisparityLaw::Planar { left, right } => {
            let span = (w - 1).max(1) as f64;
            (0..h * w)
                .map(|i| left + (right - left) * (i % w) as f64 / span)
                .collect()
        }
    }
}

/// Renders a texture, a disparity field and the right view
/// `right = warp(left, d, +1)`.
pub fn synth_pair(recipe: &SynthRecipe, rng: &mut Rng) -> Result<StereoSample> {
    recipe.validate()?;
    let (h, w) = (recipe.height, recipe.width);
    let left = Tensor::new(&[1, 3, h, w], texture(recipe.pattern, h, w, rng))?;
    let d = Tensor::new(&[1, 1, h, w], disparity_field(recipe.law, h, w, rng))?;
    let mut right = warp(&left, &d, Direction::Forward)?;
    if recipe.noise > 0.0 {
        for v in right.data_mut() {
            *v = (*v + recipe.noise * rng.normal()).clamp(0.0, 1.0);
        }
    }
    let sample = StereoSample::new(left.reshape(&[3, h, w])?, right.reshape(&[3, h, w])?, Some(d.reshape(&[1, h, w])?))?;
    Ok(sample.with_depth(recipe.focal_px, recipe.baseline_m))
}

/// `recipe.count` samples; sample `k` draws from stream `k` of the recipe seed.
pub fn synth_dataset(recipe: &SynthRecipe) -> Result<Vec<StereoSample>> {
    let base = Rng::new(recipe.seed);
    (0..recipe.count).map(|k| synth_pair(recipe, &mut base.fork(k as u64))).collect()
}

/// Batch order for one epoch: a seed-fixed shuffle split into full
/// batches; a partial final batch is dropped.
pub fn make_batches(samples: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if samples == 0 || batch_size == 0 || samples < batch_size {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..samples).collect();
    Rng::new(seed).fork(epoch).shuffle(&mut order);
    Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// Sample indices for global step `iteration`; a pure function of its
/// arguments so that a resumed run sees the same batches.
pub fn batch_at(samples: usize, batch_size: usize, seed: u64, iteration: u64) -> Result<Vec<usize>> {
    let per_epoch = (samples / batch_size.max(1)) as u64;
    if per_epoch == 0 {
        return Err(Error::EmptyDataset);
    }
    let epoch = iteration / per_epoch;
    let mut batches = make_batches(samples, batch_size, seed, epoch)?;
    Ok(batches.swap_remove((iteration % per_epoch) as usize))
}

/// Stacks samples into `[B, 3, H, W]` left and right tensors.
pub fn collate(samples: &[&StereoSample]) -> Result<(Tensor, Tensor)> {
    let lefts: Vec<&Tensor> = samples.iter().map(|s| &s.left).collect();
    let rights: Vec<&Tensor> = samples.iter().map(|s| &s.right).collect();
    Ok((Tensor::stack(&lefts)?, Tensor::stack(&rights)?))
}
