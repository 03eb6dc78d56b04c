use super::{CrfWeights, KernelBank};
use crate::error::Result;
use crate::tensor::Tensor;

use super::meanfield::check_maps;

/// CRF energy with each unordered neighbor pair counted once.
pub fn energy(d: &Tensor, d_a: &Tensor, d_h: &Tensor, bank: &KernelBank, weights: &CrfWeights) -> Result<f64> {
    check_maps(bank, &[d, d_a, d_h])?;
    let (d, a, h) = (d.data(), d_a.data(), d_h.data());
    let mut unary = 0.0;
    for i in 0..d.len() {
        unary += weights.alpha[0] * (d[i] - a[i]) * (d[i] - a[i]) + weights.alpha[1] * (d[i] - h[i]) * (d[i] - h[i]);
    }
    let (height, width) = (bank.height() as isize, bank.width() as isize);
    let mut pair = 0.0;
    for (o, &(dy, dx)) in bank.offsets().iter().enumerate() {
        // Forward half of the window only.
        if dy < 0 || (dy == 0 && dx < 0) {
            continue;
        }
        for y in 0..height {
            for x in 0..width {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= height || nx < 0 || nx >= width {
                    continue;
                }
                let i = (y * width + x) as usize;
                let j = (ny * width + nx) as usize;
                let diff = d[i] - d[j];
                pair += bank.combined(weights.beta, o, i) * diff * diff;
            }
        }
    }
    Ok(unary + pair)
}
