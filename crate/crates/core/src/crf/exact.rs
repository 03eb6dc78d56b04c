//! Exact CRF inference by conjugate gradient on the normal equations
//! `[(a1 + a2) I + L] d = a1 x + a2 y`.
//!
//! The matrix is symmetric positive definite whenever `a1 + a2 > 0`, so CG
//! converges; it is used as a small-instance oracle for the mean-field
//! layer, not inside training.

use alloc::vec::Vec;

use super::meanfield::check_maps;
use super::{CrfWeights, KernelBank};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EXACT_MAX_PIXELS: usize = 4096;
const RESIDUAL_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub d: Tensor,
    pub iterations: usize,
    /// Euclidean norm of `b - A d`, recomputed from the final iterate.
    pub residual: f64,
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn exact_solve(d_a: &Tensor, d_h: &Tensor, bank: &KernelBank, weights: &CrfWeights) -> Result<ExactSolution> {
    weights.validate()?;
    check_maps(bank, &[d_a, d_h])?;
    let n = bank.pixels();
    if n > EXACT_MAX_PIXELS {
        return Err(Error::OracleTooLarge {
            pixels: n,
            limit: EXACT_MAX_PIXELS,
        });
    }
    let b: Vec<f64> = d_a
        .data()
        .iter()
        .zip(d_h.data())
        .map(|(x, y)| weights.alpha[0] * x + weights.alpha[1] * y)
        .collect();

    // Start from the unary mean; it is exact when every beta is zero.
    let mut x: Vec<f64> = b.iter().map(|v| v / weights.alpha_sum()).collect();
    let max_iter = 10 * n + 100;
    let mut iterations = 0;
    // Two rounds: the second restarts from the true residual to shed
    // rounding drift in the recursive one.
    for _ in 0..2 {
        let ax = bank.system_apply(weights, &x);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        while libm::sqrt(rr) >= RESIDUAL_TOL * 0.1 && iterations < max_iter {
            let ap = bank.system_apply(weights, &p);
            let step = rr / dot(&p, &ap);
            for i in 0..n {
                x[i] += step * p[i];
                r[i] -= step * ap[i];
            }
            let rr_next = dot(&r, &r);
            let beta = rr_next / rr;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rr = rr_next;
            iterations += 1;
        }
    }
    let ax = bank.system_apply(weights, &x);
    let residual = norm(&b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect::<Vec<_>>());
    if !(residual < RESIDUAL_TOL) {
        return Err(Error::SolverDiverged { iterations, residual });
    }
    Ok(ExactSolution {
        d: Tensor::new(d_a.shape(), x)?,
        iterations,
        residual,
    })
}
