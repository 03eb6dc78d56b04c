//! Random small CRF instances and the mean-field versus exact comparison.

use alloc::vec::Vec;

use super::{build_kernels, exact_solve, meanfield_iterate, meanfield_step, Bandwidths, CrfParams, CrfWeights, KernelBank};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const ORACLE_WINDOW: usize = 5;

/// One random instance: observations, kernels and weights.
#[derive(Clone, Debug)]
pub struct OracleInstance {
    pub d_a: Tensor,
    pub d_h: Tensor,
    pub bank: KernelBank,
    pub weights: CrfWeights,
}

/// Draws an instance on an `h x w` grid.
///
/// Kernels come from a random image with random bandwidths; weights are
/// drawn from `a_l in [0.5, 1.5]` and `b_l in [0.01, 0.2]`, which bounds the
/// Jacobi contraction factor below one for a 5x5 window.
pub fn random_instance(h: usize, w: usize, rng: &mut Rng) -> Result<OracleInstance> {
    let image = Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, rng);
    let params = CrfParams {
        bandwidths: Bandwidths {
            theta_alpha: rng.uniform_range(1.0, 5.0),
            theta_beta: rng.uniform_range(0.05, 0.5),
            theta_gamma: rng.uniform_range(1.0, 3.0),
        },
        window: ORACLE_WINDOW,
        ..CrfParams::default()
    };
    let bank = build_kernels(&image, &params)?;
    let weights = CrfWeights::new(
        [rng.uniform_range(0.5, 1.5), rng.uniform_range(0.5, 1.5)],
        [rng.uniform_range(0.01, 0.2), rng.uniform_range(0.01, 0.2)],
    )?;
    let d_a = Tensor::rand_uniform(&[1, 1, h, w], 0.0, 10.0, rng);
    let d_h = Tensor::rand_uniform(&[1, 1, h, w], 0.0, 10.0, rng);
    Ok(OracleInstance { d_a, d_h, bank, weights })
}

#[derive(Clone, Debug)]
pub struct OracleComparison {
    /// `max_i |d_meanfield - d_exact|`.
    pub max_diff: f64,
    /// `max_i |step(d_exact) - d_exact|`.
    pub fixed_point_gap: f64,
    pub exact_residual: f64,
    pub energies: Vec<f64>,
    pub sup_diffs: Vec<f64>,
}

impl OracleComparison {
    /// Whether successive sup-norm differences shrink after step `after`
    /// (1-based), ignoring steps already at round-off level.
    pub fn contracts_after(&self, after: usize) -> bool {
        self.sup_diffs
            .windows(2)
            .skip(after.saturating_sub(1))
            .all(|p| p[1] < p[0] || p[0] < 1e-13)
    }
}

/// Runs `iterations` mean-field steps and the exact solver on `inst`.
pub fn compare(inst: &OracleInstance, iterations: usize) -> Result<OracleComparison> {
    if iterations == 0 {
        return Err(Error::InvalidParameter("iterations must be at least 1".into()));
    }
    let (mf, trace) = meanfield_iterate(&inst.d_a, &inst.d_h, &inst.bank, &inst.weights, iterations)?;
    let exact = exact_solve(&inst.d_a, &inst.d_h, &inst.bank, &inst.weights)?;
    let stepped = meanfield_step(&exact.d, &inst.d_a, &inst.d_h, &inst.bank, &inst.weights)?;
    Ok(OracleComparison {
        max_diff: mf.max_abs_diff(&exact.d),
        fixed_point_gap: stepped.max_abs_diff(&exact.d),
        exact_residual: exact.residual,
        energies: trace.energies,
        sup_diffs: trace.sup_diffs,
    })
}
