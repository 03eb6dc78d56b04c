//! Continuous CRF that fuses two observation maps into one.
//!
//! Energy, over unordered neighbor pairs `(i, j)` inside the kernel window:
//!
//! ```text
//! E(d) = sum_i [ a1 (d_i - x_i)^2 + a2 (d_i - y_i)^2 ]
//!      + sum_{i<j} (b1 k1_ij + b2 k2_ij) (d_i - d_j)^2
//! ```
//!
//! where `k1` is the appearance kernel (position and color) and `k2` the
//! smoothness kernel (position only). The mean-field update
//!
//! ```text
//! d_i <- (a1 x_i + a2 y_i + sum_l b_l sum_j kl_ij d_j) / (a1 + a2 + sum_l b_l sum_j kl_ij)
//! ```
//!
//! is the exact coordinate minimizer of `E`, so the mean-field fixed point
//! and the solution of `[(a1 + a2) I + L] d = a1 x + a2 y` coincide, `L`
//! being the Laplacian of the weighted neighbor graph.

mod energy;
mod exact;
mod kernels;
mod meanfield;
mod oracle;

pub use energy::energy;
pub use exact::{exact_solve, ExactSolution, EXACT_MAX_PIXELS};
pub use kernels::{build_kernels, message_pass_node, KernelBank, APPEARANCE, SMOOTHNESS};
pub use meanfield::{
    couple, meanfield_iterate, meanfield_step, nmf_layer, unary_mean, CrfNodes, MeanFieldTrace,
};
pub use oracle::{compare, random_instance, OracleComparison, OracleInstance, ORACLE_WINDOW};

use crate::error::{Error, Result};

/// Gaussian kernel bandwidths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bandwidths {
    /// Spatial bandwidth of the appearance kernel, pixels.
    pub theta_alpha: f64,
    /// Color bandwidth of the appearance kernel, intensity units in `[0, 1]`.
    pub theta_beta: f64,
    /// Spatial bandwidth of the smoothness kernel, pixels.
    pub theta_gamma: f64,
}

impl Default for Bandwidths {
    fn default() -> Self {
        Self {
            theta_alpha: 5.0,
            theta_beta: 0.1,
            theta_gamma: 3.0,
        }
    }
}

/// Concrete non-negative coupling weights used by inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfWeights {
    /// Unary weights for the first and second observation.
    pub alpha: [f64; 2],
    /// Pairwise weights for the appearance and smoothness kernels.
    pub beta: [f64; 2],
}

impl CrfWeights {
    pub fn new(alpha: [f64; 2], beta: [f64; 2]) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.alpha.iter().chain(&self.beta);
        if all.clone().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter(alloc::format!(
                "CRF weights must be finite and non-negative: {self:?}"
            )));
        }
        if self.alpha[0] + self.alpha[1] <= 0.0 {
            return Err(Error::InvalidParameter("alpha1 + alpha2 must be positive".into()));
        }
        Ok(())
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha[0] + self.alpha[1]
    }
}

/// Learnable CRF scalars plus fixed inference settings.
///
/// The four learnable weights are stored as logarithms so that any update
/// keeps them strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    pub log_alpha: [f64; 2],
    pub log_beta: [f64; 2],
    pub bandwidths: Bandwidths,
    /// Odd side length of the square neighbor window.
    pub window: usize,
    /// Number of stacked mean-field steps.
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            log_alpha: [0.0, 0.0],
            log_beta: [libm::log(0.05), libm::log(0.05)],
            bandwidths: Bandwidths::default(),
            window: 15,
            iterations: 5,
        }
    }
}

impl CrfParams {
    pub fn from_weights(w: CrfWeights, bandwidths: Bandwidths, window: usize, iterations: usize) -> Result<Self> {
        if w.alpha.iter().chain(&w.beta).any(|v| *v <= 0.0) {
            return Err(Error::InvalidParameter(
                "learnable CRF weights must be strictly positive".into(),
            ));
        }
        let p = Self {
            log_alpha: w.alpha.map(libm::log),
            log_beta: w.beta.map(libm::log),
            bandwidths,
            window,
            iterations,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::InvalidParameter(alloc::format!(
                "window must be odd, got {}",
                self.window
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be at least 1".into()));
        }
        let b = self.bandwidths;
        if [b.theta_alpha, b.theta_beta, b.theta_gamma].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidParameter(alloc::format!("bandwidths must be positive: {b:?}")));
        }
        Ok(())
    }

    pub fn weights(&self) -> CrfWeights {
        CrfWeights {
            alpha: self.log_alpha.map(libm::exp),
            beta: self.log_beta.map(libm::exp),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        let mut p = CrfParams::default();
        assert!(p.validate().is_ok());
        p.window = 14;
        assert!(p.validate().is_err());
        p.window = 15;
        p.iterations = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn exp_parameterization_is_positive() {
        let p = CrfParams {
            log_alpha: [-50.0, 3.0],
            log_beta: [-10.0, 0.0],
            ..CrfParams::default()
        };
        let w = p.weights();
        assert!(w.alpha.iter().chain(&w.beta).all(|v| *v > 0.0));
        assert!(CrfWeights::new([0.0, 0.0], [0.0, 0.0]).is_err());
        assert!(CrfWeights::new([1.0, 0.0], [0.0, 0.0]).is_ok());
    }
}
