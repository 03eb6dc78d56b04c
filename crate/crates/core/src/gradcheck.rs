//! Finite-difference verification of reverse-mode gradients.
//!
//! For a graph function `f(x_1, .., x_k)` the checker draws a random output
//! probe `r` and, per input, a random direction `v`. It compares the
//! backward-pass directional derivative `<d<r, f>/dx_i, v>` with the central
//! difference `(<r, f(x_i + eps v)> - <r, f(x_i - eps v)>) / (2 eps)`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Floor used in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(analytic, numeric, relative error)` per input.
    pub per_input: Vec<(f64, f64, f64)>,
    pub max_rel_error: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    libm::fabs(a - b) / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, rng: &mut Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidParameter(alloc::format!(
            "finite-difference step {eps:e} outside [1e-6, 1e-3]"
        )));
    }
    let eval = |xs: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids = xs.iter().map(|x| g.param(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &ids)?;
        Ok((g, ids, out))
    };

    let (graph, ids, out) = eval(inputs)?;
    let probe = Tensor::rand_uniform(graph.value(out).shape(), -1.0, 1.0, rng);
    let grads = graph.backward_with_seed(out, probe.clone())?;

    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let dir = Tensor::rand_uniform(x.shape(), -1.0, 1.0, rng);
        let analytic = grads.get(ids[i]).map_or(0.0, |g| g.dot(&dir));
        let mut shifted = inputs.to_vec();
        let mut side = |sign: f64| -> Result<f64> {
            shifted[i] = x.zip_map(&dir, |a, d| a + sign * eps * d)?;
            let (g, _, o) = eval(&shifted)?;
            Ok(g.value(o).dot(&probe))
        };
        let numeric = (side(1.0)? - side(-1.0)?) / (2.0 * eps);
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        per_input.push((analytic, numeric, relative_error(analytic, numeric)));
    }
    let max_rel_error = per_input.iter().map(|p| p.2).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
    })
}
