//! Mean-field updates, plain and on the tape.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{message_pass_node, sums_tensor};
use super::{energy, CrfParams, CrfWeights, KernelBank};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub(crate) fn check_maps(bank: &KernelBank, maps: &[&Tensor]) -> Result<()> {
    let first = maps[0];
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "crf",
                expected: first.shape().to_vec(),
                found: m.shape().to_vec(),
            });
        }
    }
    if first.len() != bank.pixels() {
        return Err(Error::ShapeMismatch {
            op: "crf",
            expected: vec![1, 1, bank.height(), bank.width()],
            found: first.shape().to_vec(),
        });
    }
    Ok(())
}

/// `(a1 x + a2 y) / (a1 + a2)`, the starting point of the iteration.
pub fn unary_mean(d_a: &Tensor, d_h: &Tensor, weights: &CrfWeights) -> Result<Tensor> {
    let s = weights.alpha_sum();
    d_a.zip_map(d_h, |x, y| (weights.alpha[0] * x + weights.alpha[1] * y) / s)
}

/// One simultaneous (Jacobi) update of every pixel.
pub fn meanfield_step(
    d: &Tensor,
    d_a: &Tensor,
    d_h: &Tensor,
    bank: &KernelBank,
    weights: &CrfWeights,
) -> Result<Tensor> {
    weights.validate()?;
    check_maps(bank, &[d, d_a, d_h])?;
    let [m1, m2] = bank.messages(d.data());
    let deg = bank.degree(weights.beta);
    let (a, h) = (d_a.data(), d_h.data());
    let [b1, b2] = weights.beta;
    let out = (0..d.len())
        .map(|i| {
            let num = weights.alpha[0] * a[i] + weights.alpha[1] * h[i] + (b1 * m1[i] + b2 * m2[i]);
            num / (weights.alpha_sum() + deg[i])
        })
        .collect();
    Tensor::new(d.shape(), out)
}

/// Per-iteration diagnostics of [`meanfield_iterate`].
#[derive(Clone, Debug, Default)]
pub struct MeanFieldTrace {
    /// Energy of the starting point followed by the energy after each step.
    pub energies: Vec<f64>,
    /// `max_i |d^{t+1}_i - d^t_i|` per step.
    pub sup_diffs: Vec<f64>,
}

/// Runs `iterations` mean-field steps from [`unary_mean`].
pub fn meanfield_iterate(
    d_a: &Tensor,
    d_h: &Tensor,
    bank: &KernelBank,
    weights: &CrfWeights,
    iterations: usize,
) -> Result<(Tensor, MeanFieldTrace)> {
    weights.validate()?;
    let mut d = unary_mean(d_a, d_h, weights)?;
    let mut trace = MeanFieldTrace::default();
    trace.energies.push(energy(&d, d_a, d_h, bank, weights)?);
    for _ in 0..iterations {
        let next = meanfield_step(&d, d_a, d_h, bank, weights)?;
        trace.sup_diffs.push(next.max_abs_diff(&d));
        trace.energies.push(energy(&next, d_a, d_h, bank, weights)?);
        d = next;
    }
    Ok((d, trace))
}

/// Graph nodes for the four positive CRF weights, each of shape `[2]`.
#[derive(Clone, Copy, Debug)]
pub struct CrfNodes {
    pub alpha: NodeId,
    pub beta: NodeId,
}

impl CrfNodes {
    /// `exp` of the given log-parameter nodes.
    pub fn from_log(g: &mut Graph, log_alpha: NodeId, log_beta: NodeId) -> Result<Self> {
        Ok(Self {
            alpha: g.exp(log_alpha)?,
            beta: g.exp(log_beta)?,
        })
    }

    /// Constant weights (no gradient).
    pub fn constant(g: &mut Graph, w: &CrfWeights) -> Result<Self> {
        Ok(Self {
            alpha: g.constant(Tensor::from_vec(w.alpha.to_vec()))?,
            beta: g.constant(Tensor::from_vec(w.beta.to_vec()))?,
        })
    }

    pub fn from_params(g: &mut Graph, p: &CrfParams, trainable: bool) -> Result<Self> {
        let la = Tensor::from_vec(p.log_alpha.to_vec());
        let lb = Tensor::from_vec(p.log_beta.to_vec());
        let (la, lb) = if trainable {
            (g.param(la)?, g.param(lb)?)
        } else {
            (g.constant(la)?, g.constant(lb)?)
        };
        Self::from_log(g, la, lb)
    }
}

/// Stacked mean-field layer with shared weights.
///
/// Each step is built from primitives in three stages: the unary
/// combination is a 1x1 convolution of the stacked observations with
/// `(a1, a2)`, message passing filters the current estimate with both
/// kernels and mixes them by a 1x1 convolution with `(b1, b2)`, and the
/// normalization is an element-wise division.
pub fn nmf_layer(
    g: &mut Graph,
    d_a: NodeId,
    d_h: NodeId,
    banks: &[Arc<KernelBank>],
    weights: CrfNodes,
    iterations: usize,
) -> Result<NodeId> {
    if iterations == 0 {
        return Err(Error::InvalidParameter("iterations must be at least 1".into()));
    }
    let shape = g.value(d_a).shape().to_vec();
    g.value(d_h).expect_shape("nmf_layer", &shape)?;
    let zero = g.constant(Tensor::zeros(&[1]))?;
    let alpha_k = g.reshape(weights.alpha, &[1, 2, 1, 1])?;
    let beta_k = g.reshape(weights.beta, &[1, 2, 1, 1])?;

    let obs = g.concat_channels(&[d_a, d_h])?;
    let unary = g.conv2d(obs, alpha_k, zero, 1, 0)?;
    let alpha_sum = g.sum(weights.alpha)?;

    let sums = g.constant(sums_tensor(banks)?)?;
    let degree = g.conv2d(sums, beta_k, zero, 1, 0)?;
    let norm = g.add(degree, alpha_sum)?;

    let mut d = g.div(unary, alpha_sum)?;
    for _ in 0..iterations {
        let msg = message_pass_node(g, d, banks)?;
        let pair = g.conv2d(msg, beta_k, zero, 1, 0)?;
        let num = g.add(unary, pair)?;
        d = g.div(num, norm)?;
    }
    Ok(d)
}

/// Runs one CRF over a disparity pair and a score pair with the same
/// weights. Gradients from both passes meet at `weights` when the caller
/// backpropagates a loss that depends on both outputs.
pub fn couple(
    g: &mut Graph,
    gen_pair: (NodeId, NodeId),
    disc_pair: (NodeId, NodeId),
    banks: &[Arc<KernelBank>],
    weights: CrfNodes,
    iterations: usize,
) -> Result<(NodeId, NodeId)> {
    let gs = g.value(gen_pair.0).shape().to_vec();
    for id in [gen_pair.1, disc_pair.0, disc_pair.1] {
        g.value(id).expect_shape("couple", &gs)?;
    }
    for id in [disc_pair.0, disc_pair.1] {
        if g.value(id).data().iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::InvalidParameter("score maps must lie in (0, 1)".into()));
        }
    }
    let d = nmf_layer(g, gen_pair.0, gen_pair.1, banks, weights, iterations)?;
    let s = nmf_layer(g, disc_pair.0, disc_pair.1, banks, weights, iterations)?;
    Ok((d, s))
}
