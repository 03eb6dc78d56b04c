//! Loss terms and their weighted combination
//! `L = g1 L_rec + g2 L_h + g3 (L_gan + L_crf)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

/// Scores are clamped into `[SCORE_GUARD, 1 - SCORE_GUARD]` before taking logs.
pub const SCORE_GUARD: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Real,
    Fake,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gamma: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: [1.0, 1.0, 0.1] }
    }
}

impl LossWeights {
    pub fn new(gamma: [f64; 3]) -> Result<Self> {
        Self { gamma }.validate()?;
        Ok(Self { gamma })
    }

    pub fn validate(&self) -> Result<()> {
        let gamma = self.gamma;
        if gamma.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) || gamma.iter().all(|g| *g == 0.0) {
            return Err(Error::InvalidParameter(alloc::format!(
                "loss weights must be non-negative with one positive: {gamma:?}"
            )));
        }
        Ok(())
    }
}

/// The four generator-side terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub h: f64,
    pub gan: f64,
    pub crf: f64,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub parts: LossParts,
    /// Discriminator objective; reported separately, not part of `total`.
    pub d_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iteration,rec,h,gan,crf,d_loss,total";

    pub fn csv_row(&self) -> alloc::string::String {
        // `{:?}` prints the shortest representation that parses back exactly.
        alloc::format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.iteration,
            self.parts.rec,
            self.parts.h,
            self.parts.gan,
            self.parts.crf,
            self.d_loss,
            self.total
        )
    }
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.gamma[0] * parts.rec + w.gamma[1] * parts.h + w.gamma[2] * (parts.gan + parts.crf)
}

/// `total_loss` on the tape. Missing terms count as zero.
pub fn total_loss_node(
    g: &mut Graph,
    rec: Option<NodeId>,
    h: Option<NodeId>,
    gan: Option<NodeId>,
    crf: Option<NodeId>,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut terms = alloc::vec::Vec::new();
    if let Some(r) = rec {
        terms.push(g.scale(r, w.gamma[0])?);
    }
    if let Some(h) = h {
        terms.push(g.scale(h, w.gamma[1])?);
    }
    for t in [gan, crf].into_iter().flatten() {
        terms.push(g.scale(t, w.gamma[2])?);
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return g.constant(crate::Tensor::scalar(0.0)),
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Mean absolute difference.
pub fn l1(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// L1 reconstruction of the target view from both synthesized views.
pub fn loss_rec(g: &mut Graph, synth_a: NodeId, synth_b: NodeId, target: NodeId) -> Result<NodeId> {
    let a = l1(g, synth_a, target)?;
    let b = l1(g, synth_b, target)?;
    g.add(a, b)
}

/// Per-pixel sigmoid cross-entropy averaged over pixels.
pub fn loss_gan_pixel(g: &mut Graph, scores: NodeId, target: Target) -> Result<NodeId> {
    if let Some(v) = g.value(scores).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidParameter(alloc::format!("score {v} outside [0, 1]")));
    }
    let s = g.clamp(scores, SCORE_GUARD, 1.0 - SCORE_GUARD)?;
    let p = match target {
        Target::Real => s,
        Target::Fake => {
            let neg = g.scale(s, -1.0)?;
            let one = g.constant(crate::Tensor::scalar(1.0))?;
            g.add(neg, one)?
        }
    };
    let logp = g.ln(p)?;
    let m = g.mean(logp)?;
    g.scale(m, -1.0)
}

/// Adversarial losses on CRF-fused score maps: the discriminator objective
/// and the non-saturating generator objective `-log s_fake`.
pub fn loss_gan_crf(g: &mut Graph, fused_real: NodeId, fused_fake: NodeId) -> Result<(NodeId, NodeId)> {
    let real = loss_gan_pixel(g, fused_real, Target::Real)?;
    let fake = loss_gan_pixel(g, fused_fake, Target::Fake)?;
    let d_loss = g.add(real, fake)?;
    let g_loss = loss_gan_pixel(g, fused_fake, Target::Real)?;
    Ok((d_loss, g_loss))
}

/// Hallucination fit. The target map is detached so only the
/// hallucinator's weights receive gradient from this term.
pub fn loss_h(g: &mut Graph, d_rh: NodeId, d_rb: NodeId) -> Result<NodeId> {
    let target = g.detach(d_rb)?;
    l1(g, d_rh, target)
}

/// L1 reconstruction from the CRF-fused disparity.
pub fn loss_crf(g: &mut Graph, synth_c: NodeId, target: NodeId) -> Result<NodeId> {
    l1(g, synth_c, target)
}
