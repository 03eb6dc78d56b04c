//! Alternating discriminator/generator optimization, the learning-rate
//! schedule and monocular inference.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::crf::{build_kernels, couple, nmf_layer, CrfNodes, CrfParams, KernelBank};
use crate::data::{batch_at, collate, StereoSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::networks::{Branch, Group, ModelState, ParamNodes};
use crate::objectives::{
    l1, loss_crf, loss_gan_crf, loss_gan_pixel, loss_h, total_loss_node, LossParts, LossReport, LossWeights, Target,
    SCORE_GUARD,
};
use crate::tensor::Tensor;
use crate::warp::{warp_node, Direction};

/// Ablation ladder; each variant enables every component of the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Baseline,
    Hallucination,
    Adversarial,
    CoupledD,
    CoupledGD,
}

/// Switches derived from a [`Variant`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub hallucinator: bool,
    pub discriminators: bool,
    /// Discriminator scores fused by the CRF before the adversarial loss.
    pub coupled_scores: bool,
    /// Generator and hallucinator disparities fused by the CRF, with `L_crf`.
    pub coupled_disparity: bool,
}

impl Components {
    pub fn uses_crf(&self) -> bool {
        self.coupled_scores || self.coupled_disparity
    }

    fn as_array(&self) -> [bool; 4] {
        [self.hallucinator, self.discriminators, self.coupled_scores, self.coupled_disparity]
    }

    /// True when every component enabled in `other` is enabled here.
    pub fn includes(&self, other: &Components) -> bool {
        self.as_array().iter().zip(other.as_array()).all(|(a, b)| *a || !b)
    }
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Hallucination,
        Variant::Adversarial,
        Variant::CoupledD,
        Variant::CoupledGD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Hallucination => "hall",
            Variant::Adversarial => "adv",
            Variant::CoupledD => "coupled-d",
            Variant::CoupledGD => "coupled-gd",
        }
    }

    pub fn components(self) -> Components {
        let rank = self as u8;
        Components {
            hallucinator: rank >= Variant::Hallucination as u8,
            discriminators: rank >= Variant::Adversarial as u8,
            coupled_scores: rank >= Variant::CoupledD as u8,
            coupled_disparity: rank >= Variant::CoupledGD as u8,
        }
    }

    /// Parameter groups the generator step may update.
    pub fn generator_groups(self) -> Vec<Group> {
        let c = self.components();
        let mut groups = alloc::vec![Group::Encoder, Group::GenA, Group::GenB];
        if c.hallucinator {
            groups.push(Group::Hallucinator);
        }
        if c.uses_crf() {
            groups.push(Group::Crf);
        }
        groups
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidParameter(alloc::format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Iterations at which the learning rate is divided by `1 / lr_decay_factor`.
    pub lr_steps: Vec<u64>,
    pub lr_decay_factor: f64,
    pub max_iters: u64,
    pub seed: u64,
    pub loss: LossWeights,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    /// Branch B reconstructs the left view from the right one instead of
    /// both branches synthesizing the right view.
    pub symmetric_recon: bool,
    /// Each discriminator judges its own branch instead of the other one.
    pub symmetric_disc: bool,
    /// Apply weight decay to the CRF log-weights too.
    pub crf_weight_decay: bool,
    pub checkpoint_every: u64,
    /// Upper bound on memory spent caching per-sample kernel banks.
    pub bank_cache_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 0.0002,
            batch_size: 4,
            lr_steps: alloc::vec![30000, 55000],
            lr_decay_factor: 0.2,
            max_iters: 2000,
            seed: 0,
            loss: LossWeights::default(),
            d_steps: 1,
            symmetric_recon: false,
            symmetric_disc: false,
            crf_weight_decay: false,
            checkpoint_every: 500,
            bank_cache_bytes: 512 << 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.max_iters == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, max_iters and checkpoint_every must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if self.lr_steps.is_empty() || self.lr_steps[0] == 0 || self.lr_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_steps must be positive and strictly increasing");
        }
        self.loss.validate()
    }

    /// Milestones in effect, scaled proportionally when the run is shorter
    /// than the last configured milestone.
    pub fn milestones(&self) -> Vec<u64> {
        let last = *self.lr_steps.last().unwrap_or(&0);
        if last == 0 || self.max_iters >= last {
            return self.lr_steps.clone();
        }
        self.lr_steps
            .iter()
            .map(|&m| ((m as u128 * self.max_iters as u128) / last as u128) as u64)
            .collect()
    }

    /// `lr0 / (1/decay)^k` where `k` counts milestones at or before `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let k = self.milestones().iter().filter(|&&m| m <= t).count();
        if k == 0 {
            return self.lr;
        }
        self.lr / libm::pow(1.0 / self.lr_decay_factor, k as f64)
    }
}

/// Momentum SGD with weight decay:
/// `v <- m v + g + wd w`, `w <- w - lr v`.
///
/// Every gradient is checked before any weight moves, so a non-finite
/// gradient leaves the state untouched.
pub fn sgd_step(state: &mut ModelState, grads: &BTreeMap<String, Tensor>, lr: f64, config: &TrainConfig) -> Result<()> {
    for (name, g) in grads {
        let w = state
            .params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.clone()))?;
        w.expect_shape("sgd_step", g.shape())?;
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { param: name.clone() });
        }
    }
    for (name, g) in grads {
        let w = state.params.get_mut(name).expect("checked above");
        let wd = if name.starts_with(Group::Crf.prefix()) && !config.crf_weight_decay {
            0.0
        } else {
            config.weight_decay
        };
        let v = state
            .momentum
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
            *vi = config.momentum * *vi + gi + wd * *wi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Stacked images of one step plus the CRF kernel banks conditioned on the
/// right view.
#[derive(Clone, Debug)]
pub struct Batch {
    pub left: Tensor,
    pub right: Tensor,
    pub banks: Vec<Arc<KernelBank>>,
}

impl Batch {
    pub fn new(samples: &[&StereoSample], crf: Option<&CrfParams>) -> Result<Self> {
        let (left, right) = collate(samples)?;
        let banks = match crf {
            Some(p) => samples
                .iter()
                .map(|s| build_kernels(&s.right, p).map(Arc::new))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(Self { left, right, banks })
    }
}

/// Outcome of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Names of parameters moved by this step.
    pub updated: BTreeSet<String>,
    /// Gradient norm per generator-step parameter, for diagnostics.
    pub grad_norms: BTreeMap<String, f64>,
}

fn collect_grads(
    g: &Graph,
    loss: NodeId,
    nodes: &ParamNodes,
    groups: &[Group],
) -> Result<BTreeMap<String, Tensor>> {
    let mut grads = g.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, id) in nodes.iter() {
        if !Group::of(name).is_some_and(|grp| groups.contains(&grp)) {
            continue;
        }
        if let Some(t) = grads.take(*id) {
            out.insert(name.clone(), t);
        }
    }
    Ok(out)
}

fn guard_scores(g: &mut Graph, s: NodeId) -> Result<NodeId> {
    g.clamp(s, SCORE_GUARD, 1.0 - SCORE_GUARD)
}

/// Synthesized view and the real image it imitates.
#[derive(Clone, Copy)]
struct Fake {
    image: NodeId,
    target: NodeId,
}

/// Generator-side nodes built before the discriminator step.
struct GeneratorGraph {
    left: NodeId,
    right: NodeId,
    d_a: NodeId,
    d_h: Option<NodeId>,
    /// Views judged by `D_a` and `D_b`, in that order.
    judged: [Fake; 2],
    rec: NodeId,
    h_term: Option<NodeId>,
}

fn build_generator(
    g: &mut Graph,
    state: &ModelState,
    nodes: &ParamNodes,
    batch: &Batch,
    comps: Components,
    config: &TrainConfig,
) -> Result<GeneratorGraph> {
    let left = g.constant(batch.left.clone())?;
    let right = g.constant(batch.right.clone())?;

    let d_a = state.generator_forward(g, nodes, left, Branch::A)?;
    let d_b = state.generator_forward(g, nodes, right, Branch::B)?;
    let fake_a = Fake {
        image: warp_node(g, left, d_a, Direction::Forward)?,
        target: right,
    };
    let fake_b = if config.symmetric_recon {
        Fake {
            image: warp_node(g, right, d_b, Direction::Backward)?,
            target: left,
        }
    } else {
        Fake {
            image: warp_node(g, left, d_b, Direction::Forward)?,
            target: right,
        }
    };
    let rec_a = l1(g, fake_a.image, fake_a.target)?;
    let rec_b = l1(g, fake_b.image, fake_b.target)?;
    let rec = g.add(rec_a, rec_b)?;

    let (mut d_h, mut h_term) = (None, None);
    if comps.hallucinator {
        let d_a_in = g.detach(d_a)?;
        let dh = state.hallucinate(g, nodes, d_a_in)?;
        h_term = Some(loss_h(g, dh, d_b)?);
        d_h = Some(dh);
    }
    let judged = if config.symmetric_disc {
        [fake_a, fake_b]
    } else {
        [fake_b, fake_a]
    };
    Ok(GeneratorGraph {
        left,
        right,
        d_a,
        d_h,
        judged,
        rec,
        h_term,
    })
}

/// Adversarial and CRF terms; `nodes` must already hold the discriminator
/// weights. Returns `(gan, crf)`.
fn finish_generator(
    g: &mut Graph,
    state: &ModelState,
    nodes: &ParamNodes,
    gen: &GeneratorGraph,
    batch: &Batch,
    comps: Components,
) -> Result<(Option<NodeId>, Option<NodeId>)> {
    if !comps.discriminators {
        return Ok((None, None));
    }
    let sa = state.discriminate(g, nodes, gen.judged[0].image, Branch::A)?;
    let sb = state.discriminate(g, nodes, gen.judged[1].image, Branch::B)?;
    if !comps.coupled_scores {
        let la = loss_gan_pixel(g, sa, Target::Real)?;
        let lb = loss_gan_pixel(g, sb, Target::Real)?;
        return Ok((Some(g.add(la, lb)?), None));
    }
    let iterations = state.spec.crf.iterations;
    let w = CrfNodes::from_log(g, nodes.get("crf.log_alpha")?, nodes.get("crf.log_beta")?)?;
    let (sa, sb) = (guard_scores(g, sa)?, guard_scores(g, sb)?);
    if comps.coupled_disparity {
        let dh = gen.d_h.ok_or(Error::InvalidParameter("disparity coupling needs the hallucinator".into()))?;
        let (d_c, s_fake) = couple(g, (gen.d_a, dh), (sa, sb), &batch.banks, w, iterations)?;
        let gan = loss_gan_pixel(g, s_fake, Target::Real)?;
        let synth_c = warp_node(g, gen.left, d_c, Direction::Forward)?;
        let crf = loss_crf(g, synth_c, gen.right)?;
        Ok((Some(gan), Some(crf)))
    } else {
        let s_fake = nmf_layer(g, sa, sb, &batch.banks, w, iterations)?;
        Ok((Some(loss_gan_pixel(g, s_fake, Target::Real)?), None))
    }
}

/// Discriminator objective on fixed fake and real images.
fn discriminator_loss(
    g: &mut Graph,
    state: &ModelState,
    nodes: &ParamNodes,
    images: [&Tensor; 4],
    batch: &Batch,
    comps: Components,
    crf: &CrfParams,
) -> Result<NodeId> {
    let [fa, ra, fb, rb] = images.map(|t| g.constant(t.clone()));
    let real_a = state.discriminate(g, nodes, ra?, Branch::A)?;
    let fake_a = state.discriminate(g, nodes, fa?, Branch::A)?;
    let real_b = state.discriminate(g, nodes, rb?, Branch::B)?;
    let fake_b = state.discriminate(g, nodes, fb?, Branch::B)?;
    if comps.coupled_scores {
        let w = CrfNodes::from_params(g, crf, false)?;
        let [ra, rb, fa, fb] = [real_a, real_b, fake_a, fake_b].map(|s| guard_scores(g, s));
        let s_real = nmf_layer(g, ra?, rb?, &batch.banks, w, crf.iterations)?;
        let s_fake = nmf_layer(g, fa?, fb?, &batch.banks, w, crf.iterations)?;
        Ok(loss_gan_crf(g, s_real, s_fake)?.0)
    } else {
        let terms = [
            loss_gan_pixel(g, real_a, Target::Real)?,
            loss_gan_pixel(g, fake_a, Target::Fake)?,
            loss_gan_pixel(g, real_b, Target::Real)?,
            loss_gan_pixel(g, fake_b, Target::Fake)?,
        ];
        let ab = g.add(terms[0], terms[1])?;
        let cd = g.add(terms[2], terms[3])?;
        g.add(ab, cd)
    }
}

/// The generator-step objective `L_o` on `g`, with every parameter taken
/// from `nodes` (discriminators included). Used for gradient checks.
pub fn generator_objective(
    g: &mut Graph,
    state: &ModelState,
    nodes: &ParamNodes,
    batch: &Batch,
    variant: Variant,
    config: &TrainConfig,
) -> Result<NodeId> {
    let comps = variant.components();
    let gen = build_generator(g, state, nodes, batch, comps, config)?;
    let (gan, crf) = finish_generator(g, state, nodes, &gen, batch, comps)?;
    total_loss_node(g, Some(gen.rec), gen.h_term, gan, crf, &config.loss)
}

/// One discriminator update followed by one generator update on `batch`.
pub fn train_step(state: &mut ModelState, batch: &Batch, variant: Variant, config: &TrainConfig) -> Result<StepOutcome> {
    let comps = variant.components();
    if comps.uses_crf() && batch.banks.len() != batch.left.shape()[0] {
        return Err(Error::InvalidParameter("batch lacks CRF kernel banks".into()));
    }
    let iteration = state.iteration;
    let lr = config.lr_at(iteration);
    let crf_params = state.crf_params()?;
    let gen_groups = variant.generator_groups();

    let mut g = Graph::new();
    let mut nodes = ParamNodes::default();
    state.add_groups(&mut g, &mut nodes, &gen_groups, true)?;
    let gen = build_generator(&mut g, state, &nodes, batch, comps, config)?;

    // Discriminator step on detached fakes.
    let mut d_loss_value = 0.0;
    let mut updated = BTreeSet::new();
    if comps.discriminators {
        let disc_groups = [Group::DiscA, Group::DiscB];
        let images = [
            g.value(gen.judged[0].image).clone(),
            g.value(gen.judged[0].target).clone(),
            g.value(gen.judged[1].image).clone(),
            g.value(gen.judged[1].target).clone(),
        ];
        for round in 0..config.d_steps {
            let mut gd = Graph::new();
            let mut dn = ParamNodes::default();
            state.add_groups(&mut gd, &mut dn, &disc_groups, true)?;
            let refs = [&images[0], &images[1], &images[2], &images[3]];
            let loss = discriminator_loss(&mut gd, state, &dn, refs, batch, comps, &crf_params)?;
            if round == 0 {
                d_loss_value = gd.value(loss).item();
            }
            let grads = collect_grads(&gd, loss, &dn, &disc_groups)?;
            sgd_step(state, &grads, lr, config)?;
            updated.extend(grads.into_keys());
        }
        state.add_groups(&mut g, &mut nodes, &disc_groups, false)?;
    }

    let (gan_term, crf_term) = finish_generator(&mut g, state, &nodes, &gen, batch, comps)?;
    let (rec, h_term) = (gen.rec, gen.h_term);
    let total = total_loss_node(&mut g, Some(rec), h_term, gan_term, crf_term, &config.loss)?;
    let value = |g: &Graph, id: Option<NodeId>| id.map_or(0.0, |id| g.value(id).item());
    let parts = LossParts {
        rec: g.value(rec).item(),
        h: value(&g, h_term),
        gan: value(&g, gan_term),
        crf: value(&g, crf_term),
    };
    let report = LossReport {
        iteration,
        parts,
        d_loss: d_loss_value,
        total: g.value(total).item(),
    };
    let grads = collect_grads(&g, total, &nodes, &gen_groups)?;
    let grad_norms = grads
        .iter()
        .map(|(k, t)| (k.clone(), libm::sqrt(t.dot(t))))
        .collect();
    sgd_step(state, &grads, lr, config)?;
    updated.extend(grads.into_keys());
    state.iteration += 1;
    Ok(StepOutcome {
        report,
        updated,
        grad_norms,
    })
}

/// Runs training over an in-memory dataset with seed-fixed batch order.
/// Kernel banks are cached per sample when they fit the memory budget.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub variant: Variant,
    dataset: &'a [StereoSample],
    bank_cache: Option<Vec<Option<Arc<KernelBank>>>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, variant: Variant, dataset: &'a [StereoSample]) -> Result<Self> {
        config.validate()?;
        let first = dataset.first().ok_or(Error::EmptyDataset)?;
        if dataset.len() < config.batch_size {
            return Err(Error::EmptyDataset);
        }
        let (h, w) = (first.height(), first.width());
        if dataset.iter().any(|s| s.height() != h || s.width() != w) {
            return Err(Error::InvalidParameter("dataset images differ in size".into()));
        }
        Ok(Self {
            config,
            variant,
            dataset,
            bank_cache: None,
        })
    }

    fn bank(&mut self, index: usize, params: &CrfParams) -> Result<Arc<KernelBank>> {
        let sample = &self.dataset[index];
        let per_bank = (params.window * params.window) * sample.height() * sample.width() * 16;
        if self.bank_cache.is_none() && per_bank.saturating_mul(self.dataset.len()) <= self.config.bank_cache_bytes {
            self.bank_cache = Some(alloc::vec![None; self.dataset.len()]);
        }
        if let Some(cache) = &mut self.bank_cache {
            if let Some(b) = &cache[index] {
                return Ok(b.clone());
            }
            let b = Arc::new(build_kernels(&sample.right, params)?);
            cache[index] = Some(b.clone());
            return Ok(b);
        }
        Ok(Arc::new(build_kernels(&sample.right, params)?))
    }

    /// Batch for global step `iteration`.
    pub fn batch(&mut self, state: &ModelState, iteration: u64) -> Result<Batch> {
        let idx = batch_at(self.dataset.len(), self.config.batch_size, self.config.seed, iteration)?;
        let refs: Vec<&StereoSample> = idx.iter().map(|&i| &self.dataset[i]).collect();
        let mut batch = Batch::new(&refs, None)?;
        if self.variant.components().uses_crf() {
            let params = state.crf_params()?;
            batch.banks = idx.iter().map(|&i| self.bank(i, &params)).collect::<Result<_>>()?;
        }
        Ok(batch)
    }

    pub fn step(&mut self, state: &mut ModelState) -> Result<StepOutcome> {
        let batch = self.batch(state, state.iteration)?;
        train_step(state, &batch, self.variant, &self.config)
    }

    /// Steps until `state.iteration == until`, calling `hook` after each step.
    pub fn run(
        &mut self,
        state: &mut ModelState,
        until: u64,
        mut hook: impl FnMut(&ModelState, &StepOutcome) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        let mut reports = Vec::new();
        while state.iteration < until {
            let out = self.step(state)?;
            hook(state, &out)?;
            reports.push(out.report);
        }
        Ok(reports)
    }
}

/// Monocular inference products.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub d_a: Tensor,
    pub d_h: Option<Tensor>,
    pub fused: Option<Tensor>,
}

impl Prediction {
    /// The final disparity: the CRF output when present, else `d_a`.
    pub fn disparity(&self) -> &Tensor {
        self.fused.as_ref().unwrap_or(&self.d_a)
    }
}

/// Runs `G_a`, then `H`, then the CRF fusion on single images `[N, 3, H, W]`.
/// The kernel banks are conditioned on the input image itself.
pub fn predict(state: &ModelState, image: &Tensor, variant: Variant) -> Result<Prediction> {
    let comps = variant.components();
    let mut g = Graph::new();
    let groups = [Group::Encoder, Group::GenA, Group::Hallucinator, Group::Crf];
    let mut nodes = ParamNodes::default();
    state.add_groups(&mut g, &mut nodes, &groups, false)?;
    let x = g.constant(image.clone())?;
    let d_a = state.generator_forward(&mut g, &nodes, x, Branch::A)?;
    let mut out = Prediction {
        d_a: g.value(d_a).clone(),
        d_h: None,
        fused: None,
    };
    if !comps.hallucinator {
        return Ok(out);
    }
    let d_h = state.hallucinate(&mut g, &nodes, d_a)?;
    out.d_h = Some(g.value(d_h).clone());
    if comps.coupled_disparity {
        let params = state.crf_params()?;
        let n = image.shape()[0];
        let banks = (0..n)
            .map(|i| build_kernels(&image.sample(i)?, &params).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let w = CrfNodes::from_params(&mut g, &params, false)?;
        let d = nmf_layer(&mut g, d_a, d_h, &banks, w, params.iterations)?;
        out.fused = Some(g.value(d).clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, DisparityLaw, SynthRecipe};
    use crate::networks::ModelSpec;

    fn tiny_spec() -> ModelSpec {
        let mut spec = ModelSpec {
            encoder: alloc::vec![4, 4],
            shared_depth: 2,
            hall_encoder: alloc::vec![2],
            disc: alloc::vec![4],
            ..ModelSpec::default()
        };
        spec.crf.window = 3;
        spec.crf.iterations = 2;
        spec
    }

    fn tiny_data() -> Vec<StereoSample> {
        synth_dataset(&SynthRecipe {
            width: 16,
            height: 8,
            law: DisparityLaw::Constant(2.0),
            d_max: 3.0,
            count: 4,
            ..SynthRecipe::default()
        })
        .unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_iters: 10,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn variants_nest() {
        for w in Variant::ALL.windows(2) {
            let (a, b) = (w[0].components(), w[1].components());
            assert!(b.includes(&a) && a != b);
        }
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn sgd_examples() {
        let mut st = ModelState::new(tiny_spec(), 0).unwrap();
        st.params.clear();
        st.params.insert("w".into(), Tensor::from_vec(alloc::vec![1.0]));
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut grads = BTreeMap::new();
        grads.insert(String::from("w"), Tensor::from_vec(alloc::vec![0.0]));
        sgd_step(&mut st, &grads, 0.1, &cfg).unwrap();
        assert_eq!(st.params["w"].item(), 1.0);
        grads.insert(String::from("w"), Tensor::from_vec(alloc::vec![1.0]));
        sgd_step(&mut st, &grads, 0.1, &cfg).unwrap();
        assert_eq!(st.params["w"].item(), 0.9);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut st = ModelState::new(tiny_spec(), 0).unwrap();
        st.params.clear();
        st.params.insert("w".into(), Tensor::from_vec(alloc::vec![1.0]));
        let cfg = TrainConfig {
            momentum: 0.9,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut grads = BTreeMap::new();
        grads.insert(String::from("w"), Tensor::from_vec(alloc::vec![0.5]));
        let (mut v, mut w) = (0.0f64, 1.0f64);
        for _ in 0..2 {
            v = 0.9 * v + 0.5 + 0.01 * w;
            w -= 0.1 * v;
            sgd_step(&mut st, &grads, 0.1, &cfg).unwrap();
        }
        assert_eq!(st.params["w"].item(), w);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut st = ModelState::new(tiny_spec(), 0).unwrap();
        let before = st.clone();
        let mut grads = BTreeMap::new();
        grads.insert(String::from("crf.log_alpha"), Tensor::from_vec(alloc::vec![f64::NAN, 0.0]));
        let err = sgd_step(&mut st, &grads, 0.1, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { .. }));
        assert_eq!(st, before);
    }

    #[test]
    fn schedule_divides_by_five() {
        let cfg = TrainConfig {
            lr: 1e-4,
            max_iters: 100_000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(29_999), 1e-4);
        assert_eq!(cfg.lr_at(30_000), 1e-4 / 5.0);
        assert_eq!(cfg.lr_at(60_000), 1e-4 / 25.0);
        let short = TrainConfig {
            max_iters: 1100,
            ..cfg
        };
        assert_eq!(short.milestones(), alloc::vec![600, 1100]);
    }

    #[test]
    fn baseline_has_no_discriminator_update() {
        let data = tiny_data();
        let mut st = ModelState::new(tiny_spec(), 1).unwrap();
        let mut tr = Trainer::new(config(), Variant::Baseline, &data).unwrap();
        let out = tr.step(&mut st).unwrap();
        assert!(out.updated.iter().all(|n| !n.starts_with("disc") && !n.starts_with("crf") && !n.starts_with("hall")));
        assert_eq!(out.report.d_loss, 0.0);
    }

    #[test]
    fn full_variant_moves_crf_and_stays_finite() {
        let data = tiny_data();
        let mut st = ModelState::new(tiny_spec(), 2).unwrap();
        let mut tr = Trainer::new(config(), Variant::CoupledGD, &data).unwrap();
        let before = st.params["crf.log_alpha"].clone();
        let out = tr.step(&mut st).unwrap();
        assert!(out.grad_norms["crf.log_alpha"] > 0.0);
        assert!(out.grad_norms["crf.log_beta"] > 0.0);
        assert_ne!(st.params["crf.log_alpha"], before);
        assert!(out.updated.iter().any(|n| n.starts_with("disc_a")));
        let reports = tr.run(&mut st, 10, |_, _| Ok(())).unwrap();
        assert_eq!(reports.len(), 9);
        assert!(reports.iter().all(|r| r.total.is_finite() && r.d_loss > 0.0));
    }

    #[test]
    fn update_masks_grow_with_variant() {
        let data = tiny_data();
        let mut prev: Option<BTreeSet<String>> = None;
        for v in Variant::ALL {
            let mut st = ModelState::new(tiny_spec(), 3).unwrap();
            let mut tr = Trainer::new(config(), v, &data).unwrap();
            let out = tr.step(&mut st).unwrap();
            if let Some(p) = &prev {
                assert!(p.is_subset(&out.updated), "{v} dropped an update");
            }
            prev = Some(out.updated);
        }
    }

    #[test]
    fn prediction_range_and_determinism() {
        let st = ModelState::new(tiny_spec(), 4).unwrap();
        let img = Tensor::zeros(&[1, 3, 8, 16]);
        let p = predict(&st, &img, Variant::CoupledGD).unwrap();
        let d_max = st.spec.d_max(16);
        assert!(p.disparity().data().iter().all(|v| *v > 0.0 && *v < d_max));
        assert_eq!(p, predict(&st, &img, Variant::CoupledGD).unwrap());
        assert!(predict(&st, &img, Variant::Baseline).unwrap().fused.is_none());
    }
}
