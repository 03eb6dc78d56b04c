//! Finite-difference checks over every differentiable primitive and a tiny
//! end-to-end model.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::crf::{build_kernels, couple, message_pass_node, nmf_layer, CrfNodes, CrfParams, KernelBank};
use crate::data::{synth_dataset, DisparityLaw, SynthRecipe, StereoSample};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::{Graph, NodeId, ReduceOp};
use crate::networks::{Group, ModelSpec, ModelState, ParamNodes};
use crate::objectives::{l1, loss_gan_pixel, LossWeights, Target};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{generator_objective, Batch, TrainConfig, Variant};
use crate::warp::{warp_node, Direction};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type CaseFn = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: CaseFn,
    tolerance: f64,
}

/// Values in `[lo, hi]` at least `0.05` away from every point in `kinks`.
fn away_from(shape: &[usize], lo: f64, hi: f64, kinks: &[f64], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::rand_uniform(shape, lo, hi, rng);
    for v in t.data_mut() {
        for k in kinks {
            if (*v - k).abs() < 0.05 {
                *v = if *v < *k { k - 0.05 - (*v - k).abs() } else { k + 0.05 + (*v - k) };
            }
        }
    }
    t
}

/// Disparities whose sample points stay at least 0.1 px from integers.
fn fractional_disparity(shape: &[usize], max: f64, rng: &mut Rng) -> Tensor {
    Tensor::new(
        shape,
        (0..shape.iter().product::<usize>())
            .map(|_| rng.below(max as usize) as f64 + rng.uniform_range(0.1, 0.9))
            .collect(),
    )
    .expect("shape and length agree")
}

fn bank(h: usize, w: usize, window: usize, rng: &mut Rng) -> Result<Arc<KernelBank>> {
    let img = Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, rng);
    let params = CrfParams {
        window,
        ..CrfParams::default()
    };
    Ok(Arc::new(build_kernels(&img, &params)?))
}

fn primitive_cases(rng: &mut Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    let mut push = |name, inputs, f: CaseFn| {
        cases.push(Case {
            name,
            inputs,
            f,
            tolerance: PRIMITIVE_TOL,
        })
    };
    let v = |rng: &mut Rng| Tensor::rand_uniform(&[2, 3, 4], -2.0, 2.0, rng);

    push("relu", alloc::vec![away_from(&[2, 3, 4], -2.0, 2.0, &[0.0], rng)], Box::new(|g, x| g.relu(x[0])));
    push("sigmoid", alloc::vec![v(rng)], Box::new(|g, x| g.sigmoid(x[0])));
    push("abs", alloc::vec![away_from(&[2, 3, 4], -2.0, 2.0, &[0.0], rng)], Box::new(|g, x| g.abs(x[0])));
    push("exp", alloc::vec![v(rng)], Box::new(|g, x| g.exp(x[0])));
    push("ln", alloc::vec![Tensor::rand_uniform(&[2, 3, 4], 0.5, 3.0, rng)], Box::new(|g, x| g.ln(x[0])));
    push("add", alloc::vec![v(rng), v(rng)], Box::new(|g, x| g.add(x[0], x[1])));
    push("sub", alloc::vec![v(rng), v(rng)], Box::new(|g, x| g.sub(x[0], x[1])));
    push("mul", alloc::vec![v(rng), v(rng)], Box::new(|g, x| g.mul(x[0], x[1])));
    push(
        "div",
        alloc::vec![v(rng), Tensor::rand_uniform(&[2, 3, 4], 0.5, 2.0, rng)],
        Box::new(|g, x| g.div(x[0], x[1])),
    );
    push(
        "scalar_broadcast",
        alloc::vec![v(rng), Tensor::rand_uniform(&[1], 0.5, 2.0, rng)],
        Box::new(|g, x| {
            let p = g.mul(x[0], x[1])?;
            let q = g.div(p, x[1])?;
            let r = g.sub(x[1], q)?;
            g.add(p, r)
        }),
    );
    push("scale", alloc::vec![v(rng)], Box::new(|g, x| g.scale(x[0], -1.7)));
    push(
        "clamp",
        alloc::vec![away_from(&[2, 3, 4], -1.0, 1.0, &[-0.5, 0.5], rng)],
        Box::new(|g, x| g.clamp(x[0], -0.5, 0.5)),
    );
    push("sum", alloc::vec![v(rng)], Box::new(|g, x| g.sum(x[0])));
    push("mean", alloc::vec![v(rng)], Box::new(|g, x| g.mean(x[0])));
    push(
        "reduce_axes",
        alloc::vec![v(rng)],
        Box::new(|g, x| g.reduce(ReduceOp::Mean, x[0], Some(&[0, 2]))),
    );
    for (name, stride, padding, k) in [("conv2d", 1, 1, 3), ("conv2d_stride2", 2, 1, 4)] {
        push(
            name,
            alloc::vec![
                Tensor::rand_uniform(&[2, 3, 6, 8], -1.0, 1.0, rng),
                Tensor::rand_uniform(&[4, 3, k, k], -0.5, 0.5, rng),
                Tensor::rand_uniform(&[4], -0.5, 0.5, rng),
            ],
            Box::new(move |g, x| g.conv2d(x[0], x[1], x[2], stride, padding)),
        );
    }
    push(
        "upsample2x",
        alloc::vec![Tensor::rand_uniform(&[1, 2, 3, 4], -1.0, 1.0, rng)],
        Box::new(|g, x| g.upsample2x(x[0])),
    );
    push(
        "concat_channels",
        alloc::vec![
            Tensor::rand_uniform(&[2, 1, 3, 4], -1.0, 1.0, rng),
            Tensor::rand_uniform(&[2, 2, 3, 4], -1.0, 1.0, rng)
        ],
        Box::new(|g, x| g.concat_channels(&[x[0], x[1]])),
    );
    push("reshape", alloc::vec![v(rng)], Box::new(|g, x| g.reshape(x[0], &[4, 6])));
    push("select", alloc::vec![v(rng)], Box::new(|g, x| g.select(x[0], 5)));
    push(
        "warp",
        alloc::vec![
            Tensor::rand_uniform(&[2, 3, 4, 12], 0.0, 1.0, rng),
            fractional_disparity(&[2, 1, 4, 12], 4.0, rng)
        ],
        Box::new(|g, x| warp_node(g, x[0], x[1], Direction::Forward)),
    );
    push(
        "warp_backward_direction",
        alloc::vec![
            Tensor::rand_uniform(&[1, 2, 3, 12], 0.0, 1.0, rng),
            fractional_disparity(&[1, 1, 3, 12], 4.0, rng)
        ],
        Box::new(|g, x| warp_node(g, x[0], x[1], Direction::Backward)),
    );
    let banks = alloc::vec![bank(6, 7, 5, rng)?, bank(6, 7, 5, rng)?];
    let b1 = banks.clone();
    push(
        "message_pass",
        alloc::vec![Tensor::rand_uniform(&[2, 1, 6, 7], 0.0, 5.0, rng)],
        Box::new(move |g, x| message_pass_node(g, x[0], &b1)),
    );
    let b2 = banks.clone();
    push(
        "nmf_layer",
        alloc::vec![
            Tensor::rand_uniform(&[2, 1, 6, 7], 0.0, 5.0, rng),
            Tensor::rand_uniform(&[2, 1, 6, 7], 0.0, 5.0, rng),
            Tensor::rand_uniform(&[2], -0.5, 0.5, rng),
            Tensor::rand_uniform(&[2], -2.0, -0.5, rng),
        ],
        Box::new(move |g, x| {
            let w = CrfNodes::from_log(g, x[2], x[3])?;
            nmf_layer(g, x[0], x[1], &b2, w, 4)
        }),
    );
    let b3 = banks;
    push(
        "couple",
        alloc::vec![
            Tensor::rand_uniform(&[2, 1, 6, 7], 0.0, 5.0, rng),
            Tensor::rand_uniform(&[2, 1, 6, 7], 0.0, 5.0, rng),
            Tensor::rand_uniform(&[2, 1, 6, 7], 0.1, 0.9, rng),
            Tensor::rand_uniform(&[2, 1, 6, 7], 0.1, 0.9, rng),
            Tensor::rand_uniform(&[2], -0.5, 0.5, rng),
            Tensor::rand_uniform(&[2], -2.0, -0.5, rng),
        ],
        Box::new(move |g, x| {
            let w = CrfNodes::from_log(g, x[4], x[5])?;
            let (d, s) = couple(g, (x[0], x[1]), (x[2], x[3]), &b3, w, 3)?;
            g.concat_channels(&[d, s])
        }),
    );
    push(
        "loss_gan_pixel",
        alloc::vec![Tensor::rand_uniform(&[1, 1, 3, 4], 0.1, 0.9, rng)],
        Box::new(|g, x| {
            let r = loss_gan_pixel(g, x[0], Target::Real)?;
            let f = loss_gan_pixel(g, x[0], Target::Fake)?;
            let f = g.scale(f, 0.5)?;
            g.add(r, f)
        }),
    );
    let mut b = Tensor::rand_uniform(&[1, 3, 3, 4], 0.0, 1.0, rng);
    let a = b.map(|v| v + 0.2);
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v += 0.4;
        }
    }
    push("l1", alloc::vec![a, b], Box::new(|g, x| l1(g, x[0], x[1])));
    Ok(cases)
}

fn tiny_model() -> Result<(ModelState, Vec<StereoSample>)> {
    let mut spec = ModelSpec {
        encoder: alloc::vec![3, 4],
        shared_depth: 2,
        hall_encoder: alloc::vec![2],
        disc: alloc::vec![3],
        ..ModelSpec::default()
    };
    spec.crf.window = 3;
    spec.crf.iterations = 2;
    let data = synth_dataset(&SynthRecipe {
        width: 12,
        height: 8,
        law: DisparityLaw::Planar { left: 0.3, right: 2.6 },
        d_max: 2.9,
        count: 2,
        seed: 5,
        ..SynthRecipe::default()
    })?;
    let mut state = ModelState::new(spec, 9)?;
    // Zero biases put every ReLU fed by a zero activation exactly on its
    // kink; random biases move the check point off it.
    let mut rng = Rng::new(10);
    for (name, t) in state.params.iter_mut() {
        if name.ends_with(".bias") {
            *t = Tensor::rand_uniform(t.shape(), 0.02, 0.2, &mut rng);
        }
    }
    Ok((state, data))
}

/// Gradient of the generator objective of `variant` with respect to the
/// parameters of `groups`; the rest of the model is held constant.
///
/// Parameters whose influence passes through a stop-gradient (the
/// hallucinator input and the `L_h` target) must be left out, or their
/// `L_h` weight set to zero, since the finite difference sees those paths.
fn composed_case(name: &'static str, variant: Variant, gamma: [f64; 3], groups: &[Group]) -> Result<Case> {
    let (state, data) = tiny_model()?;
    let refs: Vec<&StereoSample> = data.iter().collect();
    let batch = Batch::new(&refs, Some(&state.crf_params()?))?;
    let names: Vec<String> = state
        .params
        .keys()
        .filter(|n| Group::of(n).is_some_and(|g| groups.contains(&g)))
        .cloned()
        .collect();
    let inputs = names.iter().map(|n| state.params[n].clone()).collect();
    let config = TrainConfig {
        loss: LossWeights::new(gamma)?,
        ..TrainConfig::default()
    };
    Ok(Case {
        name,
        inputs,
        f: Box::new(move |g, x| {
            let mut nodes = ParamNodes::default();
            state.add_groups(g, &mut nodes, &Group::ALL, false)?;
            for (n, id) in names.iter().zip(x) {
                nodes.insert(n.clone(), *id);
            }
            generator_objective(g, &state, &nodes, &batch, variant, &config)
        }),
        tolerance: COMPOSED_TOL,
    })
}

/// Runs every case; a case's error is the worst over its inputs.
pub fn run_suite(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = Rng::new(seed);
    let mut cases = primitive_cases(&mut rng)?;
    cases.push(composed_case(
        "end_to_end_adversarial",
        Variant::Adversarial,
        [1.0, 0.0, 0.1],
        &Group::ALL,
    )?);
    cases.push(composed_case(
        "end_to_end_coupled_gd",
        Variant::CoupledGD,
        [1.0, 0.0, 0.1],
        &[Group::GenB, Group::Hallucinator, Group::DiscA, Group::DiscB, Group::Crf],
    )?);
    cases.push(composed_case(
        "end_to_end_coupled_gd_with_h",
        Variant::CoupledGD,
        [1.0, 1.0, 0.1],
        &[Group::Hallucinator, Group::DiscA, Group::DiscB, Group::Crf],
    )?);
    cases
        .into_iter()
        .map(|c| {
            let report = grad_check(&c.f, &c.inputs, EPS, &mut rng)?;
            Ok(CaseResult {
                name: c.name.into(),
                max_rel_error: report.max_rel_error,
                tolerance: c.tolerance,
            })
        })
        .collect()
}
