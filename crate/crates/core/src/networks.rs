//! Small fully-convolutional networks: two disparity generators sharing
//! their shallow encoder layers, the hallucination network that maps one
//! generator's disparity to the other's, and two pixel-level
//! discriminators.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Upsample2x,
    Relu,
}

/// A plain layer stack. Parameters of conv layer `i` are stored under
/// `{prefix}.{i}.weight` and `{prefix}.{i}.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    pub fn out_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .unwrap_or(self.in_channels)
    }

    /// Product of all conv strides divided by upsampling factors.
    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { stride, .. } => *stride,
                _ => 1,
            })
            .product()
    }

    /// Uniform `[-s, s]` weights with `s = sqrt(1 / fan_in)`, zero biases.
    pub fn init(&self, prefix: &str, rng: &mut Rng, params: &mut BTreeMap<String, Tensor>) {
        let mut channels = self.in_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Conv { out_channels, kernel, .. } = *layer {
                let fan_in = channels * kernel * kernel;
                let s = libm::sqrt(1.0 / fan_in as f64);
                params.insert(
                    format!("{prefix}.{i}.weight"),
                    Tensor::rand_uniform(&[out_channels, channels, kernel, kernel], -s, s, rng),
                );
                params.insert(format!("{prefix}.{i}.bias"), Tensor::zeros(&[out_channels]));
                channels = out_channels;
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, nodes: &ParamNodes, input: NodeId) -> Result<NodeId> {
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match *layer {
                Layer::Conv { stride, padding, .. } => {
                    let w = nodes.get(&format!("{prefix}.{i}.weight"))?;
                    let b = nodes.get(&format!("{prefix}.{i}.bias"))?;
                    g.conv2d(x, w, b, stride, padding)?
                }
                Layer::Upsample2x => g.upsample2x(x)?,
                Layer::Relu => g.relu(x)?,
            };
        }
        Ok(x)
    }
}

/// Desk-scale topology and output scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub image_channels: usize,
    /// Channels of the stride-2 encoder stages.
    pub encoder: Vec<usize>,
    /// How many leading encoder stages the two generators share.
    pub shared_depth: usize,
    pub hall_encoder: Vec<usize>,
    /// Hidden channels of the stride-1 discriminator layers.
    pub disc: Vec<usize>,
    /// Kernel of the stride-2 convolutions (padding 1).
    pub down_kernel: usize,
    /// Kernel of the stride-1 convolutions (same padding).
    pub kernel: usize,
    /// `d_max = d_max_ratio * W`.
    pub d_max_ratio: f64,
    pub crf: CrfParams,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            image_channels: 3,
            encoder: alloc::vec![16, 32, 64],
            shared_depth: 3,
            hall_encoder: alloc::vec![8, 16],
            disc: alloc::vec![16, 16],
            down_kernel: 4,
            kernel: 3,
            d_max_ratio: 0.3,
            crf: CrfParams::default(),
        }
    }
}

fn encoder_layers(channels: &[usize], down_kernel: usize) -> Vec<Layer> {
    channels
        .iter()
        .flat_map(|&c| {
            [
                Layer::Conv {
                    out_channels: c,
                    kernel: down_kernel,
                    stride: 2,
                    padding: (down_kernel - 1) / 2,
                },
                Layer::Relu,
            ]
        })
        .collect()
}

fn decoder_layers(channels: &[usize], kernel: usize) -> Vec<Layer> {
    let mut layers = Vec::new();
    for i in (0..channels.len()).rev() {
        let out = if i > 0 { channels[i - 1] } else { channels[0] };
        layers.push(Layer::Upsample2x);
        layers.push(Layer::Conv {
            out_channels: out,
            kernel,
            stride: 1,
            padding: kernel / 2,
        });
        layers.push(Layer::Relu);
    }
    layers.push(Layer::Conv {
        out_channels: 1,
        kernel,
        stride: 1,
        padding: kernel / 2,
    });
    layers
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    A,
    B,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::A => "gen_a",
            Branch::B => "gen_b",
        }
    }

    fn disc_prefix(self) -> &'static str {
        match self {
            Branch::A => "disc_a",
            Branch::B => "disc_b",
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.shared_depth > self.encoder.len() {
            return Err(Error::InvalidParameter(format!(
                "shared_depth {} must not exceed {} encoder stages",
                self.shared_depth,
                self.encoder.len()
            )));
        }
        if self.kernel % 2 == 0 || self.down_kernel < 2 || self.down_kernel % 2 != 0 {
            return Err(Error::InvalidParameter(
                "kernel must be odd and down_kernel even".into(),
            ));
        }
        if !(self.d_max_ratio > 0.0) {
            return Err(Error::InvalidParameter("d_max_ratio must be positive".into()));
        }
        self.crf.validate()
    }

    pub fn shared_encoder(&self) -> NetworkSpec {
        NetworkSpec {
            in_channels: self.image_channels,
            layers: encoder_layers(&self.encoder[..self.shared_depth], self.down_kernel),
        }
    }

    /// Unshared encoder stages followed by the decoder.
    pub fn branch(&self) -> NetworkSpec {
        let in_channels = if self.shared_depth == 0 {
            self.image_channels
        } else {
            self.encoder[self.shared_depth - 1]
        };
        let mut layers = encoder_layers(&self.encoder[self.shared_depth..], self.down_kernel);
        layers.extend(decoder_layers(&self.encoder, self.kernel));
        NetworkSpec { in_channels, layers }
    }

    pub fn hallucinator(&self) -> NetworkSpec {
        let mut layers = encoder_layers(&self.hall_encoder, self.down_kernel);
        layers.extend(decoder_layers(&self.hall_encoder, self.kernel));
        NetworkSpec { in_channels: 1, layers }
    }

    pub fn discriminator(&self) -> NetworkSpec {
        let mut layers = Vec::new();
        for &c in &self.disc {
            layers.push(Layer::Conv {
                out_channels: c,
                kernel: self.kernel,
                stride: 1,
                padding: self.kernel / 2,
            });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Conv {
            out_channels: 1,
            kernel: self.kernel,
            stride: 1,
            padding: self.kernel / 2,
        });
        NetworkSpec {
            in_channels: self.image_channels,
            layers,
        }
    }

    pub fn generator_stride(&self) -> usize {
        1 << self.encoder.len()
    }

    pub fn d_max(&self, width: usize) -> f64 {
        self.d_max_ratio * width as f64
    }

    /// Fresh parameters. Every network draws from its own forked stream.
    pub fn init_params(&self, seed: u64) -> BTreeMap<String, Tensor> {
        let base = Rng::new(seed);
        let mut params = BTreeMap::new();
        self.shared_encoder().init("encoder", &mut base.fork(0), &mut params);
        self.branch().init("gen_a", &mut base.fork(1), &mut params);
        self.branch().init("gen_b", &mut base.fork(2), &mut params);
        self.hallucinator().init("hall", &mut base.fork(3), &mut params);
        self.discriminator().init("disc_a", &mut base.fork(4), &mut params);
        self.discriminator().init("disc_b", &mut base.fork(5), &mut params);
        params.insert("crf.log_alpha".into(), Tensor::from_vec(self.crf.log_alpha.to_vec()));
        params.insert("crf.log_beta".into(), Tensor::from_vec(self.crf.log_beta.to_vec()));
        params
    }
}

/// Parameter groups, named by key prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    GenA,
    GenB,
    Hallucinator,
    DiscA,
    DiscB,
    Crf,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Encoder,
        Group::GenA,
        Group::GenB,
        Group::Hallucinator,
        Group::DiscA,
        Group::DiscB,
        Group::Crf,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Encoder => "encoder.",
            Group::GenA => "gen_a.",
            Group::GenB => "gen_b.",
            Group::Hallucinator => "hall.",
            Group::DiscA => "disc_a.",
            Group::DiscB => "disc_b.",
            Group::Crf => "crf.",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

/// Leaf nodes for every parameter of a [`ModelState`] on one graph.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes {
    ids: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }

    pub fn insert(&mut self, name: String, id: NodeId) {
        self.ids.insert(name, id);
    }
}

/// Network weights, optimizer slots and the training position.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Tensor>,
    /// Momentum buffers, created lazily on the first update of a parameter.
    pub momentum: BTreeMap<String, Tensor>,
    /// Number of completed training steps.
    pub iteration: u64,
}

impl ModelState {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = spec.init_params(seed);
        Ok(Self {
            spec,
            params,
            momentum: BTreeMap::new(),
            iteration: 0,
        })
    }

    /// CRF settings with the current learned weights.
    pub fn crf_params(&self) -> Result<CrfParams> {
        let get = |name: &str| -> Result<[f64; 2]> {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
            match t.data() {
                &[a, b] => Ok([a, b]),
                _ => Err(Error::InvalidShape {
                    op: "crf_params",
                    reason: format!("{name} must hold two values"),
                }),
            }
        };
        Ok(CrfParams {
            log_alpha: get("crf.log_alpha")?,
            log_beta: get("crf.log_beta")?,
            ..self.spec.crf.clone()
        })
    }

    /// Adds every parameter to `g`; names for which `trainable` holds become
    /// differentiable leaves, the rest constants.
    pub fn leaves(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Result<ParamNodes> {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.params {
            let id = if trainable(name) {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            ids.insert(name.clone(), id);
        }
        Ok(ParamNodes { ids })
    }

    /// Adds the parameters of `groups` to `g` and `nodes`.
    pub fn add_groups(&self, g: &mut Graph, nodes: &mut ParamNodes, groups: &[Group], trainable: bool) -> Result<()> {
        for (name, t) in &self.params {
            if Group::of(name).is_some_and(|grp| groups.contains(&grp)) {
                let id = if trainable {
                    g.param(t.clone())?
                } else {
                    g.constant(t.clone())?
                };
                nodes.insert(name.clone(), id);
            }
        }
        Ok(())
    }

    fn check_image(&self, g: &Graph, image: NodeId, channels: usize, stride: usize) -> Result<[usize; 4]> {
        let dims = g.value(image).dims4("network input")?;
        if dims[1] != channels {
            return Err(Error::ShapeMismatch {
                op: "network input",
                expected: alloc::vec![dims[0], channels, dims[2], dims[3]],
                found: dims.to_vec(),
            });
        }
        if dims[2] % stride != 0 || dims[3] % stride != 0 {
            return Err(Error::InvalidShape {
                op: "network input",
                reason: format!(
                    "spatial size {}x{} not divisible by encoder stride {stride}",
                    dims[2], dims[3]
                ),
            });
        }
        Ok(dims)
    }

    /// `d_max * sigmoid(x)`.
    fn disparity_head(&self, g: &mut Graph, x: NodeId, width: usize) -> Result<NodeId> {
        let s = g.sigmoid(x)?;
        g.scale(s, self.spec.d_max(width))
    }

    /// Disparity in `(0, d_max)` from an image with values in `[0, 1]`.
    pub fn generator_forward(&self, g: &mut Graph, nodes: &ParamNodes, image: NodeId, branch: Branch) -> Result<NodeId> {
        let [_, _, _, w] = self.check_image(g, image, self.spec.image_channels, self.spec.generator_stride())?;
        let shared = self.spec.shared_encoder().forward(g, "encoder", nodes, image)?;
        let x = self.spec.branch().forward(g, branch.prefix(), nodes, shared)?;
        self.disparity_head(g, x, w)
    }

    /// Approximates branch B's disparity from branch A's.
    pub fn hallucinate(&self, g: &mut Graph, nodes: &ParamNodes, d_a: NodeId) -> Result<NodeId> {
        let stride = 1 << self.spec.hall_encoder.len();
        let [_, _, _, w] = self.check_image(g, d_a, 1, stride)?;
        let normalized = g.scale(d_a, 1.0 / self.spec.d_max(w))?;
        let x = self.spec.hallucinator().forward(g, "hall", nodes, normalized)?;
        self.disparity_head(g, x, w)
    }

    /// Per-pixel real/fake scores in `(0, 1)`.
    pub fn discriminate(&self, g: &mut Graph, nodes: &ParamNodes, image: NodeId, which: Branch) -> Result<NodeId> {
        self.check_image(g, image, self.spec.image_channels, 1)?;
        let x = self.spec.discriminator().forward(g, which.disc_prefix(), nodes, image)?;
        g.sigmoid(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            encoder: alloc::vec![4, 6],
            shared_depth: 2,
            hall_encoder: alloc::vec![3],
            disc: alloc::vec![4],
            ..ModelSpec::default()
        }
    }

    fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::rand_uniform(&[n, 3, h, w], 0.0, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn generator_shape_and_range() {
        let state = ModelState::new(tiny_spec(), 1).unwrap();
        let mut g = Graph::new();
        let nodes = state.leaves(&mut g, |_| false).unwrap();
        let x = g.constant(image(2, 8, 12, 2)).unwrap();
        let d_max = state.spec.d_max(12);
        for branch in [Branch::A, Branch::B] {
            let d = state.generator_forward(&mut g, &nodes, x, branch).unwrap();
            let v = g.value(d);
            assert_eq!(v.shape(), &[2, 1, 8, 12]);
            assert!(v.data().iter().all(|&x| x > 0.0 && x < d_max));
        }
    }

    #[test]
    fn branches_differ() {
        let state = ModelState::new(tiny_spec(), 1).unwrap();
        let mut g = Graph::new();
        let nodes = state.leaves(&mut g, |_| false).unwrap();
        let x = g.constant(image(1, 8, 8, 3)).unwrap();
        let a = state.generator_forward(&mut g, &nodes, x, Branch::A).unwrap();
        let b = state.generator_forward(&mut g, &nodes, x, Branch::B).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) > 0.0);
    }

    #[test]
    fn indivisible_size_rejected() {
        let state = ModelState::new(tiny_spec(), 1).unwrap();
        let mut g = Graph::new();
        let nodes = state.leaves(&mut g, |_| false).unwrap();
        let x = g.constant(image(1, 6, 8, 3)).unwrap();
        assert!(matches!(
            state.generator_forward(&mut g, &nodes, x, Branch::A),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn hallucinator_shape_range_and_gradient() {
        let state = ModelState::new(tiny_spec(), 4).unwrap();
        let mut rng = Rng::new(5);
        let d = Tensor::rand_uniform(&[1, 1, 4, 6], 0.5, 1.5, &mut rng);
        let mut g = Graph::new();
        let nodes = state.leaves(&mut g, |_| false).unwrap();
        let di = g.constant(d.clone()).unwrap();
        let h = state.hallucinate(&mut g, &nodes, di).unwrap();
        assert_eq!(g.value(h).shape(), &[1, 1, 4, 6]);
        let d_max = state.spec.d_max(6);
        assert!(g.value(h).data().iter().all(|&x| x > 0.0 && x < d_max));

        let w = state.params["hall.0.weight"].clone();
        let r = grad_check(
            |g, x| {
                let nodes = state.leaves(g, |_| false)?;
                let mut ids = nodes.ids.clone();
                ids.insert("hall.0.weight".into(), x[1]);
                state.hallucinate(g, &ParamNodes { ids }, x[0])
            },
            &[d, w],
            1e-4,
            &mut rng,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{:?}", r.per_input);
    }

    #[test]
    fn discriminator_range_and_zero_weights() {
        let mut state = ModelState::new(tiny_spec(), 6).unwrap();
        let mut g = Graph::new();
        let nodes = state.leaves(&mut g, |_| false).unwrap();
        let x = g.constant(image(2, 5, 7, 7)).unwrap();
        let s = state.discriminate(&mut g, &nodes, x, Branch::A).unwrap();
        assert_eq!(g.value(s).shape(), &[2, 1, 5, 7]);
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));

        for (name, t) in state.params.iter_mut() {
            if name.starts_with("disc_b.") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut g = Graph::new();
        let nodes = state.leaves(&mut g, |_| false).unwrap();
        let x = g.constant(image(1, 5, 7, 8)).unwrap();
        let s = state.discriminate(&mut g, &nodes, x, Branch::B).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shared_encoder_couples_branches() {
        let state = ModelState::new(tiny_spec(), 9).unwrap();
        let input = image(1, 8, 8, 10);
        let run = |st: &ModelState| {
            let mut g = Graph::new();
            let nodes = st.leaves(&mut g, |_| false).unwrap();
            let x = g.constant(input.clone()).unwrap();
            let a = st.generator_forward(&mut g, &nodes, x, Branch::A).unwrap();
            let b = st.generator_forward(&mut g, &nodes, x, Branch::B).unwrap();
            (g.value(a).clone(), g.value(b).clone())
        };
        let (a0, b0) = run(&state);

        let mut enc = state.clone();
        let w = enc.params.get_mut("encoder.0.weight").unwrap();
        w.data_mut()[0] += 0.5;
        let (a1, b1) = run(&enc);
        assert!(a1.max_abs_diff(&a0) > 0.0);
        assert!(b1.max_abs_diff(&b0) > 0.0);

        let mut dec = state.clone();
        let key = dec.params.keys().find(|k| k.starts_with("gen_a.")).unwrap().clone();
        dec.params.get_mut(&key).unwrap().data_mut()[0] += 0.5;
        let (a2, b2) = run(&dec);
        assert!(a2.max_abs_diff(&a0) > 0.0);
        assert_eq!(b2, b0);
    }

    #[test]
    fn groups_cover_all_params() {
        let state = ModelState::new(ModelSpec::default(), 0).unwrap();
        for name in state.params.keys() {
            assert!(Group::of(name).is_some(), "{name}");
        }
    }
}
