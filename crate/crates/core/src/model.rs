//! The pyramid pair-matching network: two parameter-shared convolutional
//! towers, channel concatenation, a multi-rate atrous matching pyramid,
//! learned 1x1 fusion with max-pool downsampling, and a two-unit softmax
//! classifier head.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Cache, Graph, LayerKind, ParamStore, Wire};
use crate::mathf;
use crate::tensor::{ConvSpec, Tensor};

/// One backbone convolution stage (always followed by a relu).
#[derive(Clone, Debug)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvStage {
    pub fn downsampling(out_channels: usize) -> Self {
        ConvStage {
            out_channels,
            kernel: (3, 3),
            stride: (2, 2),
            padding: (1, 1),
        }
    }
}

/// Hyperparameters and geometry of the network.
///
/// The backbone replaces the original pretrained tower with a stack of
/// strided 3x3 stages; what the matching pyramid depends on is only the
/// output geometry, e.g. 160x80 inputs reduced by total stride 16 to a
/// 10x5 representation grid.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub backbone: Vec<ConvStage>,
    pub pyramid_rates: Vec<usize>,
    pub pyramid_kernel: (usize, usize),
    pub branch_channels: usize,
    pub fusion_channels: usize,
    pub pool_window: (usize, usize),
    pub pool_stride: (usize, usize),
    pub fc_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-geometry configuration: 160x80 inputs, stride-16 backbone with
    /// channels doubling from 16 and a final stage emitting `rep_channels`,
    /// three matching rates, 1024-unit hidden encoding.
    pub fn paper_scaled(rep_channels: usize) -> Self {
        ModelConfig {
            input_h: 160,
            input_w: 80,
            backbone: vec![
                ConvStage::downsampling(16),
                ConvStage::downsampling(32),
                ConvStage::downsampling(64),
                ConvStage::downsampling(rep_channels),
            ],
            pyramid_rates: vec![1, 2, 3],
            pyramid_kernel: (3, 3),
            branch_channels: rep_channels,
            fusion_channels: rep_channels,
            pool_window: (2, 2),
            pool_stride: (2, 2),
            fc_hidden: 1024,
            seed: 0,
        }
    }

    /// The published geometry: 1024 feature maps of size 10x5.
    pub fn paper() -> Self {
        Self::paper_scaled(1024)
    }

    /// Desk-scale configuration for tests and synthetic experiments:
    /// 32x16 inputs, stride-4 backbone, 8 representation channels.
    pub fn desk() -> Self {
        ModelConfig {
            input_h: 32,
            input_w: 16,
            backbone: vec![ConvStage::downsampling(16), ConvStage::downsampling(8)],
            pyramid_rates: vec![1, 2, 3],
            pyramid_kernel: (3, 3),
            branch_channels: 8,
            fusion_channels: 8,
            pool_window: (2, 2),
            pool_stride: (2, 2),
            fc_hidden: 128,
            seed: 0,
        }
    }

    pub fn rep_channels(&self) -> usize {
        self.backbone.last().map(|s| s.out_channels).unwrap_or(0)
    }

    pub fn total_stride(&self) -> (usize, usize) {
        self.backbone
            .iter()
            .fold((1, 1), |(h, w), s| (h * s.stride.0, w * s.stride.1))
    }

    fn branch_spec(&self, rate: usize) -> Result<ConvSpec> {
        let mut spec = ConvSpec::basic(self.branch_channels, self.pyramid_kernel).with_rate(rate);
        spec.padding = spec.same_padding()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.is_empty() {
            return Err(Error::InvalidSpec("backbone needs at least one stage".to_string()));
        }
        if self.pyramid_rates.is_empty() || self.pyramid_rates.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "pyramid rates must be nonempty and >= 1, got {:?}",
                self.pyramid_rates
            )));
        }
        if self.fc_hidden < 2 {
            return Err(Error::InvalidSpec(format!(
                "fc_hidden must be >= 2, got {}",
                self.fc_hidden
            )));
        }
        if self.branch_channels == 0 || self.fusion_channels == 0 {
            return Err(Error::InvalidSpec("channel counts must be >= 1".to_string()));
        }
        let (sh, sw) = self.total_stride();
        if !self.input_h.is_multiple_of(sh) || !self.input_w.is_multiple_of(sw) {
            return Err(Error::InvalidSpec(format!(
                "input {}x{} is not divisible by total backbone stride {}x{}",
                self.input_h, self.input_w, sh, sw
            )));
        }
        self.shape_trace().map(|_| ())
    }

    /// Pure shape calculus through the whole network; fails on any
    /// geometry with a zero-sized intermediate.
    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        let (mut c, mut h, mut w) = (3usize, self.input_h, self.input_w);
        for stage in &self.backbone {
            let spec = ConvSpec {
                out_channels: stage.out_channels,
                kernel: stage.kernel,
                stride: stage.stride,
                padding: stage.padding,
                rate: 1,
            };
            let (oh, ow) = spec.output_extent(h, w)?;
            c = stage.out_channels;
            h = oh;
            w = ow;
        }
        let rep = (c, h, w);
        let concat_channels = 2 * c;
        let mut branch = None;
        for &rate in &self.pyramid_rates {
            let spec = self.branch_spec(rate)?;
            let (bh, bw) = spec.output_extent(h, w)?;
            let this = (self.branch_channels, bh, bw);
            if let Some(prev) = branch {
                if prev != this {
                    return Err(Error::InvalidSpec(format!(
                        "pyramid branches disagree on extent: {prev:?} vs {this:?}"
                    )));
                }
            }
            branch = Some(this);
        }
        let branch = branch.expect("rates validated nonempty");
        let fused = (self.fusion_channels, branch.1, branch.2);
        if self.pool_window.0 > fused.1 || self.pool_window.1 > fused.2 {
            return Err(Error::InvalidSpec(format!(
                "pool window {:?} larger than fused map {}x{}",
                self.pool_window, fused.1, fused.2
            )));
        }
        let pooled = (
            self.fusion_channels,
            (fused.1 - self.pool_window.0) / self.pool_stride.0 + 1,
            (fused.2 - self.pool_window.1) / self.pool_stride.1 + 1,
        );
        Ok(ShapeTrace {
            rep,
            concat_channels,
            branch,
            fused,
            pooled,
            fc_in: pooled.0 * pooled.1 * pooled.2,
        })
    }
}

/// `(channels, height, width)` of each pipeline stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub rep: (usize, usize, usize),
    pub concat_channels: usize,
    pub branch: (usize, usize, usize),
    pub fused: (usize, usize, usize),
    pub pooled: (usize, usize, usize),
    pub fc_in: usize,
}

/// Classifier output for one pair: the two logits and the same-person
/// probability from the stabilized two-unit softmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    pub p: f32,
    pub logits: (f32, f32),
}

struct ModelNodes {
    rep_a: Wire,
    rep_b: Wire,
    branches: Vec<Wire>,
    fused: Wire,
    pooled: Wire,
    logits: Wire,
    prob: Wire,
}

/// A built network: layer graph plus its parameter store.
pub struct PpmnModel {
    config: ModelConfig,
    graph: Graph,
    params: ParamStore,
    nodes: ModelNodes,
}

fn kaiming_uniform(shape: [usize; 4], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = mathf::sqrt(6.0 / fan_in as f32);
    Tensor::uniform(shape, -bound, bound, rng)
}

impl PpmnModel {
    /// Initializes parameters (fan-in-scaled uniform draws, zero biases,
    /// seeded by `config.seed`) and assembles the graph. Both towers bind
    /// the same backbone parameter names.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();

        let mut in_c = 3usize;
        for (i, stage) in config.backbone.iter().enumerate() {
            let shape = [stage.out_channels, in_c, stage.kernel.0, stage.kernel.1];
            let fan_in = in_c * stage.kernel.0 * stage.kernel.1;
            params.insert(&format!("backbone.{i}.weight"), kaiming_uniform(shape, fan_in, &mut rng))?;
            params.insert(
                &format!("backbone.{i}.bias"),
                Tensor::zeros([1, stage.out_channels, 1, 1]),
            )?;
            in_c = stage.out_channels;
        }

        let concat_c = 2 * config.rep_channels();
        let (kh, kw) = config.pyramid_kernel;
        for (i, _) in config.pyramid_rates.iter().enumerate() {
            let shape = [config.branch_channels, concat_c, kh, kw];
            params.insert(
                &format!("pyramid.{i}.weight"),
                kaiming_uniform(shape, concat_c * kh * kw, &mut rng),
            )?;
            params.insert(
                &format!("pyramid.{i}.bias"),
                Tensor::zeros([1, config.branch_channels, 1, 1]),
            )?;
        }

        let fusion_in = config.branch_channels * config.pyramid_rates.len();
        params.insert(
            "fusion.weight",
            kaiming_uniform([config.fusion_channels, fusion_in, 1, 1], fusion_in, &mut rng),
        )?;
        params.insert("fusion.bias", Tensor::zeros([1, config.fusion_channels, 1, 1]))?;

        let trace = config.shape_trace()?;
        params.insert(
            "fc1.weight",
            kaiming_uniform([config.fc_hidden, trace.fc_in, 1, 1], trace.fc_in, &mut rng),
        )?;
        params.insert("fc1.bias", Tensor::zeros([1, config.fc_hidden, 1, 1]))?;
        params.insert(
            "fc2.weight",
            kaiming_uniform([2, config.fc_hidden, 1, 1], config.fc_hidden, &mut rng),
        )?;
        params.insert("fc2.bias", Tensor::zeros([1, 2, 1, 1]))?;

        let mut graph = Graph::new();
        let image_a = graph.add_input("image_a");
        let image_b = graph.add_input("image_b");

        let tower = |tag: &str, input: Wire, graph: &mut Graph| -> Result<Wire> {
            let mut cursor = input;
            for (i, stage) in config.backbone.iter().enumerate() {
                let spec = ConvSpec {
                    out_channels: stage.out_channels,
                    kernel: stage.kernel,
                    stride: stage.stride,
                    padding: stage.padding,
                    rate: 1,
                };
                cursor = graph.add(
                    &format!("{tag}.conv{i}"),
                    LayerKind::Conv {
                        spec,
                        weights: format!("backbone.{i}.weight"),
                        bias: format!("backbone.{i}.bias"),
                    },
                    &[cursor],
                )?;
                cursor = graph.add(&format!("{tag}.relu{i}"), LayerKind::Relu, &[cursor])?;
            }
            Ok(cursor)
        };
        let rep_a = tower("tower_a", image_a, &mut graph)?;
        let rep_b = tower("tower_b", image_b, &mut graph)?;
        let concat = graph.add("concat", LayerKind::ConcatChannels, &[rep_a, rep_b])?;

        let mut branches = Vec::new();
        for (i, &rate) in config.pyramid_rates.iter().enumerate() {
            let spec = config.branch_spec(rate)?;
            let conv = graph.add(
                &format!("pyramid.{i}.conv"),
                LayerKind::Conv {
                    spec,
                    weights: format!("pyramid.{i}.weight"),
                    bias: format!("pyramid.{i}.bias"),
                },
                &[concat],
            )?;
            branches.push(graph.add(&format!("pyramid.{i}.relu"), LayerKind::Relu, &[conv])?);
        }

        let mut stacked = branches[0];
        for (i, &branch) in branches.iter().enumerate().skip(1) {
            stacked = graph.add(
                &format!("stack{i}"),
                LayerKind::ConcatChannels,
                &[stacked, branch],
            )?;
        }
        let fusion_conv = graph.add(
            "fusion.conv",
            LayerKind::Conv {
                spec: ConvSpec::basic(config.fusion_channels, (1, 1)),
                weights: "fusion.weight".to_string(),
                bias: "fusion.bias".to_string(),
            },
            &[stacked],
        )?;
        let fused = graph.add("fusion.relu", LayerKind::Relu, &[fusion_conv])?;
        let pooled = graph.add(
            "pool",
            LayerKind::MaxPool {
                window: config.pool_window,
                stride: config.pool_stride,
            },
            &[fused],
        )?;
        let fc1 = graph.add(
            "fc1",
            LayerKind::Fc {
                weights: "fc1.weight".to_string(),
                bias: "fc1.bias".to_string(),
            },
            &[pooled],
        )?;
        let hidden = graph.add("fc1.relu", LayerKind::Relu, &[fc1])?;
        let logits = graph.add(
            "fc2",
            LayerKind::Fc {
                weights: "fc2.weight".to_string(),
                bias: "fc2.bias".to_string(),
            },
            &[hidden],
        )?;
        let prob = graph.add("prob", LayerKind::SoftmaxPair, &[logits])?;

        Ok(PpmnModel {
            config,
            graph,
            params,
            nodes: ModelNodes {
                rep_a,
                rep_b,
                branches,
                fused,
                pooled,
                logits,
                prob,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Disjoint borrows for harnesses that re-evaluate the graph while
    /// perturbing parameters.
    pub fn parts_mut(&mut self) -> (&Graph, &mut ParamStore) {
        (&self.graph, &mut self.params)
    }

    pub fn logits_wire(&self) -> Wire {
        self.nodes.logits
    }

    pub fn prob_wire(&self) -> Wire {
        self.nodes.prob
    }

    pub fn branch_wires(&self) -> &[Wire] {
        &self.nodes.branches
    }

    pub fn fused_wire(&self) -> Wire {
        self.nodes.fused
    }

    pub fn pooled_wire(&self) -> Wire {
        self.nodes.pooled
    }

    /// The six parameter groups: shared towers, one group per matching
    /// rate, fusion weights and the classifier head.
    pub fn param_groups(&self) -> Vec<(String, Vec<String>)> {
        let mut groups: Vec<(String, Vec<String>)> = Vec::new();
        let backbone = (0..self.config.backbone.len())
            .flat_map(|i| [format!("backbone.{i}.weight"), format!("backbone.{i}.bias")])
            .collect();
        groups.push(("backbone".to_string(), backbone));
        for (i, &rate) in self.config.pyramid_rates.iter().enumerate() {
            let key = format!("pyramid.r{rate}");
            let names = [format!("pyramid.{i}.weight"), format!("pyramid.{i}.bias")];
            if let Some((_, existing)) = groups.iter_mut().find(|(k, _)| *k == key) {
                existing.extend(names);
            } else {
                groups.push((key, names.into()));
            }
        }
        groups.push(("fusion".to_string(), vec!["fusion.weight".into(), "fusion.bias".into()]));
        groups.push((
            "classifier".to_string(),
            vec!["fc1.weight".into(), "fc1.bias".into(), "fc2.weight".into(), "fc2.bias".into()],
        ));
        groups
    }

    fn check_input(&self, name: &str, image: &Tensor) -> Result<()> {
        let (_, c, h, w) = image.dims();
        if c != 3 || h != self.config.input_h || w != self.config.input_w {
            return Err(Error::ShapeMismatch(format!(
                "{name} has shape {:?}, expected (n, 3, {}, {})",
                image.shape(),
                self.config.input_h,
                self.config.input_w
            )));
        }
        Ok(())
    }

    /// Runs both shared-parameter towers: `R = f(I; theta_1)` for each image.
    pub fn extract_representations(&self, image_a: &Tensor, image_b: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input("image_a", image_a)?;
        self.check_input("image_b", image_b)?;
        let cache = self.graph.forward_to(
            &self.params,
            &[("image_a", image_a), ("image_b", image_b)],
            &[],
            &[self.nodes.rep_a, self.nodes.rep_b],
        )?;
        Ok((
            cache.value(self.nodes.rep_a).expect("evaluated").clone(),
            cache.value(self.nodes.rep_b).expect("evaluated").clone(),
        ))
    }

    /// Applies the matching pyramid to a pair of representations: channel
    /// concatenation followed by one same-padded atrous convolution (plus
    /// relu) per rate. Every branch map keeps the representation grid.
    pub fn pyramid_match(&self, rep_a: &Tensor, rep_b: &Tensor) -> Result<Vec<Tensor>> {
        if rep_a.shape() != rep_b.shape() {
            return Err(Error::ShapeMismatch(format!(
                "representations differ: {:?} vs {:?}",
                rep_a.shape(),
                rep_b.shape()
            )));
        }
        let cache = self.graph.forward_to(
            &self.params,
            &[],
            &[
                (self.nodes.rep_a, rep_a.clone()),
                (self.nodes.rep_b, rep_b.clone()),
            ],
            &self.nodes.branches,
        )?;
        Ok(self
            .nodes
            .branches
            .iter()
            .map(|&w| cache.value(w).expect("evaluated").clone())
            .collect())
    }

    /// Fuses the branch maps with the learned 1x1 weighting (plus relu) and
    /// downsamples by max pooling, yielding the final correspondence map.
    pub fn fuse_and_pool(&self, branch_maps: &[Tensor]) -> Result<Tensor> {
        if branch_maps.len() != self.nodes.branches.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} branch maps, got {}",
                self.nodes.branches.len(),
                branch_maps.len()
            )));
        }
        let overrides: Vec<(Wire, Tensor)> = self
            .nodes
            .branches
            .iter()
            .copied()
            .zip(branch_maps.iter().cloned())
            .collect();
        let cache = self
            .graph
            .forward_to(&self.params, &[], &overrides, &[self.nodes.pooled])?;
        Ok(cache.value(self.nodes.pooled).expect("evaluated").clone())
    }

    /// Encodes the final correspondence map through the two fully connected
    /// layers and the two-unit softmax.
    pub fn classify_pair(&self, s_final: &Tensor) -> Result<Vec<PairScore>> {
        let cache = self.graph.forward_to(
            &self.params,
            &[],
            &[(self.nodes.pooled, s_final.clone())],
            &[self.nodes.logits, self.nodes.prob],
        )?;
        self.scores_from_cache(&cache)
    }

    pub fn scores_from_cache(&self, cache: &Cache) -> Result<Vec<PairScore>> {
        let logits = cache
            .value(self.nodes.logits)
            .ok_or_else(|| Error::InvalidArgument("cache lacks classifier logits".to_string()))?;
        let probs = cache
            .value(self.nodes.prob)
            .ok_or_else(|| Error::InvalidArgument("cache lacks pair probabilities".to_string()))?;
        let n = logits.dims().0;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(PairScore {
                p: probs.at(i, 1, 0, 0),
                logits: (logits.at(i, 0, 0, 0), logits.at(i, 1, 0, 0)),
            });
        }
        Ok(out)
    }

    /// Whole-network forward returning the cache needed for backward.
    /// Note the pipeline is not symmetric in its two images (concatenation
    /// has an order); scoring always passes (probe, gallery).
    pub fn forward_pair_cached(&self, image_a: &Tensor, image_b: &Tensor) -> Result<(Vec<PairScore>, Cache)> {
        self.check_input("image_a", image_a)?;
        self.check_input("image_b", image_b)?;
        if image_a.dims().0 != image_b.dims().0 {
            return Err(Error::ShapeMismatch(format!(
                "batch sizes differ: {} vs {}",
                image_a.dims().0,
                image_b.dims().0
            )));
        }
        let cache = self
            .graph
            .forward(&self.params, &[("image_a", image_a), ("image_b", image_b)])?;
        let scores = self.scores_from_cache(&cache)?;
        Ok((scores, cache))
    }

    pub fn forward_pair(&self, image_a: &Tensor, image_b: &Tensor) -> Result<Vec<PairScore>> {
        self.forward_pair_cached(image_a, image_b).map(|(s, _)| s)
    }

    /// Accumulates parameter gradients from a loss gradient at the logits.
    pub fn backward_from_logits(&mut self, cache: &Cache, grad_logits: Tensor) -> Result<()> {
        self.graph
            .backward(&mut self.params, cache, &[(self.nodes.logits, grad_logits)])
    }
}
