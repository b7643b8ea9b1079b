//! Layer graph: named parameter store, acyclic composition of the kernels
//! in [`crate::ops`], forward/backward orchestration with gradient
//! accumulation for shared parameters, and a finite-difference gradient
//! checker backed by an independent float64 re-evaluation of the graph.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mix_seed;
use crate::ops::{
    concat_channels, concat_channels_backward, conv2d_backward, conv2d_forward, fc_backward,
    fc_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    softmax_pair_backward, softmax_pair_forward, ArgmaxMap,
};
use crate::tensor::{ConvSpec, Tensor};

/// One named parameter: value, accumulated gradient and momentum buffer,
/// always shape-identical.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
}

/// Ordered map from parameter name to [`Param`]. Iteration follows
/// insertion order, which fixes checkpoint layout and update order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Param)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.contains(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let shape = value.shape();
        self.entries.push((
            name.to_string(),
            Param {
                value,
                grad: Tensor::zeros(shape),
                momentum: Tensor::zeros(shape),
            },
        ));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a parameter value, keeping grad/momentum; the shape must
    /// match the stored one.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let param = self.get_mut(name)?;
        if param.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name} has shape {:?}, refusing value of shape {:?}",
                param.value.shape(),
                value.shape()
            )));
        }
        param.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.entries.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar parameter values.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.value.len()).sum()
    }
}

/// The layer kinds the pair-matching network needs; this is deliberately
/// not a general autodiff tape.
#[derive(Clone, Debug)]
pub enum LayerKind {
    Conv {
        spec: ConvSpec,
        weights: String,
        bias: String,
    },
    Relu,
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
    Fc {
        weights: String,
        bias: String,
    },
    ConcatChannels,
    SoftmaxPair,
}

impl LayerKind {
    fn arity(&self) -> usize {
        match self {
            LayerKind::ConcatChannels => 2,
            _ => 1,
        }
    }
}

/// Reference to a value in the graph: an external input slot or the output
/// of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wire {
    Input(usize),
    Node(usize),
}

pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<Wire>,
}

/// Acyclic layer graph. Nodes may only wire to inputs and previously added
/// nodes, so construction order is a topological order and cycles cannot
/// be expressed.
#[derive(Default)]
pub struct Graph {
    input_names: Vec<String>,
    nodes: Vec<LayerNode>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn add_input(&mut self, name: &str) -> Wire {
        self.input_names.push(name.to_string());
        Wire::Input(self.input_names.len() - 1)
    }

    pub fn add(&mut self, name: &str, kind: LayerKind, inputs: &[Wire]) -> Result<Wire> {
        if inputs.len() != kind.arity() {
            return Err(Error::InvalidWire(format!(
                "node {name} expects {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        for wire in inputs {
            match *wire {
                Wire::Input(i) if i >= self.input_names.len() => {
                    return Err(Error::InvalidWire(format!(
                        "node {name} wires to undeclared input {i}"
                    )));
                }
                Wire::Node(i) if i >= self.nodes.len() => {
                    return Err(Error::InvalidWire(format!(
                        "node {name} wires forward to node {i}; wire only to existing nodes"
                    )));
                }
                _ => {}
            }
        }
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::InvalidWire(format!("duplicate node name {name}")));
        }
        self.nodes.push(LayerNode {
            name: name.to_string(),
            kind,
            inputs: inputs.to_vec(),
        });
        Ok(Wire::Node(self.nodes.len() - 1))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_named(&self, name: &str) -> Option<Wire> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(Wire::Node)
    }

    /// Marks every node needed to produce `targets`, stopping at overridden
    /// nodes, and verifies the required external inputs are bound.
    fn needed_set(
        &self,
        bound_inputs: &[Option<&Tensor>],
        overridden: &[bool],
        targets: &[Wire],
    ) -> Result<Vec<bool>> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<Wire> = targets.to_vec();
        while let Some(wire) = stack.pop() {
            match wire {
                Wire::Input(i) => {
                    if bound_inputs[i].is_none() {
                        return Err(Error::UnboundInput(self.input_names[i].clone()));
                    }
                }
                Wire::Node(i) => {
                    if overridden[i] || needed[i] {
                        continue;
                    }
                    needed[i] = true;
                    stack.extend_from_slice(&self.nodes[i].inputs);
                }
            }
        }
        Ok(needed)
    }

    /// Evaluates every node; the usual entry point for training.
    pub fn forward(&self, params: &ParamStore, inputs: &[(&str, &Tensor)]) -> Result<Cache> {
        let targets: Vec<Wire> = (0..self.nodes.len()).map(Wire::Node).collect();
        self.forward_to(params, inputs, &[], &targets)
    }

    /// Evaluates only the ancestors of `targets`. `overrides` inject values
    /// for intermediate nodes, which then act as evaluation boundaries —
    /// this is how the model exposes its pipeline stages individually.
    pub fn forward_to(
        &self,
        params: &ParamStore,
        inputs: &[(&str, &Tensor)],
        overrides: &[(Wire, Tensor)],
        targets: &[Wire],
    ) -> Result<Cache> {
        let mut bound: Vec<Option<&Tensor>> = vec![None; self.input_names.len()];
        for (name, tensor) in inputs {
            let slot = self
                .input_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::UnboundInput(format!("{name} is not a declared input")))?;
            bound[slot] = Some(tensor);
        }

        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut overridden = vec![false; self.nodes.len()];
        for (wire, tensor) in overrides {
            match *wire {
                Wire::Node(i) if i < self.nodes.len() => {
                    values[i] = Some(tensor.clone());
                    overridden[i] = true;
                }
                _ => {
                    return Err(Error::InvalidWire(
                        "overrides must reference graph nodes".to_string(),
                    ))
                }
            }
        }

        let needed = self.needed_set(&bound, &overridden, targets)?;
        let mut aux: Vec<Option<ArgmaxMap>> = vec![None; self.nodes.len()];

        for (i, node) in self.nodes.iter().enumerate() {
            if !needed[i] {
                continue;
            }
            let value = {
                let arg = |w: Wire| -> Result<&Tensor> {
                    match w {
                        Wire::Input(j) => {
                            bound[j].ok_or_else(|| Error::UnboundInput(self.input_names[j].clone()))
                        }
                        Wire::Node(j) => values[j].as_ref().ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "node {} consumed before evaluation",
                                self.nodes[j].name
                            ))
                        }),
                    }
                };
                match &node.kind {
                    LayerKind::Conv { spec, weights, bias } => {
                        let w = &params.get(weights)?.value;
                        let b = &params.get(bias)?.value;
                        conv2d_forward(arg(node.inputs[0])?, w, b.data(), spec)?
                    }
                    LayerKind::Relu => relu_forward(arg(node.inputs[0])?),
                    LayerKind::MaxPool { window, stride } => {
                        let (out, map) = maxpool_forward(arg(node.inputs[0])?, *window, *stride)?;
                        aux[i] = Some(map);
                        out
                    }
                    LayerKind::Fc { weights, bias } => {
                        let w = &params.get(weights)?.value;
                        let b = &params.get(bias)?.value;
                        fc_forward(arg(node.inputs[0])?, w, b.data())?
                    }
                    LayerKind::ConcatChannels => {
                        concat_channels(arg(node.inputs[0])?, arg(node.inputs[1])?)?
                    }
                    LayerKind::SoftmaxPair => softmax_pair_forward(arg(node.inputs[0])?)?,
                }
            };
            values[i] = Some(value);
        }

        Ok(Cache {
            inputs: inputs
                .iter()
                .map(|(n, t)| (n.to_string(), (*t).clone()))
                .collect(),
            values,
            aux,
        })
    }

    /// Reverse pass. `seeds` give output gradients for evaluated nodes;
    /// parameter gradients accumulate (`+=`) into the store, so parameters
    /// bound by several nodes (the shared towers) receive the sum of all
    /// contributions. Grads are not zeroed here.
    pub fn backward(
        &self,
        params: &mut ParamStore,
        cache: &Cache,
        seeds: &[(Wire, Tensor)],
    ) -> Result<()> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (wire, seed) in seeds {
            let i = match *wire {
                Wire::Node(i) if i < self.nodes.len() => i,
                _ => {
                    return Err(Error::InvalidWire(
                        "gradient seeds must reference graph nodes".to_string(),
                    ))
                }
            };
            let value = cache.values[i].as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "gradient seed at node {} which was not evaluated",
                    self.nodes[i].name
                ))
            })?;
            if value.shape() != seed.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "seed shape {:?} does not match node {} output {:?}",
                    seed.shape(),
                    self.nodes[i].name,
                    value.shape()
                )));
            }
            accumulate(&mut grads[i], seed.clone());
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let arg = |w: Wire| -> Result<&Tensor> {
                match w {
                    Wire::Input(j) => cache
                        .input_named(&self.input_names[j])
                        .ok_or_else(|| Error::UnboundInput(self.input_names[j].clone())),
                    Wire::Node(j) => cache.values[j].as_ref().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "backward needs node {} which was not evaluated",
                            self.nodes[j].name
                        ))
                    }),
                }
            };
            match &node.kind {
                LayerKind::Conv { spec, weights, bias } => {
                    let input = arg(node.inputs[0])?;
                    let (gi, gw, gb) = {
                        let w = &params.get(weights)?.value;
                        conv2d_backward(input, w, spec, &grad)?
                    };
                    add_assign(&mut params.get_mut(weights)?.grad, &gw)?;
                    add_bias(&mut params.get_mut(bias)?.grad, &gb)?;
                    propagate(&mut grads, node.inputs[0], gi);
                }
                LayerKind::Relu => {
                    let gi = relu_backward(arg(node.inputs[0])?, &grad)?;
                    propagate(&mut grads, node.inputs[0], gi);
                }
                LayerKind::MaxPool { .. } => {
                    let map = cache.aux[i].as_ref().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "pool node {} has no cached argmax map",
                            node.name
                        ))
                    })?;
                    let gi = maxpool_backward(map, &grad)?;
                    propagate(&mut grads, node.inputs[0], gi);
                }
                LayerKind::Fc { weights, bias } => {
                    let input = arg(node.inputs[0])?;
                    let (gi, gw, gb) = {
                        let w = &params.get(weights)?.value;
                        fc_backward(input, w, &grad)?
                    };
                    add_assign(&mut params.get_mut(weights)?.grad, &gw)?;
                    add_bias(&mut params.get_mut(bias)?.grad, &gb)?;
                    propagate(&mut grads, node.inputs[0], gi);
                }
                LayerKind::ConcatChannels => {
                    let a_channels = arg(node.inputs[0])?.dims().1;
                    let (ga, gb) = concat_channels_backward(&grad, a_channels)?;
                    propagate(&mut grads, node.inputs[0], ga);
                    propagate(&mut grads, node.inputs[1], gb);
                }
                LayerKind::SoftmaxPair => {
                    let probs = cache.values[i].as_ref().expect("own value cached");
                    let gi = softmax_pair_backward(probs, &grad)?;
                    propagate(&mut grads, node.inputs[0], gi);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data().iter()) {
                *a += b;
            }
        }
        None => *slot = Some(grad),
    }
}

fn propagate(grads: &mut [Option<Tensor>], wire: Wire, grad: Tensor) {
    // Gradients with respect to external inputs are dropped; the engine
    // optimizes parameters, not images.
    if let Wire::Node(j) = wire {
        accumulate(&mut grads[j], grad);
    }
}

fn add_assign(target: &mut Tensor, delta: &Tensor) -> Result<()> {
    if target.shape() != delta.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient shape {:?} does not match parameter {:?}",
            delta.shape(),
            target.shape()
        )));
    }
    for (a, b) in target.data_mut().iter_mut().zip(delta.data().iter()) {
        *a += b;
    }
    Ok(())
}

fn add_bias(target: &mut Tensor, delta: &[f32]) -> Result<()> {
    if target.len() != delta.len() {
        return Err(Error::ShapeMismatch(format!(
            "bias gradient length {} does not match parameter {:?}",
            delta.len(),
            target.shape()
        )));
    }
    for (a, b) in target.data_mut().iter_mut().zip(delta.iter()) {
        *a += b;
    }
    Ok(())
}

/// Forward results: external inputs, per-node outputs (absent for nodes a
/// partial evaluation skipped) and pool argmax maps, enough for backward.
pub struct Cache {
    inputs: Vec<(String, Tensor)>,
    values: Vec<Option<Tensor>>,
    aux: Vec<Option<ArgmaxMap>>,
}

impl Cache {
    pub fn value(&self, wire: Wire) -> Option<&Tensor> {
        match wire {
            Wire::Node(i) => self.values.get(i).and_then(|v| v.as_ref()),
            Wire::Input(_) => None,
        }
    }

    pub fn input_named(&self, name: &str) -> Option<&Tensor> {
        self.inputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

/// Independent float64 re-evaluation of a graph, written as plain naive
/// loops with no lowering. The gradient checker differentiates this path
/// numerically, so it must not share code with the f32 kernels.
pub mod shadow {
    use super::*;

    #[derive(Clone, Debug)]
    pub struct ShadowValue {
        pub shape: [usize; 4],
        pub data: Vec<f64>,
    }

    impl ShadowValue {
        fn from_tensor(t: &Tensor) -> Self {
            ShadowValue {
                shape: t.shape(),
                data: t.data().iter().map(|&v| v as f64).collect(),
            }
        }

        fn zeros(shape: [usize; 4]) -> Self {
            ShadowValue {
                shape,
                data: vec![0.0; shape.iter().product()],
            }
        }

        #[inline]
        fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
            self.data[((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w]
        }

        #[inline]
        fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
            let i = ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w;
            self.data[i] = v;
        }
    }

    fn conv(input: &ShadowValue, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<ShadowValue> {
        let (out_h, out_w) = spec.output_extent(input.shape[2], input.shape[3])?;
        let batch = input.shape[0];
        let in_c = input.shape[1];
        let (kh, kw) = spec.kernel;
        let mut out = ShadowValue::zeros([batch, spec.out_channels, out_h, out_w]);
        for n in 0..batch {
            for oc in 0..spec.out_channels {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = bias.data()[oc] as f64;
                        for ic in 0..in_c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * spec.stride.0 + ki * spec.rate) as isize
                                        - spec.padding.0 as isize;
                                    let ix = (ox * spec.stride.1 + kj * spec.rate) as isize
                                        - spec.padding.1 as isize;
                                    if iy >= 0
                                        && (iy as usize) < input.shape[2]
                                        && ix >= 0
                                        && (ix as usize) < input.shape[3]
                                    {
                                        acc += input.at(n, ic, iy as usize, ix as usize)
                                            * weights.at(oc, ic, ki, kj) as f64;
                                    }
                                }
                            }
                        }
                        out.set(n, oc, oy, ox, acc);
                    }
                }
            }
        }
        Ok(out)
    }

    fn maxpool(input: &ShadowValue, window: (usize, usize), stride: (usize, usize)) -> Result<ShadowValue> {
        let [batch, channels, in_h, in_w] = input.shape;
        if window.0 > in_h || window.1 > in_w {
            return Err(Error::InvalidSpec("pool window larger than input".to_string()));
        }
        let out_h = (in_h - window.0) / stride.0 + 1;
        let out_w = (in_w - window.1) / stride.1 + 1;
        let mut out = ShadowValue::zeros([batch, channels, out_h, out_w]);
        for n in 0..batch {
            for c in 0..channels {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..window.0 {
                            for kx in 0..window.1 {
                                best = best.max(input.at(n, c, oy * stride.0 + ky, ox * stride.1 + kx));
                            }
                        }
                        out.set(n, c, oy, ox, best);
                    }
                }
            }
        }
        Ok(out)
    }

    fn fc(input: &ShadowValue, weights: &Tensor, bias: &Tensor) -> Result<ShadowValue> {
        let batch = input.shape[0];
        let features = input.shape[1] * input.shape[2] * input.shape[3];
        let (out_f, in_f, _, _) = weights.dims();
        if in_f != features {
            return Err(Error::ShapeMismatch(format!(
                "shadow fc expects {in_f} features, input flattens to {features}"
            )));
        }
        let mut out = ShadowValue::zeros([batch, out_f, 1, 1]);
        for n in 0..batch {
            for o in 0..out_f {
                let mut acc = bias.data()[o] as f64;
                for k in 0..features {
                    acc += weights.data()[o * features + k] as f64 * input.data[n * features + k];
                }
                out.data[n * out_f + o] = acc;
            }
        }
        Ok(out)
    }

    fn concat(a: &ShadowValue, b: &ShadowValue) -> Result<ShadowValue> {
        let [n, ac, h, w] = a.shape;
        let bc = b.shape[1];
        if [n, h, w] != [b.shape[0], b.shape[2], b.shape[3]] {
            return Err(Error::ShapeMismatch("shadow concat extent mismatch".to_string()));
        }
        let mut out = ShadowValue::zeros([n, ac + bc, h, w]);
        let plane = h * w;
        for i in 0..n {
            let dst = &mut out.data[i * (ac + bc) * plane..(i + 1) * (ac + bc) * plane];
            dst[..ac * plane].copy_from_slice(&a.data[i * ac * plane..(i + 1) * ac * plane]);
            dst[ac * plane..].copy_from_slice(&b.data[i * bc * plane..(i + 1) * bc * plane]);
        }
        Ok(out)
    }

    fn softmax_pair(input: &ShadowValue) -> Result<ShadowValue> {
        let [n, c, h, w] = input.shape;
        if c != 2 || h != 1 || w != 1 {
            return Err(Error::ShapeMismatch("shadow softmax expects (n, 2, 1, 1)".to_string()));
        }
        let mut out = ShadowValue::zeros(input.shape);
        for i in 0..n {
            let s0 = input.data[2 * i];
            let s1 = input.data[2 * i + 1];
            let m = s0.max(s1);
            let e0 = libm::exp(s0 - m);
            let e1 = libm::exp(s1 - m);
            out.data[2 * i] = e0 / (e0 + e1);
            out.data[2 * i + 1] = e1 / (e0 + e1);
        }
        Ok(out)
    }

    /// Evaluates every node of `graph` in float64.
    pub fn forward_f64(
        graph: &Graph,
        params: &ParamStore,
        inputs: &[(&str, &Tensor)],
    ) -> Result<Vec<ShadowValue>> {
        let mut bound: Vec<Option<ShadowValue>> = vec![None; graph.input_names.len()];
        for (name, tensor) in inputs {
            let slot = graph
                .input_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::UnboundInput(format!("{name} is not a declared input")))?;
            bound[slot] = Some(ShadowValue::from_tensor(tensor));
        }
        let mut values: Vec<ShadowValue> = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let value = {
                let arg = |w: Wire| -> Result<&ShadowValue> {
                    match w {
                        Wire::Input(j) => bound[j]
                            .as_ref()
                            .ok_or_else(|| Error::UnboundInput(graph.input_names[j].clone())),
                        Wire::Node(j) => Ok(&values[j]),
                    }
                };
                match &node.kind {
                    LayerKind::Conv { spec, weights, bias } => conv(
                        arg(node.inputs[0])?,
                        &params.get(weights)?.value,
                        &params.get(bias)?.value,
                        spec,
                    )?,
                    LayerKind::Relu => {
                        let mut v = arg(node.inputs[0])?.clone();
                        v.data.iter_mut().for_each(|x| *x = x.max(0.0));
                        v
                    }
                    LayerKind::MaxPool { window, stride } => {
                        maxpool(arg(node.inputs[0])?, *window, *stride)?
                    }
                    LayerKind::Fc { weights, bias } => fc(
                        arg(node.inputs[0])?,
                        &params.get(weights)?.value,
                        &params.get(bias)?.value,
                    )?,
                    LayerKind::ConcatChannels => {
                        concat(arg(node.inputs[0])?, arg(node.inputs[1])?)?
                    }
                    LayerKind::SoftmaxPair => softmax_pair(arg(node.inputs[0])?)?,
                }
            };
            values.push(value);
        }
        Ok(values)
    }
}

/// One parameter's gradient-check outcome.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords_checked: usize,
    /// Coordinates skipped because the two one-sided slopes disagreed,
    /// i.e. the step straddled a relu kink where central differences are
    /// meaningless.
    pub coords_excluded: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .fold(0.0f64, |m, e| m.max(e.max_rel_err))
    }
}

/// Central-difference check of the analytic gradients already stored in
/// `params` against a scalar function of the parameter values.
///
/// At most `max_coords` coordinates per tensor are probed (seeded sampling;
/// a full sweep is infeasible for the larger tensors). The numerical slope
/// divides by the actually realized f32 step, and the relative error
/// denominator is floored by `denom_floor` so near-zero gradient pairs
/// compare absolutely.
///
/// Coordinates whose two one-sided slopes disagree by more than 0.2% are
/// excluded: there the step straddles a relu kink (some pre-activation
/// within the step of zero) and the central difference estimates nothing.
/// Any kink too small to trip the gate distorts the central estimate by at
/// most half the gate, which keeps undetected distortion below the 1e-3
/// tolerance. The detection uses only numeric quantities, so a wrong
/// analytic gradient at a smooth coordinate is still caught.
pub fn grad_check_fn<F>(
    params: &mut ParamStore,
    names: &[String],
    eps: f64,
    max_coords: usize,
    seed: u64,
    denom_floor: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    let f_base = f(params)?;
    for (pi, name) in names.iter().enumerate() {
        let len = params.get(name)?.value.len();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC0DE + pi as u64));
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, max_coords).into_vec()
        };
        let mut worst = 0.0f64;
        let mut excluded = 0usize;
        for &i in &coords {
            let v0 = params.get(name)?.value.data()[i];
            let plus = (v0 as f64 + eps) as f32;
            let minus = (v0 as f64 - eps) as f32;

            params.get_mut(name)?.value.data_mut()[i] = plus;
            let f_plus = f(params)?;
            params.get_mut(name)?.value.data_mut()[i] = minus;
            let f_minus = f(params)?;
            params.get_mut(name)?.value.data_mut()[i] = v0;

            let step_up = plus as f64 - v0 as f64;
            let step_down = v0 as f64 - minus as f64;
            if step_up == 0.0 || step_down == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "finite-difference step underflowed for {name}[{i}]"
                )));
            }
            let slope_up = (f_plus - f_base) / step_up;
            let slope_down = (f_base - f_minus) / step_down;
            let slope_scale = slope_up.abs().max(slope_down.abs()).max(denom_floor);
            if (slope_up - slope_down).abs() > 0.002 * slope_scale {
                excluded += 1;
                continue;
            }

            let numeric = (f_plus - f_minus) / (step_up + step_down);
            let analytic = params.get(name)?.grad.data()[i] as f64;
            let denom = numeric.abs().max(analytic.abs()).max(denom_floor);
            worst = worst.max((numeric - analytic).abs() / denom);
        }
        report.entries.push(GradCheckEntry {
            name: name.clone(),
            coords_checked: coords.len() - excluded,
            coords_excluded: excluded,
            max_rel_err: worst,
        });
    }
    Ok(report)
}

/// Graph-level convenience: runs forward/backward on a graph whose `output`
/// is a single scalar, then finite-difference checks `names` against the
/// float64 shadow evaluation.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_graph(
    graph: &Graph,
    params: &mut ParamStore,
    inputs: &[(&str, &Tensor)],
    output: Wire,
    names: &[String],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let out_node = match output {
        Wire::Node(i) => i,
        Wire::Input(_) => return Err(Error::NonScalarOutput),
    };
    let cache = graph.forward(params, inputs)?;
    let out_value = cache
        .value(output)
        .ok_or(Error::NonScalarOutput)?;
    if out_value.len() != 1 {
        return Err(Error::NonScalarOutput);
    }
    params.zero_grads();
    let seed_grad = Tensor::full(out_value.shape(), 1.0);
    graph.backward(params, &cache, &[(output, seed_grad)])?;
    grad_check_fn(params, names, eps, max_coords, seed, 1e-4, |p| {
        let values = shadow::forward_f64(graph, p, inputs)?;
        Ok(values[out_node].data[0])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fc_scalar_graph() -> (Graph, ParamStore, Wire) {
        let mut graph = Graph::new();
        let x = graph.add_input("x");
        let out = graph
            .add(
                "fc",
                LayerKind::Fc {
                    weights: "w".to_string(),
                    bias: "b".to_string(),
                },
                &[x],
            )
            .unwrap();
        let mut params = ParamStore::new();
        params
            .insert("w", Tensor::new([1, 3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        params.insert("b", Tensor::new([1, 1, 1, 1], vec![0.25]).unwrap()).unwrap();
        (graph, params, out)
    }

    #[test]
    fn single_relu_node_behaves_as_relu_forward() {
        let mut graph = Graph::new();
        let x = graph.add_input("x");
        let out = graph.add("relu", LayerKind::Relu, &[x]).unwrap();
        let params = ParamStore::new();
        let input = Tensor::new([1, 3, 1, 1], vec![-1.0, 0.0, 2.0]).unwrap();
        let cache = graph.forward(&params, &[("x", &input)]).unwrap();
        assert_eq!(cache.value(out).unwrap(), &relu_forward(&input));
    }

    #[test]
    fn unbound_input_is_rejected() {
        let mut graph = Graph::new();
        let x = graph.add_input("x");
        graph.add("relu", LayerKind::Relu, &[x]).unwrap();
        let params = ParamStore::new();
        assert!(matches!(
            graph.forward(&params, &[]),
            Err(Error::UnboundInput(_))
        ));
    }

    #[test]
    fn forward_wire_to_future_node_is_rejected() {
        let mut graph = Graph::new();
        let _ = graph.add_input("x");
        let err = graph.add("relu", LayerKind::Relu, &[Wire::Node(5)]).unwrap_err();
        assert!(matches!(err, Error::InvalidWire(_)));
    }

    #[test]
    fn shared_parameters_make_towers_identical() {
        let mut graph = Graph::new();
        let a = graph.add_input("a");
        let b = graph.add_input("b");
        let kind = |(): ()| LayerKind::Conv {
            spec: ConvSpec::basic(2, (3, 3)).with_padding((1, 1)),
            weights: "w".to_string(),
            bias: "bias".to_string(),
        };
        let ta = graph.add("tower_a", kind(()), &[a]).unwrap();
        let tb = graph.add("tower_b", kind(()), &[b]).unwrap();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        params.insert("w", Tensor::uniform([2, 1, 3, 3], -1.0, 1.0, &mut rng)).unwrap();
        params.insert("bias", Tensor::zeros([1, 2, 1, 1])).unwrap();
        let image = Tensor::uniform([1, 1, 6, 6], 0.0, 1.0, &mut rng);
        let cache = graph
            .forward(&params, &[("a", &image), ("b", &image)])
            .unwrap();
        assert_eq!(cache.value(ta).unwrap(), cache.value(tb).unwrap());
    }

    #[test]
    fn shared_gradient_is_sum_of_tower_gradients() {
        // Shared graph: one weight used by both towers, outputs summed via
        // concat + fc with fixed unit weights.
        let spec = ConvSpec::basic(1, (3, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w0 = Tensor::uniform([1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let img_a = Tensor::uniform([1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let img_b = Tensor::uniform([1, 1, 3, 3], -1.0, 1.0, &mut rng);

        let mut shared = Graph::new();
        let a = shared.add_input("a");
        let b = shared.add_input("b");
        let ta = shared
            .add(
                "ta",
                LayerKind::Conv { spec: spec.clone(), weights: "w".into(), bias: "vb".into() },
                &[a],
            )
            .unwrap();
        let tb = shared
            .add(
                "tb",
                LayerKind::Conv { spec: spec.clone(), weights: "w".into(), bias: "vb".into() },
                &[b],
            )
            .unwrap();
        let mut params = ParamStore::new();
        params.insert("w", w0.clone()).unwrap();
        params.insert("vb", Tensor::zeros([1, 1, 1, 1])).unwrap();
        let cache = shared.forward(&params, &[("a", &img_a), ("b", &img_b)]).unwrap();
        let one = Tensor::full([1, 1, 1, 1], 1.0);
        shared
            .backward(&mut params, &cache, &[(ta, one.clone()), (tb, one.clone())])
            .unwrap();
        let shared_grad = params.get("w").unwrap().grad.clone();

        // Unshared copies, one tower each.
        let mut total = Tensor::zeros([1, 1, 3, 3]);
        for img in [&img_a, &img_b] {
            let mut g = Graph::new();
            let x = g.add_input("x");
            let t = g
                .add(
                    "t",
                    LayerKind::Conv { spec: spec.clone(), weights: "w".into(), bias: "vb".into() },
                    &[x],
                )
                .unwrap();
            let mut p = ParamStore::new();
            p.insert("w", w0.clone()).unwrap();
            p.insert("vb", Tensor::zeros([1, 1, 1, 1])).unwrap();
            let c = g.forward(&p, &[("x", img)]).unwrap();
            g.backward(&mut p, &c, &[(t, one.clone())]).unwrap();
            for (acc, v) in total.data_mut().iter_mut().zip(p.get("w").unwrap().grad.data()) {
                *acc += v;
            }
        }
        assert!(shared_grad.max_abs_diff(&total).unwrap() <= 1e-6);
    }

    #[test]
    fn zero_seed_gives_zero_param_grads() {
        let (graph, mut params, out) = fc_scalar_graph();
        let input = Tensor::new([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let cache = graph.forward(&params, &[("x", &input)]).unwrap();
        graph
            .backward(&mut params, &cache, &[(out, Tensor::zeros([1, 1, 1, 1]))])
            .unwrap();
        assert!(params.get("w").unwrap().grad.data().iter().all(|&v| v == 0.0));
        assert!(params.get("b").unwrap().grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_graph_grad_check_is_tight() {
        let (graph, mut params, out) = fc_scalar_graph();
        let input = Tensor::new([1, 3, 1, 1], vec![0.4, -0.3, 0.9]).unwrap();
        let report = grad_check_graph(
            &graph,
            &mut params,
            &[("x", &input)],
            out,
            &["w".to_string(), "b".to_string()],
            1e-3,
            64,
            7,
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-4, "rel err {}", report.max_rel_err());
    }

    #[test]
    fn relu_graph_grad_check_away_from_kinks() {
        // fc -> relu -> fc to a scalar, pre-activations bounded away from
        // zero so no finite-difference step straddles the kink.
        let mut graph = Graph::new();
        let x = graph.add_input("x");
        let h = graph
            .add("fc1", LayerKind::Fc { weights: "w1".into(), bias: "b1".into() }, &[x])
            .unwrap();
        let r = graph.add("relu", LayerKind::Relu, &[h]).unwrap();
        let out = graph
            .add("fc2", LayerKind::Fc { weights: "w2".into(), bias: "b2".into() }, &[r])
            .unwrap();
        let mut params = ParamStore::new();
        params
            .insert("w1", Tensor::new([2, 3, 1, 1], vec![0.6, -0.4, 0.8, -0.7, 0.5, 0.3]).unwrap())
            .unwrap();
        params.insert("b1", Tensor::new([1, 2, 1, 1], vec![0.9, -0.8]).unwrap()).unwrap();
        params.insert("w2", Tensor::new([1, 2, 1, 1], vec![1.2, -0.9]).unwrap()).unwrap();
        params.insert("b2", Tensor::new([1, 1, 1, 1], vec![0.1]).unwrap()).unwrap();
        let input = Tensor::new([1, 3, 1, 1], vec![0.5, 0.25, -0.75]).unwrap();
        let names: Vec<String> = ["w1", "b1", "w2", "b2"].map(String::from).into();
        let report =
            grad_check_graph(&graph, &mut params, &[("x", &input)], out, &names, 1e-3, 64, 11)
                .unwrap();
        assert!(report.max_rel_err() <= 1e-3, "rel err {}", report.max_rel_err());
    }

    #[test]
    fn atrous_conv_graph_grad_check() {
        // conv at rate 3 reduced to a scalar by a fixed fc.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut graph = Graph::new();
        let x = graph.add_input("x");
        let spec = ConvSpec::basic(1, (3, 3)).with_rate(3);
        let c = graph
            .add("conv", LayerKind::Conv { spec, weights: "w".into(), bias: "cb".into() }, &[x])
            .unwrap();
        let out = graph
            .add("sum", LayerKind::Fc { weights: "ones".into(), bias: "fb".into() }, &[c])
            .unwrap();
        let mut params = ParamStore::new();
        params.insert("w", Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng)).unwrap();
        params.insert("cb", Tensor::new([1, 1, 1, 1], vec![0.2]).unwrap()).unwrap();
        params.insert("ones", Tensor::uniform([1, 9, 1, 1], -1.0, 1.0, &mut rng)).unwrap();
        params.insert("fb", Tensor::zeros([1, 1, 1, 1])).unwrap();
        let input = Tensor::uniform([1, 2, 9, 9], -1.0, 1.0, &mut rng);
        let names = vec!["w".to_string(), "cb".to_string()];
        let report =
            grad_check_graph(&graph, &mut params, &[("x", &input)], out, &names, 1e-3, 64, 29)
                .unwrap();
        assert!(report.max_rel_err() <= 1e-3, "rel err {}", report.max_rel_err());
    }

    #[test]
    fn grad_check_rejects_non_scalar_graphs() {
        let mut graph = Graph::new();
        let x = graph.add_input("x");
        let out = graph.add("relu", LayerKind::Relu, &[x]).unwrap();
        let mut params = ParamStore::new();
        params.insert("unused", Tensor::zeros([1, 1, 1, 1])).unwrap();
        let input = Tensor::zeros([1, 3, 1, 1]);
        let err = grad_check_graph(
            &graph,
            &mut params,
            &[("x", &input)],
            out,
            &["unused".to_string()],
            1e-3,
            8,
            0,
        )
        .unwrap_err();
        assert_eq!(err, Error::NonScalarOutput);
    }

    #[test]
    fn grad_check_catches_corrupted_gradients() {
        let (graph, mut params, out) = fc_scalar_graph();
        let input = Tensor::new([1, 3, 1, 1], vec![0.4, -0.3, 0.9]).unwrap();
        let cache = graph.forward(&params, &[("x", &input)]).unwrap();
        params.zero_grads();
        graph
            .backward(&mut params, &cache, &[(out, Tensor::full([1, 1, 1, 1], 1.0))])
            .unwrap();
        // Sabotage one analytic gradient; the checker must flag it.
        params.get_mut("w").unwrap().grad.data_mut()[1] += 0.5;
        let report = grad_check_fn(
            &mut params,
            &["w".to_string()],
            1e-3,
            64,
            3,
            1e-4,
            |p| {
                let values = shadow::forward_f64(&graph, p, &[("x", &input)]).unwrap();
                Ok(values[0].data[0])
            },
        )
        .unwrap();
        assert!(report.max_rel_err() > 1e-2);
    }

    #[test]
    fn param_store_rejects_duplicates_and_unknowns() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(matches!(
            store.insert("w", Tensor::zeros([1, 1, 1, 1])),
            Err(Error::DuplicateParam(_))
        ));
        assert!(matches!(store.get("nope"), Err(Error::UnknownParam(_))));
        assert!(matches!(
            store.set_value("w", Tensor::zeros([2, 1, 1, 1])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn partial_forward_stops_at_overrides() {
        let mut graph = Graph::new();
        let x = graph.add_input("x");
        let r1 = graph.add("r1", LayerKind::Relu, &[x]).unwrap();
        let r2 = graph.add("r2", LayerKind::Relu, &[r1]).unwrap();
        let params = ParamStore::new();
        let injected = Tensor::new([1, 1, 1, 2], vec![-3.0, 4.0]).unwrap();
        // No "x" binding needed: the override cuts the graph above r1.
        let cache = graph
            .forward_to(&params, &[], &[(r1, injected)], &[r2])
            .unwrap();
        assert_eq!(cache.value(r2).unwrap().data(), &[0.0, 4.0]);
        assert!(cache.value(Wire::Node(0)).is_some()); // the override itself
    }

    #[test]
    fn seeding_an_unevaluated_node_is_rejected() {
        let mut graph = Graph::new();
        let x = graph.add_input("x");
        let r1 = graph.add("r1", LayerKind::Relu, &[x]).unwrap();
        let r2 = graph.add("r2", LayerKind::Relu, &[r1]).unwrap();
        let mut params = ParamStore::new();
        let input = Tensor::new([1, 1, 1, 2], vec![1.0, -1.0]).unwrap();
        // Partial forward stops at r1; r2 never gets a cached value.
        let cache = graph
            .forward_to(&params, &[("x", &input)], &[], &[r1])
            .unwrap();
        let err = graph
            .backward(&mut params, &cache, &[(r2, Tensor::zeros([1, 1, 1, 2]))])
            .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn repeated_backward_runs_are_bitwise_identical() {
        let (graph, mut params, out) = fc_scalar_graph();
        let input = Tensor::new([1, 3, 1, 1], vec![0.7, 0.1, -0.2]).unwrap();
        let mut grabbed = Vec::new();
        for _ in 0..2 {
            params.zero_grads();
            let cache = graph.forward(&params, &[("x", &input)]).unwrap();
            graph
                .backward(&mut params, &cache, &[(out, Tensor::full([1, 1, 1, 1], 1.0))])
                .unwrap();
            grabbed.push(params.get("w").unwrap().grad.clone());
        }
        assert_eq!(grabbed[0], grabbed[1]);
    }

    #[test]
    fn uniform_tensor_draws_are_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let a = Tensor::uniform([2, 2, 2, 2], -1.0, 1.0, &mut r1);
        let b = Tensor::uniform([2, 2, 2, 2], -1.0, 1.0, &mut r2);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
        let _ = r1.gen_range(0..10usize);
    }
}
