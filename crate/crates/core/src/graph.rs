//! Declarative network description.
//!
//! A network is a list of named nodes in topological order. The implicit
//! first node is `input`. Conv/FC layers are the mappable layers; everything
//! else (pooling, flatten, residual add) is glue.
//!
//! Activations that feed a Conv/FC layer must be quantized. A tensor is
//! quantized when it is the network input, the output of a ReLU'd layer or
//! add, a global average pool, or a max-pool/flatten of a quantized tensor.
//! Unquantized tensors (layers without ReLU) may only feed an add or be the
//! network output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{LayerKind, LayerSpec};
use crate::error::{Error, Result};

/// One entry of the `[[layer]]` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub op: OpKind,
    /// Defaults to the previous entry (or `input` for the first).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    /// Output channels (conv) or features (fc).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub bn: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub relu: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv,
    Depthwise,
    Fc,
    Maxpool,
    Gap,
    Flatten,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    /// `[C, H, W]`
    pub input: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(rename = "layer")]
    pub layers: Vec<NodeSpec>,
}

impl NetworkSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("network: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Input,
    Conv { kernel: usize, stride: usize, padding: usize, depthwise: bool },
    Linear,
    MaxPool { kernel: usize },
    Gap,
    Flatten,
    Add,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
    /// Per-sample output shape: `[C, H, W]` or `[F]`.
    pub shape: Vec<usize>,
    pub bn: bool,
    pub relu: bool,
}

impl Node {
    pub fn is_layer(&self) -> bool {
        matches!(self.op, Op::Conv { .. } | Op::Linear)
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub name: String,
    pub nodes: Vec<Node>,
    pub spec: NetworkSpec,
}

fn cfg(node: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("layer `{node}`: {msg}"))
}

impl Graph {
    pub fn from_toml(text: &str) -> Result<Graph> {
        Graph::from_spec(&NetworkSpec::from_toml(text)?)
    }

    pub fn load(path: &Path) -> Result<Graph> {
        Graph::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Built-in architectures by name.
    pub fn named(name: &str) -> Result<Graph> {
        let text = match name {
            "toy_resnet" => TOY_RESNET,
            "toy_plain" => TOY_PLAIN,
            "toy_mobile" => TOY_MOBILE,
            other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
        };
        Graph::from_toml(text)
    }

    pub fn from_spec(spec: &NetworkSpec) -> Result<Graph> {
        if spec.input.contains(&0) {
            return Err(Error::Config("input shape must be positive".into()));
        }
        if spec.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        let mut nodes = vec![Node {
            name: "input".into(),
            op: Op::Input,
            inputs: vec![],
            shape: spec.input.to_vec(),
            bn: false,
            relu: false,
        }];
        let mut index: BTreeMap<String, usize> = BTreeMap::from([("input".to_string(), 0)]);
        for ns in &spec.layers {
            let name = ns.name.as_str();
            if name.is_empty() || index.contains_key(name) {
                return Err(cfg(name, "duplicate or empty name"));
            }
            let inputs: Vec<usize> = if ns.inputs.is_empty() {
                vec![nodes.len() - 1]
            } else {
                ns.inputs
                    .iter()
                    .map(|i| index.get(i).copied().ok_or_else(|| cfg(name, format!("unknown input `{i}`"))))
                    .collect::<Result<_>>()?
            };
            let node = build_node(ns, inputs, &nodes)?;
            index.insert(node.name.clone(), nodes.len());
            nodes.push(node);
        }
        let g = Graph { name: spec.name.clone(), nodes, spec: spec.clone() };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let out = self.output();
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            let quantized_in = n.inputs.iter().all(|&j| self.is_quantized(j));
            match n.op {
                Op::Conv { .. } | Op::Linear | Op::MaxPool { .. } | Op::Gap | Op::Flatten if !quantized_in => {
                    let src = &self.nodes[n.inputs[0]].name;
                    return Err(cfg(&n.name, format!("consumes unquantized tensor `{src}` (add relu there)")));
                }
                _ => {}
            }
            let consumers = self.consumers(i);
            if consumers.is_empty() && i != out {
                return Err(cfg(&n.name, "output is never used"));
            }
            if !self.is_quantized(i) && i != out && consumers.iter().any(|&c| self.nodes[c].op != Op::Add) {
                return Err(cfg(&n.name, "unquantized output may only feed an add or be the network output"));
            }
        }
        let o = &self.nodes[out];
        if o.shape.len() != 1 {
            return Err(cfg(&o.name, "network output must be a feature vector"));
        }
        if let Some(k) = self.spec.classes {
            if o.shape[0] != k {
                return Err(cfg(&o.name, format!("produces {} outputs, config says {k} classes", o.shape[0])));
            }
        }
        if self.layers().is_empty() {
            return Err(Error::Config("network has no conv/fc layers".into()));
        }
        Ok(())
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn classes(&self) -> usize {
        self.nodes[self.output()].shape[0]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Conv/FC node indices in topological order.
    pub fn layers(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_layer()).collect()
    }

    pub fn consumers(&self, i: usize) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&j| self.nodes[j].inputs.contains(&i)).collect()
    }

    /// Whether a node's output lies on an activation grid.
    pub fn is_quantized(&self, i: usize) -> bool {
        let n = &self.nodes[i];
        match n.op {
            Op::Input | Op::Gap => true,
            Op::Conv { .. } | Op::Linear | Op::Add => n.relu,
            Op::MaxPool { .. } | Op::Flatten => self.is_quantized(n.inputs[0]),
        }
    }

    /// Nodes that own an activation quantizer (range parameter).
    pub fn owns_quantizer(&self, i: usize) -> bool {
        let n = &self.nodes[i];
        match n.op {
            Op::Input | Op::Gap => true,
            Op::Conv { .. } | Op::Linear | Op::Add => n.relu,
            Op::MaxPool { .. } | Op::Flatten => false,
        }
    }

    pub fn quantizer_owners(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.owns_quantizer(i)).collect()
    }

    /// The quantizer whose grid a quantized tensor lies on.
    pub fn quant_owner(&self, i: usize) -> Option<usize> {
        if self.owns_quantizer(i) {
            return Some(i);
        }
        match self.nodes[i].op {
            Op::MaxPool { .. } | Op::Flatten => self.quant_owner(self.nodes[i].inputs[0]),
            _ => None,
        }
    }

    pub fn layer_spec(&self, i: usize) -> LayerSpec {
        let n = &self.nodes[i];
        let input = &self.nodes[n.inputs[0]].shape;
        match n.op {
            Op::Conv { kernel, depthwise, .. } => LayerSpec {
                c_in: input[0],
                c_out: n.shape[0],
                fx: kernel,
                fy: kernel,
                ox: n.shape[2],
                oy: n.shape[1],
                kind: if depthwise { LayerKind::Depthwise } else { LayerKind::Conv },
            },
            Op::Linear => LayerSpec::fc(input[0], n.shape[0]),
            _ => panic!("node `{}` is not a conv/fc layer", n.name),
        }
    }

    /// Weight tensor shape of a layer node.
    pub fn weight_shape(&self, i: usize) -> Vec<usize> {
        let n = &self.nodes[i];
        let input = &self.nodes[n.inputs[0]].shape;
        match n.op {
            Op::Conv { kernel, depthwise: false, .. } => vec![n.shape[0], input[0], kernel, kernel],
            Op::Conv { kernel, depthwise: true, .. } => vec![n.shape[0], 1, kernel, kernel],
            Op::Linear => vec![n.shape[0], input[0]],
            _ => panic!("node `{}` is not a conv/fc layer", n.name),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|&i| self.weight_shape(i).iter().product::<usize>() + self.nodes[i].shape[0])
            .sum()
    }

    pub fn has_kind(&self, kind: LayerKind) -> bool {
        self.layers().iter().any(|&i| self.layer_spec(i).kind == kind)
    }

    /// Names of the conv/fc layers.
    pub fn layer_names(&self) -> Vec<String> {
        self.layers().iter().map(|&i| self.nodes[i].name.clone()).collect()
    }

    /// Set of node names, used to check decisions and checkpoints against.
    pub fn names(&self) -> BTreeSet<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }
}

fn build_node(ns: &NodeSpec, inputs: Vec<usize>, nodes: &[Node]) -> Result<Node> {
    let name = ns.name.as_str();
    let single = |what: &str| -> Result<&Vec<usize>> {
        if inputs.len() != 1 {
            return Err(cfg(name, format!("{what} takes exactly one input")));
        }
        Ok(&nodes[inputs[0]].shape)
    };
    let spatial = |s: &Vec<usize>| -> Result<()> {
        if s.len() != 3 {
            return Err(cfg(name, format!("expects a [C,H,W] input, got {s:?}")));
        }
        Ok(())
    };
    let allowed_bn = matches!(ns.op, OpKind::Conv | OpKind::Depthwise | OpKind::Fc);
    if ns.bn && !allowed_bn {
        return Err(cfg(name, "bn is only valid on conv/depthwise/fc"));
    }
    if ns.relu && !(allowed_bn || ns.op == OpKind::Add) {
        return Err(cfg(name, "relu is only valid on conv/depthwise/fc/add"));
    }
    let geometric = matches!(ns.op, OpKind::Conv | OpKind::Depthwise | OpKind::Maxpool);
    if !geometric && (ns.kernel.is_some() || ns.stride.is_some() || ns.padding.is_some()) {
        return Err(cfg(name, "kernel/stride/padding only apply to conv, depthwise and maxpool"));
    }
    if ns.out.is_some() && !matches!(ns.op, OpKind::Conv | OpKind::Fc) {
        return Err(cfg(name, "`out` only applies to conv and fc"));
    }
    let (op, shape) = match ns.op {
        OpKind::Conv | OpKind::Depthwise => {
            let s = single("conv")?;
            spatial(s)?;
            let depthwise = ns.op == OpKind::Depthwise;
            let c_out = if depthwise { s[0] } else { ns.out.ok_or_else(|| cfg(name, "conv needs `out`"))? };
            let kernel = ns.kernel.unwrap_or(1);
            let stride = ns.stride.unwrap_or(1);
            let padding = ns.padding.unwrap_or(0);
            if c_out == 0 || kernel == 0 || stride == 0 {
                return Err(cfg(name, "out, kernel and stride must be positive"));
            }
            let (h, w) = (s[1] + 2 * padding, s[2] + 2 * padding);
            if kernel > h || kernel > w {
                return Err(cfg(name, format!("kernel {kernel} larger than padded input {h}x{w}")));
            }
            let shape = vec![c_out, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
            (Op::Conv { kernel, stride, padding, depthwise }, shape)
        }
        OpKind::Fc => {
            let s = single("fc")?;
            if s.len() != 1 {
                return Err(cfg(name, format!("fc expects a feature vector, got {s:?} (insert gap or flatten)")));
            }
            let out = ns.out.ok_or_else(|| cfg(name, "fc needs `out`"))?;
            if out == 0 {
                return Err(cfg(name, "out must be positive"));
            }
            (Op::Linear, vec![out])
        }
        OpKind::Maxpool => {
            let s = single("maxpool")?;
            spatial(s)?;
            if ns.stride.is_some() || ns.padding.is_some() {
                return Err(cfg(name, "maxpool uses stride = kernel and no padding"));
            }
            let k = ns.kernel.unwrap_or(2);
            if k == 0 || k > s[1] || k > s[2] {
                return Err(cfg(name, format!("pool kernel {k} does not fit {s:?}")));
            }
            (Op::MaxPool { kernel: k }, vec![s[0], s[1] / k, s[2] / k])
        }
        OpKind::Gap => {
            let s = single("gap")?;
            spatial(s)?;
            (Op::Gap, vec![s[0]])
        }
        OpKind::Flatten => {
            let s = single("flatten")?;
            spatial(s)?;
            (Op::Flatten, vec![s.iter().product()])
        }
        OpKind::Add => {
            if inputs.len() < 2 {
                return Err(cfg(name, "add needs at least two inputs"));
            }
            let s = &nodes[inputs[0]].shape;
            if let Some(&j) = inputs.iter().find(|&&j| &nodes[j].shape != s) {
                return Err(cfg(name, format!("input `{}` has shape {:?}, expected {s:?}", nodes[j].name, nodes[j].shape)));
            }
            (Op::Add, s.clone())
        }
    };
    Ok(Node { name: ns.name.clone(), op, inputs, shape, bn: ns.bn, relu: ns.relu })
}

/// Residual toy CNN for 8x8 single-channel inputs, 10 classes.
pub const TOY_RESNET: &str = include_str!("../configs/toy_resnet.toml");
/// Sequential toy CNN with a flatten into the classifier.
pub const TOY_PLAIN: &str = include_str!("../configs/toy_plain.toml");
/// Toy CNN with a depthwise-separable block.
pub const TOY_MOBILE: &str = include_str!("../configs/toy_mobile.toml");
