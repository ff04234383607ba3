//! Frozen networks and their execution.
//!
//! A [`Deployment`] holds plain weights, per-accelerator weight scales,
//! activation ranges and the channel assignment of every layer. It runs in two
//! modes:
//!
//! * `Float`: unquantized f64 arithmetic, used to check that graph rewrites
//!   preserve the network function.
//! * `Quantized`: activations as integer codes on the storage grid, weights as
//!   integer codes of their accelerator's grid, products accumulated exactly.
//!   Per-channel epilogues (rescale, bias, ReLU, requantize) depend only on the
//!   channel's own values, so channel order cannot change any result.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::AcceleratorSet;
use crate::error::{Error, Result};
use crate::finetune::storage_bits;
use crate::graph::{Graph, Op};
use crate::mapping::{LayerAssignment, MappingDecision};
use crate::model::Model;
use crate::qparams::QuantParams;
use crate::quant::{activation_levels, weight_code, weight_levels};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Float,
    Quantized,
}

/// Contiguous output-channel slice executed by one accelerator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubLayer {
    pub accelerator: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployedLayer {
    pub node: usize,
    pub weight: Vec<Float>,
    pub bias: Vec<Float>,
    pub assignment: Vec<usize>,
    /// `e^s` of each accelerator's weight quantizer.
    pub weight_scales: Vec<Float>,
    /// Set by the split pass; `None` runs the layer monolithically.
    pub sublayers: Option<Vec<SubLayer>>,
    /// Fallback input reindexing (`x'[i] = x[g[i]]`) for consumers that could
    /// not absorb a permutation.
    pub input_gather: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub graph: Graph,
    pub accelerators: AcceleratorSet,
    pub storage_bits: u32,
    /// Activation range per quantizer owner.
    pub ranges: BTreeMap<usize, Float>,
    pub layers: BTreeMap<usize, DeployedLayer>,
}

impl Deployment {
    pub fn freeze(model: &Model, quant: &QuantParams, accs: &AcceleratorSet, decision: &MappingDecision) -> Result<Deployment> {
        decision.validate(&model.graph, accs)?;
        let mut layers = BTreeMap::new();
        for (i, la) in model.graph.layers().into_iter().zip(&decision.layers) {
            let p = model.layer(i);
            layers.insert(
                i,
                DeployedLayer {
                    node: i,
                    weight: p.weight.to_vec(),
                    bias: p.bias.to_vec(),
                    assignment: la.assignments.clone(),
                    weight_scales: (0..accs.len()).map(|a| quant.weight(i, a).scale()).collect(),
                    sublayers: None,
                    input_gather: None,
                },
            );
        }
        let ranges = quant.ranges.keys().map(|&i| (i, quant.range(i))).collect();
        Ok(Deployment {
            graph: model.graph.clone(),
            accelerators: accs.clone(),
            storage_bits: storage_bits(accs)?,
            ranges,
            layers,
        })
    }

    pub fn decision(&self) -> MappingDecision {
        MappingDecision {
            layers: self
                .layers
                .values()
                .map(|l| LayerAssignment { name: self.graph.nodes[l.node].name.clone(), assignments: l.assignment.clone() })
                .collect(),
        }
    }

    pub fn uses_gather(&self) -> bool {
        self.layers.values().any(|l| l.input_gather.is_some())
    }

    fn check(&self) -> Result<()> {
        for l in self.layers.values() {
            let name = &self.graph.nodes[l.node].name;
            let c = self.graph.nodes[l.node].channels();
            if l.assignment.len() != c || l.bias.len() != c || l.weight_scales.len() != self.accelerators.len() {
                return Err(Error::Mismatch(format!("layer `{name}` does not match the network")));
            }
            if let Some(subs) = &l.sublayers {
                let mut next = 0;
                for s in subs {
                    if s.start != next || s.end <= s.start || s.end > c {
                        return Err(Error::Mismatch(format!("layer `{name}`: sub-layers do not tile the channels")));
                    }
                    if l.assignment[s.start..s.end].iter().any(|&a| a != s.accelerator) {
                        return Err(Error::Mismatch(format!("layer `{name}`: sub-layer {s:?} mixes accelerators")));
                    }
                    next = s.end;
                }
                if next != c {
                    return Err(Error::Mismatch(format!("layer `{name}`: sub-layers cover {next} of {c} channels")));
                }
            }
        }
        Ok(())
    }

    /// Runs a batch `[N, C, H, W]` (flattened) and returns logits `[N, K]`.
    pub fn run(&self, x: &[Float], n: usize, precision: Precision) -> Result<Vec<f64>> {
        self.check()?;
        let per: usize = self.graph.input_shape().iter().product();
        if x.len() != n * per {
            return Err(Error::Shape { op: "Deployment::run", dim: "input", expected: n * per, got: x.len() });
        }
        let prepared = self.prepare(precision);
        let k = self.graph.classes();
        let mut out = Vec::with_capacity(n * k);
        for s in 0..n {
            out.extend(self.run_one(&x[s * per..(s + 1) * per], precision, &prepared)?);
        }
        Ok(out)
    }

    /// Per layer, the weight values used by the MAC loop: raw in float mode,
    /// integer codes of the channel's accelerator grid otherwise.
    fn prepare(&self, precision: Precision) -> BTreeMap<usize, Vec<f64>> {
        self.layers
            .iter()
            .map(|(&i, l)| {
                let c = l.assignment.len();
                let per = l.weight.len() / c;
                let w = (0..c)
                    .flat_map(|ch| {
                        let a = l.assignment[ch];
                        let bits = self.accelerators.get(a).weight_bits;
                        let scale = l.weight_scales[a];
                        l.weight[ch * per..(ch + 1) * per].iter().map(move |&v| match precision {
                            Precision::Float => v as f64,
                            Precision::Quantized => weight_code(v, scale, bits) as f64,
                        })
                    })
                    .collect();
                (i, w)
            })
            .collect()
    }

    fn quantize(&self, owner: usize, v: f64) -> f64 {
        let r = self.ranges[&owner] as f64;
        let l = activation_levels(self.storage_bits) as f64;
        (l * (v / r).clamp(0.0, 1.0)).round()
    }

    fn step(&self, owner: usize) -> f64 {
        self.ranges[&owner] as f64 / activation_levels(self.storage_bits) as f64
    }

    fn narrow(&self, acc: usize) -> bool {
        self.accelerators.get(acc).activation_bits < self.storage_bits
    }

    fn run_one(&self, x: &[Float], precision: Precision, weights: &BTreeMap<usize, Vec<f64>>) -> Result<Vec<f64>> {
        let g = &self.graph;
        let q = precision == Precision::Quantized;
        let mut vals: Vec<Val> = Vec::with_capacity(g.nodes.len());
        for (i, node) in g.nodes.iter().enumerate() {
            let mut v = match node.op {
                Op::Input => Val::real(x.iter().map(|&v| v as f64).collect()),
                Op::Conv { .. } | Op::Linear => self.layer(i, &vals[node.inputs[0]], &weights[&i], precision)?,
                Op::MaxPool { kernel } => maxpool(&vals[node.inputs[0]], &g.nodes[node.inputs[0]].shape, kernel),
                Op::Gap => {
                    let src = &vals[node.inputs[0]];
                    let c = node.shape[0];
                    let hw = src.data.len() / c;
                    Val::real(
                        (0..c)
                            .map(|ch| src.data[ch * hw..(ch + 1) * hw].iter().map(|&d| src.value(d)).sum::<f64>() / hw as f64)
                            .collect(),
                    )
                }
                Op::Flatten => vals[node.inputs[0]].clone(),
                Op::Add => {
                    let mut acc = vals[node.inputs[0]].reals();
                    for &j in &node.inputs[1..] {
                        for (a, b) in acc.iter_mut().zip(vals[j].reals()) {
                            *a += b;
                        }
                    }
                    Val::real(acc)
                }
            };
            if node.relu {
                v = v.relu();
            }
            if q && g.owns_quantizer(i) {
                let mut codes: Vec<f64> = v.reals().iter().map(|&r| self.quantize(i, r)).collect();
                if let Some(l) = self.layers.get(&i) {
                    let hw = codes.len() / l.assignment.len();
                    for (ch, &a) in l.assignment.iter().enumerate() {
                        if self.narrow(a) {
                            codes[ch * hw..(ch + 1) * hw].iter_mut().for_each(|k| *k = clear_lsb(*k));
                        }
                    }
                }
                v = Val { data: codes, step: Some(self.step(i)) };
            }
            vals.push(v);
        }
        Ok(vals.pop().expect("non-empty graph").reals())
    }

    fn layer(&self, i: usize, input: &Val, w: &[f64], precision: Precision) -> Result<Val> {
        let g = &self.graph;
        let l = &self.layers[&i];
        let node = &g.nodes[i];
        let in_shape = &g.nodes[node.inputs[0]].shape;
        let mut x = input.clone();
        if let Some(gather) = &l.input_gather {
            x = gather_channels(&x, in_shape[0], gather);
        }
        // Narrow converters read the input with its LSB cleared.
        let narrow_x = (precision == Precision::Quantized && l.assignment.iter().any(|&a| self.narrow(a)))
            .then(|| Val { data: x.data.iter().map(|&k| clear_lsb(k)).collect(), step: x.step });
        if precision == Precision::Quantized && x.step.is_none() {
            return Err(Error::Mismatch(format!("layer `{}` reads an unquantized tensor", node.name)));
        }
        let c_out = l.assignment.len();
        let per_w = w.len() / c_out;
        let geom = Geom::new(node, in_shape);
        let hw = geom.oh * geom.ow;
        let mut out = vec![0f64; c_out * hw];
        let mut channel = |ch: usize| {
            let a = l.assignment[ch];
            let src = match (&narrow_x, self.narrow(a)) {
                (Some(nx), true) => &nx.data,
                _ => &x.data,
            };
            let dst = &mut out[ch * hw..(ch + 1) * hw];
            geom.channel(src, &w[ch * per_w..(ch + 1) * per_w], ch, dst);
            let (mul, bias) = match precision {
                Precision::Float => (1.0, l.bias[ch] as f64),
                Precision::Quantized => {
                    let bits = self.accelerators.get(a).weight_bits;
                    let wstep = l.weight_scales[a] as f64 / weight_levels(bits) as f64;
                    (x.step.unwrap_or(1.0) * wstep, l.bias[ch] as f64)
                }
            };
            dst.iter_mut().for_each(|v| *v = *v * mul + bias);
        };
        match &l.sublayers {
            Some(subs) => {
                for s in subs {
                    (s.start..s.end).for_each(&mut channel);
                }
            }
            None => (0..c_out).for_each(channel),
        }
        Ok(Val::real(out))
    }
}

/// Clears the LSB of a non-negative integer code.
fn clear_lsb(k: f64) -> f64 {
    (((k as u64) >> 1) << 1) as f64
}

#[derive(Debug, Clone)]
struct Val {
    data: Vec<f64>,
    /// `Some(step)`: `data` holds integer codes of a grid with this step.
    step: Option<f64>,
}

impl Val {
    fn real(data: Vec<f64>) -> Val {
        Val { data, step: None }
    }

    fn value(&self, d: f64) -> f64 {
        match self.step {
            Some(s) => d * s,
            None => d,
        }
    }

    fn reals(&self) -> Vec<f64> {
        self.data.iter().map(|&d| self.value(d)).collect()
    }

    fn relu(self) -> Val {
        Val { data: self.data.into_iter().map(|v| v.max(0.0)).collect(), step: self.step }
    }
}

fn maxpool(v: &Val, shape: &[usize], k: usize) -> Val {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(v.data[(ch * h + oy * k + dy) * w + ox * k + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Val { data: out, step: v.step }
}

fn gather_channels(v: &Val, c: usize, gather: &[usize]) -> Val {
    let per = v.data.len() / c;
    let data = gather.iter().flat_map(|&j| v.data[j * per..(j + 1) * per].iter().copied()).collect();
    Val { data, step: v.step }
}

/// Geometry of one layer for the per-channel MAC loop.
struct Geom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    depthwise: bool,
}

impl Geom {
    fn new(node: &crate::graph::Node, in_shape: &[usize]) -> Geom {
        match node.op {
            Op::Conv { kernel, stride, padding, depthwise } => Geom {
                c_in: in_shape[0],
                h: in_shape[1],
                w: in_shape[2],
                k: kernel,
                stride,
                pad: padding,
                oh: node.shape[1],
                ow: node.shape[2],
                depthwise,
            },
            _ => Geom { c_in: in_shape[0], h: 1, w: 1, k: 1, stride: 1, pad: 0, oh: 1, ow: 1, depthwise: false },
        }
    }

    /// Writes the raw (un-rescaled) accumulation of output channel `ch`.
    fn channel(&self, x: &[f64], w: &[f64], ch: usize, dst: &mut [f64]) {
        let inputs: Vec<(usize, usize)> = if self.depthwise {
            vec![(ch, 0)]
        } else {
            (0..self.c_in).map(|ci| (ci, ci)).collect()
        };
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let mut acc = 0f64;
                for &(ci, wi) in &inputs {
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            acc += x[(ci * self.h + iy as usize) * self.w + ix as usize]
                                * w[(wi * self.k + ky) * self.k + kx];
                        }
                    }
                }
                dst[oy * self.ow + ox] = acc;
            }
        }
    }
}
