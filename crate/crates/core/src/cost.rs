//! Analytical latency and energy models.
//!
//! Every model has an exact form (integer cycle counts for the array models)
//! and a differentiable form over real-valued expected channel counts, where
//! each ceiling runs exact in the forward pass and straight-through in the
//! backward pass. The two forms agree numerically on integer inputs.
//!
//! Units are cycles for latency and power-units x cycles for energy.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{smooth_max, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Depthwise,
    Fc,
}

/// Geometry of one Conv/FC layer. FC layers are 1x1 convs with a 1x1 output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub fx: usize,
    pub fy: usize,
    pub ox: usize,
    pub oy: usize,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn conv(c_in: usize, c_out: usize, f: usize, o: usize) -> Self {
        LayerSpec { c_in, c_out, fx: f, fy: f, ox: o, oy: o, kind: LayerKind::Conv }
    }

    pub fn fc(f_in: usize, f_out: usize) -> Self {
        LayerSpec { c_in: f_in, c_out: f_out, fx: 1, fy: 1, ox: 1, oy: 1, kind: LayerKind::Fc }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.c_in, self.c_out, self.fx, self.fy, self.ox, self.oy].contains(&0) {
            return Err(invalid("LayerSpec", format!("all dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Input channels each output channel reduces over (1 for depthwise).
    pub fn reduction_channels(&self) -> usize {
        match self.kind {
            LayerKind::Depthwise => 1,
            _ => self.c_in,
        }
    }

    pub fn macs_per_channel(&self) -> f64 {
        (self.reduction_channels() * self.fx * self.fy * self.ox * self.oy) as f64
    }
}

/// Latency model with its parallelism constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatencyModel {
    /// `ceil(Cin*fx*fy/rows) * ceil(c/cols) * ox*oy + dma * Cin * ceil(c/cols)`.
    Aimc {
        #[serde(default = "aimc_rows")]
        rows: usize,
        #[serde(default = "aimc_cols")]
        cols: usize,
        #[serde(default = "aimc_dma")]
        dma_factor: f64,
    },
    /// `ceil(c/pe_cols) * ceil(oy/pe_rows) * Cin*ox*fx*fy + dma * Cin*c*fx*fy`.
    Digital {
        #[serde(default = "pe16")]
        pe_cols: usize,
        #[serde(default = "pe16")]
        pe_rows: usize,
        #[serde(default = "one")]
        dma_factor: f64,
    },
    /// `k * Cin*fx*fy*ox*oy * c`.
    OpsProportional {
        #[serde(default = "one")]
        k: f64,
    },
}

fn aimc_rows() -> usize {
    1152
}
fn aimc_cols() -> usize {
    512
}
fn aimc_dma() -> f64 {
    8.0
}
fn pe16() -> usize {
    16
}
fn one() -> f64 {
    1.0
}

impl LatencyModel {
    pub fn aimc() -> Self {
        LatencyModel::Aimc { rows: aimc_rows(), cols: aimc_cols(), dma_factor: aimc_dma() }
    }

    pub fn digital() -> Self {
        LatencyModel::Digital { pe_cols: pe16(), pe_rows: pe16(), dma_factor: one() }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LatencyModel::Aimc { rows, cols, dma_factor } => rows > 0 && cols > 0 && dma_factor >= 0.0,
            LatencyModel::Digital { pe_cols, pe_rows, dma_factor } => pe_cols > 0 && pe_rows > 0 && dma_factor >= 0.0,
            LatencyModel::OpsProportional { k } => k >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid latency model constants {self:?}")))
        }
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// One compute domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceleratorSpec {
    pub name: String,
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub latency_model: LatencyModel,
    pub p_act: f64,
    pub p_idle: f64,
    pub supported_kinds: BTreeSet<LayerKind>,
    /// Counted towards the analog channel fraction in reports.
    #[serde(default)]
    pub analog: bool,
    /// Cycles per produced output element for moving activations. Zero for
    /// SoCs where activations stay in a shared scratchpad.
    #[serde(default)]
    pub activation_transfer: f64,
}

impl AcceleratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_act >= self.p_idle && self.p_idle >= 0.0) {
            return Err(Error::Config(format!(
                "{}: need p_act >= p_idle >= 0, got {} / {}",
                self.name, self.p_act, self.p_idle
            )));
        }
        if !(2..=16).contains(&self.weight_bits) || !(1..=16).contains(&self.activation_bits) {
            return Err(Error::Config(format!("{}: unsupported bit widths", self.name)));
        }
        if self.supported_kinds.is_empty() {
            return Err(Error::Config(format!("{}: supports no layer kinds", self.name)));
        }
        self.latency_model.validate()
    }

    pub fn supports(&self, kind: LayerKind) -> bool {
        self.supported_kinds.contains(&kind)
    }

    fn check_channels(layer: &LayerSpec, c: f64) -> Result<()> {
        if !(c >= 0.0) {
            return Err(invalid("latency", format!("negative channel count {c}")));
        }
        if c > layer.c_out as f64 + 1e-4 {
            return Err(invalid("latency", format!("{c} channels exceed C_out = {}", layer.c_out)));
        }
        Ok(())
    }

    /// Exact cycles for `c` whole output channels.
    pub fn latency(&self, layer: &LayerSpec, c: usize) -> Result<f64> {
        Self::check_channels(layer, c as f64)?;
        if c == 0 {
            return Ok(0.0);
        }
        let cin = layer.reduction_channels();
        let core = match self.latency_model {
            LatencyModel::Aimc { rows, cols, dma_factor } => {
                let blocks = ceil_div(c, cols) as f64;
                (ceil_div(cin * layer.fx * layer.fy, rows) as f64) * blocks * (layer.ox * layer.oy) as f64
                    + dma_factor * cin as f64 * blocks
            }
            LatencyModel::Digital { pe_cols, pe_rows, dma_factor } => {
                (ceil_div(c, pe_cols) * ceil_div(layer.oy, pe_rows) * cin * layer.ox * layer.fx * layer.fy) as f64
                    + dma_factor * (cin * c * layer.fx * layer.fy) as f64
            }
            LatencyModel::OpsProportional { k } => k * layer.macs_per_channel() * c as f64,
        };
        Ok(core + self.activation_transfer * (c * layer.ox * layer.oy) as f64)
    }

    /// Differentiable cycles for a real-valued (expected) channel count.
    pub fn latency_soft(&self, layer: &LayerSpec, c: &Tensor) -> Result<Tensor> {
        Self::check_channels(layer, c.item() as f64)?;
        let cin = layer.reduction_channels();
        let core = match self.latency_model {
            LatencyModel::Aimc { rows, cols, dma_factor } => {
                let blocks = c.div_scalar(cols as Float).ceil_ste();
                let per_block = (ceil_div(cin * layer.fx * layer.fy, rows) * layer.ox * layer.oy) as f64
                    + dma_factor * cin as f64;
                blocks.mul_scalar(per_block as Float)
            }
            LatencyModel::Digital { pe_cols, pe_rows, dma_factor } => {
                let blocks = c.div_scalar(pe_cols as Float).ceil_ste();
                let per_block = (ceil_div(layer.oy, pe_rows) * cin * layer.ox * layer.fx * layer.fy) as Float;
                let dma = c.mul_scalar((dma_factor * (cin * layer.fx * layer.fy) as f64) as Float);
                blocks.mul_scalar(per_block).add(&dma)?
            }
            LatencyModel::OpsProportional { k } => c.mul_scalar((k * layer.macs_per_channel()) as Float),
        };
        if self.activation_transfer != 0.0 {
            core.add(&c.mul_scalar((self.activation_transfer * (layer.ox * layer.oy) as f64) as Float))
        } else {
            Ok(core)
        }
    }
}

/// Optimization target for the cost regularizer and Min-Cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Latency,
    Energy,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latency" => Ok(Objective::Latency),
            "energy" => Ok(Objective::Energy),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

/// Per-layer cost of one channel split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub per_accelerator: Vec<f64>,
    /// Busiest accelerator (layer latency, accelerators run in parallel).
    pub latency: f64,
    pub energy: f64,
}

impl CostBreakdown {
    pub fn cost(&self, objective: Objective) -> f64 {
        match objective {
            Objective::Latency => self.latency,
            Objective::Energy => self.energy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceleratorSet {
    #[serde(rename = "accelerator")]
    pub accelerators: Vec<AcceleratorSpec>,
}

impl AcceleratorSet {
    pub fn new(accelerators: Vec<AcceleratorSpec>) -> Result<Self> {
        let set = AcceleratorSet { accelerators };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.accelerators.is_empty() {
            return Err(Error::Config("no accelerators configured".into()));
        }
        for a in &self.accelerators {
            a.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.accelerators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accelerators.is_empty()
    }

    pub fn get(&self, i: usize) -> &AcceleratorSpec {
        &self.accelerators[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, AcceleratorSpec> {
        self.accelerators.iter()
    }

    /// The widest-weight accelerator (lowest index on ties): the "8-bit" one.
    pub fn precise_index(&self) -> usize {
        let best = self.accelerators.iter().map(|a| a.weight_bits).max().unwrap_or(0);
        self.accelerators.iter().position(|a| a.weight_bits == best).unwrap_or(0)
    }

    /// The narrowest-weight accelerator (lowest index on ties).
    pub fn low_precision_index(&self) -> usize {
        let worst = self.accelerators.iter().map(|a| a.weight_bits).min().unwrap_or(0);
        self.accelerators.iter().position(|a| a.weight_bits == worst).unwrap_or(0)
    }

    /// Narrowest activation format across accelerators (search-time activations).
    pub fn min_activation_bits(&self) -> u32 {
        self.accelerators.iter().map(|a| a.activation_bits).min().unwrap_or(8)
    }

    pub fn max_activation_bits(&self) -> u32 {
        self.accelerators.iter().map(|a| a.activation_bits).max().unwrap_or(8)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let set: AcceleratorSet = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("accelerator set serializes")
    }

    fn check_split(&self, layer: &LayerSpec, total: f64) -> Result<()> {
        if (total - layer.c_out as f64).abs() > 1e-4 {
            return Err(invalid(
                "layer cost",
                format!("assignments sum to {total}, layer has {} channels", layer.c_out),
            ));
        }
        Ok(())
    }

    /// Exact per-layer cost for an integer channel split.
    pub fn layer_cost(&self, layer: &LayerSpec, split: &[usize]) -> Result<CostBreakdown> {
        if split.len() != self.len() {
            return Err(Error::Shape { op: "layer_cost", dim: "accelerators", expected: self.len(), got: split.len() });
        }
        self.check_split(layer, split.iter().sum::<usize>() as f64)?;
        let lat = self
            .accelerators
            .iter()
            .zip(split)
            .map(|(a, &c)| a.latency(layer, c))
            .collect::<Result<Vec<_>>>()?;
        let m = lat.iter().cloned().fold(0.0, f64::max);
        let energy = self.energy_of(&lat, m);
        Ok(CostBreakdown { per_accelerator: lat, latency: m, energy })
    }

    fn energy_of(&self, lat: &[f64], m: f64) -> f64 {
        self.accelerators
            .iter()
            .zip(lat)
            .map(|(a, &l)| a.p_act * l + a.p_idle * (m - l))
            .sum()
    }

    /// Layer latency for a real-valued split: `max` in exact mode, or the
    /// log-sum-exp smooth max with temperature `beta`.
    pub fn layer_latency(&self, layer: &LayerSpec, split: &[f64], smooth: Option<f64>) -> Result<f64> {
        let t: Vec<Tensor> = split.iter().map(|&c| Tensor::scalar(c as Float)).collect();
        Ok(self.layer_cost_soft(layer, &t, Objective::Latency, smooth)?.item() as f64)
    }

    pub fn layer_energy(&self, layer: &LayerSpec, split: &[f64], smooth: Option<f64>) -> Result<f64> {
        let t: Vec<Tensor> = split.iter().map(|&c| Tensor::scalar(c as Float)).collect();
        Ok(self.layer_cost_soft(layer, &t, Objective::Energy, smooth)?.item() as f64)
    }

    /// Differentiable layer cost from expected channel counts (one scalar per
    /// accelerator). `smooth = Some(beta)` replaces the max by a smooth max.
    pub fn layer_cost_soft(
        &self,
        layer: &LayerSpec,
        channels: &[Tensor],
        objective: Objective,
        smooth: Option<f64>,
    ) -> Result<Tensor> {
        if channels.len() != self.len() {
            return Err(Error::Shape { op: "layer_cost_soft", dim: "accelerators", expected: self.len(), got: channels.len() });
        }
        self.check_split(layer, channels.iter().map(|c| c.item() as f64).sum())?;
        let lat = self
            .accelerators
            .iter()
            .zip(channels)
            .map(|(a, c)| a.latency_soft(layer, c))
            .collect::<Result<Vec<_>>>()?;
        let m = match smooth {
            Some(beta) => smooth_max(&lat, beta as Float)?,
            None => hard_max(&lat),
        };
        match objective {
            Objective::Latency => Ok(m),
            Objective::Energy => {
                let mut total: Option<Tensor> = None;
                for (a, l) in self.accelerators.iter().zip(&lat) {
                    // P_act*LAT + P_idle*(M - LAT)
                    let term = l
                        .mul_scalar((a.p_act - a.p_idle) as Float)
                        .add(&m.mul_scalar(a.p_idle as Float))?;
                    total = Some(match total {
                        Some(t) => t.add(&term)?,
                        None => term,
                    });
                }
                Ok(total.expect("non-empty set"))
            }
        }
    }
}

/// Max over scalars with the gradient routed to the first maximizer.
fn hard_max(values: &[Tensor]) -> Tensor {
    let v: Vec<Float> = values.iter().map(|t| t.item()).collect();
    let (arg, &best) = v
        .iter()
        .enumerate()
        .fold((0, &Float::NEG_INFINITY), |acc, (i, x)| if *x > *acc.1 { (i, x) } else { acc });
    let n = values.len();
    Tensor::from_op(
        "max",
        vec![1],
        vec![best],
        values.to_vec(),
        Box::new(move |g| (0..n).map(|i| Some(vec![if i == arg { g[0] } else { 0.0 }])).collect()),
    )
}

/// Expected channels per accelerator: column sums of the per-channel softmax
/// weights `[C_out, N]`.
pub fn expected_channels(alpha_bar: &Tensor) -> Result<Vec<Tensor>> {
    let sums = alpha_bar.sum_rows()?;
    (0..alpha_bar.shape()[1]).map(|i| sums.index(i)).collect()
}

/// Reference SoC: a ternary analog in-memory accelerator and an 8-bit digital
/// array. Index 0 is the analog one.
pub fn diana() -> AcceleratorSet {
    use LayerKind::*;
    AcceleratorSet {
        accelerators: vec![
            AcceleratorSpec {
                name: "aimc".into(),
                weight_bits: 2,
                activation_bits: 7,
                latency_model: LatencyModel::aimc(),
                p_act: 1.0,
                p_idle: 0.0,
                supported_kinds: [Conv, Fc].into_iter().collect(),
                analog: true,
                activation_transfer: 0.0,
            },
            AcceleratorSpec {
                name: "digital".into(),
                weight_bits: 8,
                activation_bits: 8,
                latency_model: LatencyModel::digital(),
                p_act: 10.0,
                p_idle: 0.0,
                supported_kinds: [Conv, Depthwise, Fc].into_iter().collect(),
                analog: false,
                activation_transfer: 0.0,
            },
        ],
    }
}

/// Abstract pair whose latencies are proportional to MACs, with the 8-bit
/// side drawing 10x the active power. `shutdown` sets idle power to zero,
/// otherwise idle power equals active power.
pub fn ops_proportional(shutdown: bool) -> AcceleratorSet {
    let mut set = diana();
    for a in &mut set.accelerators {
        a.latency_model = LatencyModel::OpsProportional { k: 1.0 };
        a.p_idle = if shutdown { 0.0 } else { a.p_act };
        a.supported_kinds = [LayerKind::Conv, LayerKind::Depthwise, LayerKind::Fc].into_iter().collect();
    }
    set
}
