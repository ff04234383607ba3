//! Differentiable mapping search.
//!
//! Every Conv/FC layer carries a `[C_out, N]` matrix `alpha`. Per output
//! channel the effective weight is the softmax(alpha / tau)-weighted mix of the
//! N per-accelerator fake-quantized copies of that channel. The cost term uses
//! the expected channel count of each accelerator.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cost::{expected_channels, AcceleratorSet, Objective};
use crate::data::{Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::mapping::{LayerAssignment, MappingDecision};
use crate::model::{apply_layer, forward, Exec, Model};
use crate::qparams::{calibrate_ranges, QuantParams};
use crate::quant::{fake_quantize_activations, fake_quantize_weights};
use crate::tensor::{cross_entropy, Float, OptimizerConfig, Tensor};
use crate::train::check_finite;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub tau: f64,
    /// Multiply tau by `tau_decay` after every epoch.
    pub anneal: bool,
    pub tau_decay: f64,
    pub weight_optimizer: OptimizerConfig,
    pub alpha_optimizer: OptimizerConfig,
    pub scale_optimizer: OptimizerConfig,
    /// Smooth-max temperature as a fraction of the mean initial latency.
    pub beta_factor: f64,
    /// Search-time activation width; defaults to the narrowest accelerator.
    pub activation_bits: Option<u32>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 20,
            batch_size: 32,
            patience: 20,
            tau: 1.0,
            anneal: false,
            tau_decay: 0.97,
            weight_optimizer: OptimizerConfig::Sgd { lr: 0.01, momentum: 0.9, weight_decay: 0.0 },
            alpha_optimizer: OptimizerConfig::Adam { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            scale_optimizer: OptimizerConfig::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            beta_factor: 0.01,
            activation_bits: None,
        }
    }
}

/// Architecture parameters. Entries for accelerators that cannot run a
/// layer's kind are `-inf`, so their softmax weight and gradient are zero.
#[derive(Debug)]
pub struct AlphaParams {
    pub alpha: BTreeMap<usize, Tensor>,
    pub tau: Float,
}

impl AlphaParams {
    pub fn init(graph: &Graph, accs: &AcceleratorSet, tau: Float) -> Result<AlphaParams> {
        let n = accs.len();
        let mut alpha = BTreeMap::new();
        for i in graph.layers() {
            let kind = graph.layer_spec(i).kind;
            let row: Vec<Float> = accs.iter().map(|a| if a.supports(kind) { 0.0 } else { Float::NEG_INFINITY }).collect();
            if row.iter().all(|v| v.is_infinite()) {
                return Err(Error::Config(format!(
                    "no accelerator supports layer `{}` ({kind:?})",
                    graph.nodes[i].name
                )));
            }
            let c = graph.nodes[i].channels();
            alpha.insert(i, Tensor::param(&[c, n], row.repeat(c))?);
        }
        Ok(AlphaParams { alpha, tau })
    }

    pub fn alpha_bar(&self, layer: usize) -> Result<Tensor> {
        self.alpha[&layer].softmax_temp(self.tau)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.alpha.values().cloned().collect()
    }

    /// Hash of the raw bits of every alpha entry, for trajectory comparisons.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in self.alpha.values() {
            for v in t.data().iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Per-channel mix of the fake-quantized copies:
/// `W_eff[c] = sum_i alpha_bar[c, i] * copies[i][c]`. `None` copies belong to
/// masked accelerators and must have zero weight.
pub fn effective_weights(copies: &[Option<Tensor>], alpha_bar: &Tensor) -> Result<Tensor> {
    const OP: &str = "effective_weights";
    if alpha_bar.shape().len() != 2 || alpha_bar.shape()[1] != copies.len() {
        return Err(Error::Shape {
            op: OP,
            dim: "accelerators",
            expected: copies.len(),
            got: alpha_bar.shape().get(1).copied().unwrap_or(0),
        });
    }
    let mut shape: Option<&[usize]> = None;
    let mut acc: Option<Tensor> = None;
    for (i, w) in copies.iter().enumerate() {
        let Some(w) = w else { continue };
        match shape {
            Some(s) if s != w.shape() => {
                return Err(Error::Shape { op: OP, dim: "copy", expected: s.iter().product(), got: w.numel() })
            }
            _ => shape = Some(w.shape()),
        }
        let term = w.scale_rows(&alpha_bar.select_column(i)?)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| invalid(OP, "no weight copies"))
}

/// Everything a search run trains, plus the fixed run parameters.
#[derive(Debug)]
pub struct SearchState {
    /// BN-folded network.
    pub model: Model,
    pub quant: QuantParams,
    pub alpha: AlphaParams,
    pub accelerators: AcceleratorSet,
    pub lambda: f64,
    pub objective: Objective,
    /// Smooth-max temperature per layer.
    pub betas: BTreeMap<usize, f64>,
    pub activation_bits: u32,
    /// Off leaves search-time activations in float (diagnostics only).
    pub quantize_activations: bool,
}

impl SearchState {
    pub fn new(model: Model, accs: AcceleratorSet, lambda: f64, objective: Objective, cfg: &SearchConfig) -> Result<Self> {
        if !model.is_folded() {
            return Err(invalid("search", "the model must be BN-folded first"));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a finite non-negative number, got {lambda}")));
        }
        if cfg.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        let alpha = AlphaParams::init(&model.graph, &accs, cfg.tau as Float)?;
        let quant = QuantParams::init(&model, &accs)?;
        let mut betas = BTreeMap::new();
        for &i in alpha.alpha.keys() {
            let spec = model.graph.layer_spec(i);
            let split = expected_channels(&alpha.alpha_bar(i)?)?;
            let mut mean = 0.0;
            for (a, c) in accs.iter().zip(&split) {
                mean += a.latency_soft(&spec, c)?.item() as f64;
            }
            mean /= accs.len() as f64;
            betas.insert(i, (cfg.beta_factor * mean).max(1e-3));
        }
        let activation_bits = cfg.activation_bits.unwrap_or_else(|| accs.min_activation_bits());
        Ok(SearchState { model, quant, alpha, accelerators: accs, lambda, objective, betas, activation_bits, quantize_activations: true })
    }

    pub fn graph(&self) -> &Graph {
        &self.model.graph
    }

    /// Differentiable cost: sum over layers of the smooth layer latency or energy.
    pub fn regularizer(&self) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for (&i, beta) in &self.betas {
            let spec = self.graph().layer_spec(i);
            let split = expected_channels(&self.alpha.alpha_bar(i)?)?;
            let c = self.accelerators.layer_cost_soft(&spec, &split, self.objective, Some(*beta))?;
            total = Some(match total {
                Some(t) => t.add(&c)?,
                None => c,
            });
        }
        Ok(total.expect("at least one layer"))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.checkpoint();
        self.quant.to_checkpoint(&self.model, &self.accelerators, &mut ck);
        for (&i, a) in &self.alpha.alpha {
            ck.insert(format!("{}.alpha", self.graph().nodes[i].name), a);
        }
        ck
    }

    pub fn restore(&self, ck: &Checkpoint) -> Result<()> {
        self.model.restore(ck)?;
        self.quant.restore(&self.model, &self.accelerators, ck)?;
        for (&i, a) in &self.alpha.alpha {
            a.set_data(ck.expect(&format!("{}.alpha", self.graph().nodes[i].name), a.shape())?.to_vec())?;
        }
        Ok(())
    }

    /// Exec for the relaxed network.
    pub fn exec(&self) -> SearchExec<'_> {
        SearchExec { state: self }
    }
}

pub struct SearchExec<'a> {
    state: &'a SearchState,
}

impl Exec for SearchExec<'_> {
    fn layer(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let s = self.state;
        let p = s.model.layer(i);
        let kind = s.graph().layer_spec(i).kind;
        let copies = s
            .accelerators
            .iter()
            .enumerate()
            .map(|(a, acc)| {
                acc.supports(kind)
                    .then(|| fake_quantize_weights(&p.weight, s.quant.weight(i, a)))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let w = effective_weights(&copies, &s.alpha.alpha_bar(i)?)?;
        apply_layer(s.graph(), i, x, &w, Some(&p.bias))
    }

    fn activation(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        if !self.state.quantize_activations {
            return Ok(x.clone());
        }
        fake_quantize_activations(x, self.state.activation_bits, self.state.quant.log_range(i))
    }
}

pub struct Loss {
    pub total: Tensor,
    pub task: f64,
    pub cost: f64,
}

/// `L_task + lambda * L_cost` on one batch. The cost term is skipped when
/// `lambda = 0`.
pub fn total_loss(state: &SearchState, x: &Tensor, labels: &[usize]) -> Result<Loss> {
    let logits = forward(state.graph(), &state.exec(), x)?;
    let task = cross_entropy(&logits, labels)?;
    let task_v = task.item() as f64;
    if state.lambda == 0.0 {
        return Ok(Loss { total: task, task: task_v, cost: 0.0 });
    }
    let reg = state.regularizer()?;
    let cost = reg.item() as f64;
    Ok(Loss { total: task.add(&reg.mul_scalar(state.lambda as Float))?, task: task_v, cost })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub cost: f64,
    pub val_accuracy: f64,
    pub tau: f64,
    pub alpha_digest: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub epochs: Vec<SearchEpoch>,
    pub best_epoch: Option<usize>,
}

/// Validation accuracy of the relaxed network.
pub fn relaxed_accuracy(state: &SearchState, data: &Dataset, batch: usize) -> Result<f64> {
    crate::train::evaluate(state.graph(), &state.exec(), data, Split::Val, batch)
}

/// Joint training of weights, alpha and quantizer scales. Activation ranges
/// are calibrated on the training split first. On return the state holds the
/// best-validation snapshot.
pub fn search<R: Rng + ?Sized>(state: &mut SearchState, data: &Dataset, cfg: &SearchConfig, rng: &mut R) -> Result<SearchLog> {
    calibrate_ranges(&state.model, &state.quant, data, cfg.batch_size.max(64))?;
    let w_params = state.model.params();
    let a_params = state.alpha.params();
    let s_params = state.quant.params();
    let mut w_opt = cfg.weight_optimizer.build();
    let mut a_opt = cfg.alpha_optimizer.build();
    let mut s_opt = cfg.scale_optimizer.build();
    let mut order = data.indices(Split::Train);
    let mut log = SearchLog { epochs: Vec::new(), best_epoch: None };
    let mut best: Option<(f64, Checkpoint, Float)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut sum, mut sum_task, mut sum_cost) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (x, y) in data.batches(&order, cfg.batch_size) {
            for p in w_params.iter().chain(&a_params).chain(&s_params) {
                p.zero_grad();
            }
            let loss = total_loss(state, &x, &y)?;
            let total = loss.total.item() as f64;
            if !total.is_finite() {
                return Err(Error::Diverged(format!(
                    "search loss became {total} in epoch {epoch} (task {}, cost {}, lambda {})",
                    loss.task, loss.cost, state.lambda
                )));
            }
            loss.total.backward()?;
            w_opt.step(&w_params);
            a_opt.step(&a_params);
            s_opt.step(&s_params);
            sum += total;
            sum_task += loss.task;
            sum_cost += loss.cost;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        check_finite(sum / b, "search", epoch)?;
        let val = relaxed_accuracy(state, data, 256)?;
        let entry = SearchEpoch {
            epoch,
            loss: sum / b,
            task_loss: sum_task / b,
            cost: sum_cost / b,
            val_accuracy: val,
            tau: state.alpha.tau as f64,
            alpha_digest: state.alpha.digest(),
        };
        log::debug!(
            "search lambda={} epoch {epoch}: loss {:.4} task {:.4} cost {:.1} val {val:.2}%",
            state.lambda,
            entry.loss,
            entry.task_loss,
            entry.cost
        );
        log.epochs.push(entry);
        if best.as_ref().is_none_or(|b| val > b.0) {
            best = Some((val, state.checkpoint(), state.alpha.tau));
            log.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        if cfg.anneal {
            state.alpha.tau *= cfg.tau_decay as Float;
        }
        if stale >= cfg.patience {
            break;
        }
    }
    if let Some((_, ck, tau)) = best {
        state.restore(&ck)?;
        state.alpha.tau = tau;
    }
    Ok(log)
}

/// Per channel, the accelerator with the largest alpha; exact ties go to the
/// lower index. Masked entries are `-inf` and never win.
pub fn discretize(state: &SearchState) -> MappingDecision {
    let layers = state
        .alpha
        .alpha
        .iter()
        .map(|(&i, a)| {
            let n = a.shape()[1];
            let d = a.data();
            let assignments = d
                .chunks(n)
                .map(|row| {
                    let mut best = 0;
                    for (k, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = k;
                        }
                    }
                    best
                })
                .collect();
            LayerAssignment { name: state.graph().nodes[i].name.clone(), assignments }
        })
        .collect();
    MappingDecision { layers }
}
