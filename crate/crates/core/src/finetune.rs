//! Quantization-aware fine-tuning of a fixed mapping.
//!
//! Activations are stored at the widest accelerator width. Accelerators with a
//! one-bit-narrower converter see their inputs with the LSB cleared and emit
//! outputs with the LSB cleared. Each output channel uses the weight quantizer
//! of its assigned accelerator.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cost::AcceleratorSet;
use crate::data::{Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::mapping::MappingDecision;
use crate::model::{apply_layer, forward, Exec, Model};
use crate::qparams::QuantParams;
use crate::quant::{fake_quantize_activations, fake_quantize_weights, truncate_lsb};
use crate::tensor::{cross_entropy, OptimizerConfig, Tensor};
use crate::train::{check_finite, evaluate, EpochLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub weight_optimizer: OptimizerConfig,
    pub scale_optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 32,
            patience: 20,
            weight_optimizer: OptimizerConfig::Sgd { lr: 0.005, momentum: 0.9, weight_decay: 0.0 },
            scale_optimizer: OptimizerConfig::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
        }
    }
}

/// Activation storage width for a set of accelerators, after checking that
/// every converter is either that wide or exactly one bit narrower.
pub fn storage_bits(accs: &AcceleratorSet) -> Result<u32> {
    let storage = accs.max_activation_bits();
    if let Some(a) = accs.iter().find(|a| a.activation_bits + 1 < storage) {
        return Err(Error::Config(format!(
            "`{}` has {}-bit activations; only {storage}-bit and {}-bit converters can share storage",
            a.name,
            a.activation_bits,
            storage - 1
        )));
    }
    Ok(storage)
}

struct LayerPlan {
    /// `(accelerator, 0/1 row mask or None when it owns every channel)`.
    groups: Vec<(usize, Option<Tensor>)>,
    /// Output channels whose LSB is cleared.
    truncated: Option<Vec<bool>>,
}

/// Fake-quantized execution of a discrete mapping.
pub struct DeployExec<'a> {
    model: &'a Model,
    quant: &'a QuantParams,
    accs: &'a AcceleratorSet,
    storage: u32,
    plans: BTreeMap<usize, LayerPlan>,
}

impl<'a> DeployExec<'a> {
    pub fn new(model: &'a Model, quant: &'a QuantParams, accs: &'a AcceleratorSet, decision: &MappingDecision) -> Result<Self> {
        decision.validate(&model.graph, accs)?;
        let storage = storage_bits(accs)?;
        let mut plans = BTreeMap::new();
        for (i, la) in model.graph.layers().into_iter().zip(&decision.layers) {
            let c = la.assignments.len();
            let counts = MappingDecision::counts(&la.assignments, accs.len());
            let groups = (0..accs.len())
                .filter(|&a| counts[a] > 0)
                .map(|a| {
                    let mask = (counts[a] < c).then(|| {
                        let m = la.assignments.iter().map(|&x| if x == a { 1.0 } else { 0.0 }).collect();
                        Tensor::new(&[c], m).unwrap()
                    });
                    (a, mask)
                })
                .collect();
            let trunc: Vec<bool> = la.assignments.iter().map(|&a| accs.get(a).activation_bits < storage).collect();
            let truncated = trunc.iter().any(|&t| t).then_some(trunc);
            plans.insert(i, LayerPlan { groups, truncated });
        }
        Ok(DeployExec { model, quant, accs, storage, plans })
    }
}

impl Exec for DeployExec<'_> {
    fn layer(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let g = &self.model.graph;
        let p = self.model.layer(i);
        let owner = g
            .quant_owner(g.nodes[i].inputs[0])
            .ok_or_else(|| invalid("deploy", format!("`{}` input has no quantizer", g.nodes[i].name)))?;
        let mut out: Option<Tensor> = None;
        for (a, mask) in &self.plans[&i].groups {
            let mut w = fake_quantize_weights(&p.weight, self.quant.weight(i, *a))?;
            if let Some(m) = mask {
                w = w.scale_rows(m)?;
            }
            let xa = if self.accs.get(*a).activation_bits < self.storage {
                truncate_lsb(x, self.quant.range(owner), self.storage, None)?
            } else {
                x.clone()
            };
            let bias = out.is_none().then_some(&p.bias);
            let y = apply_layer(g, i, &xa, &w, bias)?;
            out = Some(match out {
                Some(o) => o.add(&y)?,
                None => y,
            });
        }
        Ok(out.expect("every layer has at least one channel"))
    }

    fn activation(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let q = fake_quantize_activations(x, self.storage, self.quant.log_range(i))?;
        match self.plans.get(&i).and_then(|p| p.truncated.as_deref()) {
            Some(mask) => truncate_lsb(&q, self.quant.range(i), self.storage, Some(mask)),
            None => Ok(q),
        }
    }
}

fn snapshot(model: &Model, quant: &QuantParams, accs: &AcceleratorSet) -> Checkpoint {
    let mut ck = model.checkpoint();
    quant.to_checkpoint(model, accs, &mut ck);
    ck
}

/// Validation accuracy of the fake-quantized deployed network.
pub fn deployed_accuracy(model: &Model, quant: &QuantParams, accs: &AcceleratorSet, decision: &MappingDecision, data: &Dataset) -> Result<f64> {
    let exec = DeployExec::new(model, quant, accs, decision)?;
    evaluate(&model.graph, &exec, data, Split::Val, 256)
}

/// Trains weights and quantizer scales on the task loss only. The starting
/// point competes for best-validation, so the result never scores below it.
pub fn finetune<R: Rng + ?Sized>(
    model: &Model,
    quant: &QuantParams,
    accs: &AcceleratorSet,
    decision: &MappingDecision,
    data: &Dataset,
    cfg: &FinetuneConfig,
    rng: &mut R,
) -> Result<Vec<EpochLog>> {
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let w_params = model.params();
    let s_params = quant.params();
    let mut w_opt = cfg.weight_optimizer.build();
    let mut s_opt = cfg.scale_optimizer.build();
    let mut order = data.indices(Split::Train);
    let mut best = (deployed_accuracy(model, quant, accs, decision, data)?, snapshot(model, quant, accs));
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let exec = DeployExec::new(model, quant, accs, decision)?;
        let (mut sum, mut batches) = (0.0, 0usize);
        for (x, y) in data.batches(&order, cfg.batch_size) {
            for p in w_params.iter().chain(&s_params) {
                p.zero_grad();
            }
            let loss = cross_entropy(&forward(&model.graph, &exec, &x)?, &y)?;
            let v = loss.item() as f64;
            check_finite(v, "fine-tuning", epoch)?;
            loss.backward()?;
            w_opt.step(&w_params);
            s_opt.step(&s_params);
            sum += v;
            batches += 1;
        }
        let acc = evaluate(&model.graph, &exec, data, Split::Val, 256)?;
        let train_loss = sum / batches.max(1) as f64;
        log::debug!("finetune epoch {epoch}: loss {train_loss:.4} val {acc:.2}%");
        log.push(EpochLog { epoch, train_loss, val_accuracy: acc });
        if acc > best.0 {
            best = (acc, snapshot(model, quant, accs));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.restore(&best.1)?;
    quant.restore(model, accs, &best.1)?;
    Ok(log)
}
