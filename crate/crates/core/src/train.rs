//! Float pretraining and shared evaluation helpers.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{forward, Exec, FloatExec, Model};
use crate::tensor::{cross_entropy, Float, OptimizerConfig, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_batch() -> usize {
    32
}
fn default_patience() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Number of rows whose argmax equals the label (first maximum wins).
pub fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    let d = logits.data();
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(&d[r * k..(r + 1) * k]) == l)
        .count()
}

pub fn argmax(row: &[Float]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy in percent over one split.
pub fn evaluate(graph: &Graph, exec: &dyn Exec, data: &Dataset, split: Split, batch: usize) -> Result<f64> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (x, y) in data.batches(&idx, batch) {
        hits += correct(&forward(graph, exec, &x)?, &y);
    }
    Ok(100.0 * hits as f64 / idx.len() as f64)
}

pub(crate) fn check_finite(loss: f64, what: &str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} loss became {loss} in epoch {epoch}")))
    }
}

/// Trains the float model (with BN) and restores the best-validation weights.
pub fn pretrain<R: Rng + ?Sized>(model: &Model, data: &Dataset, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<EpochLog>> {
    let params = model.params();
    let mut opt = cfg.optimizer.build();
    let mut order = data.indices(Split::Train);
    let mut log = Vec::new();
    let mut best = (f64::NEG_INFINITY, model.checkpoint());
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let exec = FloatExec { model, train: true };
        let mut total = 0.0;
        for (x, y) in data.batches(&order, cfg.batch_size) {
            params.iter().for_each(Tensor::zero_grad);
            let loss = cross_entropy(&forward(&model.graph, &exec, &x)?, &y)?;
            loss.backward()?;
            opt.step(&params);
            total += loss.item() as f64 * y.len() as f64;
        }
        let train_loss = total / order.len().max(1) as f64;
        check_finite(train_loss, "pretraining", epoch)?;
        let acc = evaluate(&model.graph, &FloatExec { model, train: false }, data, Split::Val, 256)?;
        log::debug!("pretrain epoch {epoch}: loss {train_loss:.4} val {acc:.2}%");
        log.push(EpochLog { epoch, train_loss, val_accuracy: acc });
        if acc > best.0 {
            best = (acc, model.checkpoint());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.restore(&best.1)?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let logits = Tensor::new(&[2, 2], vec![0.1, 0.9, 0.8, 0.2]).unwrap();
        assert_eq!(correct(&logits, &[1, 1]), 1);
    }
}
