//! Trainable quantizer state: one weight scale per (layer, accelerator) and one
//! activation range per quantizer-owning node.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::cost::AcceleratorSet;
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::model::{forward, Exec, FloatExec, Model};
use crate::quant::{initial_weight_log_scale, QuantMode, QuantSpec};
use crate::tensor::{Float, Tensor};

#[derive(Debug)]
pub struct QuantParams {
    /// Per layer node, one weight quantizer per accelerator (its bit width).
    pub weights: BTreeMap<usize, Vec<QuantSpec>>,
    /// Log activation range per quantizer owner.
    pub ranges: BTreeMap<usize, Tensor>,
}

impl QuantParams {
    /// Weight scales from the current weights, activation ranges at 1.
    pub fn init(model: &Model, accs: &AcceleratorSet) -> Result<QuantParams> {
        let mut weights = BTreeMap::new();
        for (&i, p) in &model.layers {
            let w = p.weight.to_vec();
            let specs = accs
                .iter()
                .map(|a| QuantSpec::new(a.weight_bits, QuantMode::Weights, initial_weight_log_scale(&w, a.weight_bits)))
                .collect::<Result<Vec<_>>>()?;
            weights.insert(i, specs);
        }
        let ranges = model
            .graph
            .quantizer_owners()
            .into_iter()
            .map(|i| (i, Tensor::param(&[1], vec![0.0]).unwrap()))
            .collect();
        Ok(QuantParams { weights, ranges })
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.weights.values().flatten().map(|q| q.log_scale.clone()).collect();
        out.extend(self.ranges.values().cloned());
        out
    }

    pub fn weight(&self, layer: usize, acc: usize) -> &QuantSpec {
        &self.weights[&layer][acc]
    }

    pub fn log_range(&self, owner: usize) -> &Tensor {
        &self.ranges[&owner]
    }

    pub fn range(&self, owner: usize) -> Float {
        self.ranges[&owner].item().exp()
    }

    pub fn to_checkpoint(&self, model: &Model, accs: &AcceleratorSet, ck: &mut Checkpoint) {
        for (&i, specs) in &self.weights {
            for (a, q) in accs.iter().zip(specs) {
                ck.insert(format!("{}.scale.{}", model.graph.nodes[i].name, a.name), &q.log_scale);
            }
        }
        for (&i, r) in &self.ranges {
            ck.insert(format!("{}.range", model.graph.nodes[i].name), r);
        }
    }

    pub fn restore(&self, model: &Model, accs: &AcceleratorSet, ck: &Checkpoint) -> Result<()> {
        for (&i, specs) in &self.weights {
            for (a, q) in accs.iter().zip(specs) {
                let v = ck.expect(&format!("{}.scale.{}", model.graph.nodes[i].name, a.name), &[1])?;
                q.log_scale.set_data(v.to_vec())?;
            }
        }
        for (&i, r) in &self.ranges {
            r.set_data(ck.expect(&format!("{}.range", model.graph.nodes[i].name), &[1])?.to_vec())?;
        }
        Ok(())
    }

    pub fn from_checkpoint(model: &Model, accs: &AcceleratorSet, ck: &Checkpoint) -> Result<QuantParams> {
        let q = QuantParams::init(model, accs)?;
        q.restore(model, accs, ck)?;
        Ok(q)
    }
}

struct Observer<'a> {
    float: FloatExec<'a>,
    seen: RefCell<BTreeMap<usize, f64>>,
    momentum: f64,
}

impl Exec for Observer<'_> {
    fn layer(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        self.float.layer(i, x)
    }

    fn activation(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let m = x.data().iter().fold(0.0 as Float, |a, &v| a.max(v)) as f64;
        let mut seen = self.seen.borrow_mut();
        let e = seen.entry(i).or_insert(m);
        *e = self.momentum * *e + (1.0 - self.momentum) * m;
        Ok(x.clone())
    }
}

/// Sets activation ranges to a moving average of per-batch maxima over one
/// pass of the training split.
pub fn calibrate_ranges(model: &Model, q: &QuantParams, data: &Dataset, batch: usize) -> Result<()> {
    let obs = Observer { float: FloatExec { model, train: false }, seen: RefCell::new(BTreeMap::new()), momentum: 0.9 };
    let idx = data.indices(Split::Train);
    for (x, _) in data.batches(&idx, batch) {
        forward(&model.graph, &obs, &x)?;
    }
    for (i, m) in obs.seen.into_inner() {
        if let Some(r) = q.ranges.get(&i) {
            r.set_data(vec![(m.max(1e-3) as Float).ln()])?;
        }
    }
    Ok(())
}
