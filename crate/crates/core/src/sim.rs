//! Inference reports: accuracy from quantized execution, latency and energy
//! from the exact analytical models with all accelerators running in parallel
//! inside each layer. Costs are model estimates, not measurements.

use serde::{Deserialize, Serialize};

use crate::cost::AcceleratorSet;
use crate::data::{Dataset, Split};
use crate::deploy::{Deployment, Precision};
use crate::error::Result;
use crate::graph::Graph;
use crate::mapping::MappingDecision;

/// Exact cost of one layer under a decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: String,
    pub channels: Vec<usize>,
    pub cycles: Vec<f64>,
    pub max_cycles: f64,
    /// Share of the layer latency each accelerator is computing, in percent.
    pub active_pct: Vec<f64>,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceleratorUsage {
    pub name: String,
    pub channels: usize,
    pub busy_cycles: f64,
    pub utilization_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub accuracy_pct: f64,
    pub samples: usize,
    pub latency_cycles: f64,
    pub energy_units: f64,
    pub analog_channel_pct: f64,
    pub accelerators: Vec<AcceleratorUsage>,
    pub gather_fallback: bool,
    pub layers: Vec<LayerRow>,
}

pub fn utilization_breakdown(graph: &Graph, accs: &AcceleratorSet, decision: &MappingDecision) -> Result<Vec<LayerRow>> {
    let costs = decision.layer_costs(graph, accs)?;
    Ok(decision
        .layers
        .iter()
        .zip(costs)
        .map(|(la, c)| LayerRow {
            layer: la.name.clone(),
            channels: MappingDecision::counts(&la.assignments, accs.len()),
            active_pct: c
                .per_accelerator
                .iter()
                .map(|&l| if c.latency > 0.0 { 100.0 * l / c.latency } else { 0.0 })
                .collect(),
            cycles: c.per_accelerator,
            max_cycles: c.latency,
            energy: c.energy,
        })
        .collect())
}

/// CSV with header
/// `layer,<acc>_channels...,<acc>_cycles...,max_cycles,<acc>_active_pct...,energy`.
pub fn breakdown_csv(rows: &[LayerRow], accs: &AcceleratorSet) -> String {
    let names: Vec<&str> = accs.iter().map(|a| a.name.as_str()).collect();
    let mut header = vec!["layer".to_string()];
    header.extend(names.iter().map(|n| format!("{n}_channels")));
    header.extend(names.iter().map(|n| format!("{n}_cycles")));
    header.push("max_cycles".into());
    header.extend(names.iter().map(|n| format!("{n}_active_pct")));
    header.push("energy".into());
    let mut out = header.join(",") + "\n";
    for r in rows {
        let mut f = vec![r.layer.clone()];
        f.extend(r.channels.iter().map(|c| c.to_string()));
        f.extend(r.cycles.iter().map(|c| c.to_string()));
        f.push(r.max_cycles.to_string());
        f.extend(r.active_pct.iter().map(|p| format!("{p:.4}")));
        f.push(r.energy.to_string());
        out += &(f.join(",") + "\n");
    }
    out
}

/// Cost part of a report; accuracy fields are zero.
pub fn cost_report(graph: &Graph, accs: &AcceleratorSet, decision: &MappingDecision) -> Result<InferenceReport> {
    let rows = utilization_breakdown(graph, accs, decision)?;
    let latency: f64 = rows.iter().map(|r| r.max_cycles).sum();
    let energy: f64 = rows.iter().map(|r| r.energy).sum();
    let accelerators = accs
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let busy: f64 = rows.iter().map(|r| r.cycles[i]).sum();
            AcceleratorUsage {
                name: a.name.clone(),
                channels: rows.iter().map(|r| r.channels[i]).sum(),
                busy_cycles: busy,
                utilization_pct: if latency > 0.0 { 100.0 * busy / latency } else { 0.0 },
            }
        })
        .collect();
    Ok(InferenceReport {
        accuracy_pct: 0.0,
        samples: 0,
        latency_cycles: latency,
        energy_units: energy,
        analog_channel_pct: decision.analog_channel_pct(accs),
        accelerators,
        gather_fallback: false,
        layers: rows,
    })
}

/// Quantized top-1 accuracy (percent) and the number of samples evaluated.
pub fn quantized_accuracy(dep: &Deployment, data: &Dataset, split: Split) -> Result<(f64, usize)> {
    let idx = data.indices(split);
    let k = dep.graph.classes();
    let mut hits = 0;
    for chunk in idx.chunks(256) {
        let (x, labels) = data.batch(chunk);
        let logits = dep.run(&x.to_vec(), chunk.len(), Precision::Quantized)?;
        for (r, &l) in labels.iter().enumerate() {
            if argmax_f64(&logits[r * k..(r + 1) * k]) == l {
                hits += 1;
            }
        }
    }
    let acc = if idx.is_empty() { 0.0 } else { 100.0 * hits as f64 / idx.len() as f64 };
    Ok((acc, idx.len()))
}

fn argmax_f64(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn simulate(dep: &Deployment, data: &Dataset, split: Split) -> Result<InferenceReport> {
    let decision = dep.decision();
    let mut report = cost_report(&dep.graph, &dep.accelerators, &decision)?;
    let (acc, n) = quantized_accuracy(dep, data, split)?;
    report.accuracy_pct = acc;
    report.samples = n;
    report.gather_fallback = dep.uses_gather();
    Ok(report)
}
