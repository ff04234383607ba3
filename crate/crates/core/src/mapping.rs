//! Per-channel accelerator assignments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{AcceleratorSet, CostBreakdown, Objective};
use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerAssignment {
    pub name: String,
    pub assignments: Vec<usize>,
}

/// JSON shape: `{"layers": [{"name": ..., "assignments": [...]}, ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingDecision {
    pub layers: Vec<LayerAssignment>,
}

impl MappingDecision {
    /// Every layer fully on accelerator `acc` (no support check).
    pub fn uniform(graph: &Graph, acc: usize) -> Self {
        MappingDecision {
            layers: graph
                .layers()
                .into_iter()
                .map(|i| LayerAssignment {
                    name: graph.nodes[i].name.clone(),
                    assignments: vec![acc; graph.nodes[i].channels()],
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.layers.iter().find(|l| l.name == name).map(|l| l.assignments.as_slice())
    }

    /// Channels per accelerator for one layer.
    pub fn counts(assignments: &[usize], n: usize) -> Vec<usize> {
        let mut c = vec![0; n];
        for &a in assignments {
            c[a] += 1;
        }
        c
    }

    /// Checks layer names, channel counts and accelerator support.
    pub fn validate(&self, graph: &Graph, accs: &AcceleratorSet) -> Result<()> {
        let layers = graph.layers();
        if self.layers.len() != layers.len() {
            return Err(Error::Mismatch(format!(
                "decision has {} layers, network has {}",
                self.layers.len(),
                layers.len()
            )));
        }
        for (la, &i) in self.layers.iter().zip(&layers) {
            let node = &graph.nodes[i];
            if la.name != node.name {
                return Err(Error::Mismatch(format!("decision layer `{}` where `{}` was expected", la.name, node.name)));
            }
            if la.assignments.len() != node.channels() {
                return Err(Error::Mismatch(format!(
                    "layer `{}`: {} assignments for {} channels",
                    la.name,
                    la.assignments.len(),
                    node.channels()
                )));
            }
            let kind = graph.layer_spec(i).kind;
            for (c, &a) in la.assignments.iter().enumerate() {
                if a >= accs.len() {
                    return Err(Error::Mismatch(format!("layer `{}` channel {c}: accelerator {a} does not exist", la.name)));
                }
                if !accs.get(a).supports(kind) {
                    return Err(Error::Mismatch(format!(
                        "layer `{}` channel {c}: `{}` cannot run {kind:?} layers",
                        la.name,
                        accs.get(a).name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Exact per-layer costs, in layer order.
    pub fn layer_costs(&self, graph: &Graph, accs: &AcceleratorSet) -> Result<Vec<CostBreakdown>> {
        self.validate(graph, accs)?;
        graph
            .layers()
            .iter()
            .zip(&self.layers)
            .map(|(&i, la)| accs.layer_cost(&graph.layer_spec(i), &Self::counts(&la.assignments, accs.len())))
            .collect()
    }

    pub fn total_cost(&self, graph: &Graph, accs: &AcceleratorSet, objective: Objective) -> Result<f64> {
        Ok(self.layer_costs(graph, accs)?.iter().map(|c| c.cost(objective)).sum())
    }

    /// Percentage of channels on analog accelerators.
    pub fn analog_channel_pct(&self, accs: &AcceleratorSet) -> f64 {
        let total: usize = self.layers.iter().map(|l| l.assignments.len()).sum();
        let analog: usize = self
            .layers
            .iter()
            .flat_map(|l| &l.assignments)
            .filter(|&&a| accs.get(a).analog)
            .count();
        if total == 0 {
            0.0
        } else {
            100.0 * analog as f64 / total as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("decision serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `log10` of the number of distinct mappings: each channel of each layer can
/// take any accelerator that supports the layer kind.
pub fn log10_search_space(graph: &Graph, accs: &AcceleratorSet) -> f64 {
    graph
        .layers()
        .iter()
        .map(|&i| {
            let kind = graph.layer_spec(i).kind;
            let choices = accs.iter().filter(|a| a.supports(kind)).count().max(1);
            graph.nodes[i].channels() as f64 * (choices as f64).log10()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::diana;

    #[test]
    fn json_schema() {
        let d = MappingDecision { layers: vec![LayerAssignment { name: "a".into(), assignments: vec![0, 1] }] };
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"layers":[{"name":"a","assignments":[0,1]}]}"#
        );
        assert_eq!(MappingDecision::from_json(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn validation_catches_unsupported_and_mismatch() {
        let g = Graph::named("toy_mobile").unwrap();
        let accs = diana();
        let analog = MappingDecision::uniform(&g, 0);
        assert!(analog.validate(&g, &accs).is_err(), "depthwise on the analog array");
        let digital = MappingDecision::uniform(&g, 1);
        digital.validate(&g, &accs).unwrap();
        let mut short = digital.clone();
        short.layers[0].assignments.pop();
        assert!(matches!(short.validate(&g, &accs), Err(Error::Mismatch(_))));
    }

    #[test]
    fn search_space_counts_binary_choices() {
        let g = Graph::named("toy_resnet").unwrap();
        let channels: usize = g.layers().iter().map(|&i| g.nodes[i].channels()).sum();
        let v = log10_search_space(&g, &diana());
        assert!((v - channels as f64 * 2f64.log10()).abs() < 1e-9);
    }
}
