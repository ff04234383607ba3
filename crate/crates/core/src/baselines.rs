//! Reference mappings: single-accelerator, first/last-layer heuristic and the
//! per-layer minimum-cost split.

use crate::cost::{AcceleratorSet, LayerSpec, Objective};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mapping::{LayerAssignment, MappingDecision};

/// Relative tolerance for treating two costs as equal.
const TIE: f64 = 1e-12;

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE * a.abs().max(b.abs()).max(1.0)
}

/// The accelerator a layer falls back to when `acc` cannot run it.
fn fallback(graph: &Graph, accs: &AcceleratorSet, i: usize, acc: usize) -> usize {
    let kind = graph.layer_spec(i).kind;
    if accs.get(acc).supports(kind) {
        return acc;
    }
    let precise = accs.precise_index();
    let to = if accs.get(precise).supports(kind) {
        precise
    } else {
        (0..accs.len()).find(|&a| accs.get(a).supports(kind)).unwrap_or(precise)
    };
    log::warn!(
        "`{}` cannot run {:?} layer `{}`; mapped to `{}`",
        accs.get(acc).name,
        kind,
        graph.nodes[i].name,
        accs.get(to).name
    );
    to
}

fn whole_layers(graph: &Graph, choose: impl Fn(usize, usize) -> usize) -> MappingDecision {
    let layers = graph
        .layers()
        .into_iter()
        .enumerate()
        .map(|(k, i)| LayerAssignment {
            name: graph.nodes[i].name.clone(),
            assignments: vec![choose(k, i); graph.nodes[i].channels()],
        })
        .collect();
    MappingDecision { layers }
}

/// Every channel on `acc`, except layers it cannot run.
pub fn all_single(graph: &Graph, accs: &AcceleratorSet, acc: usize) -> MappingDecision {
    whole_layers(graph, |_, i| fallback(graph, accs, i, acc))
}

/// First and last layers on the precise accelerator, the rest on the
/// lowest-precision one.
pub fn io8_backbone_ternary(graph: &Graph, accs: &AcceleratorSet) -> Result<MappingDecision> {
    let n = graph.layers().len();
    if n < 3 {
        return Err(Error::Config(format!("the first/last-layer baseline needs at least 3 layers, `{}` has {n}", graph.name)));
    }
    let (hi, lo) = (accs.precise_index(), accs.low_precision_index());
    Ok(whole_layers(graph, |k, i| if k == 0 || k + 1 == n { hi } else { fallback(graph, accs, i, lo) }))
}

/// Channel counts minimizing the exact layer cost; ties go to the split with
/// the most channels on the precise accelerator.
pub fn min_cost_split(accs: &AcceleratorSet, layer: &LayerSpec, objective: Objective) -> Result<Vec<usize>> {
    let n = accs.len();
    let c = layer.c_out;
    let ok: Vec<bool> = accs.iter().map(|a| a.supports(layer.kind)).collect();
    let precise = accs.precise_index();
    if !ok.iter().any(|&b| b) {
        return Err(Error::Config(format!("no accelerator runs {:?} layers", layer.kind)));
    }
    let better = |cost: f64, p: usize, best: &Option<(f64, usize)>| match best {
        None => true,
        Some((bc, bp)) => (cost < *bc && !same(cost, *bc)) || (same(cost, *bc) && p > *bp),
    };
    if n <= 2 {
        let mut best: Option<(f64, usize)> = None;
        let mut split = vec![0; n];
        for c0 in 0..=c {
            let s: Vec<usize> = if n == 1 { vec![c] } else { vec![c0, c - c0] };
            if s.iter().zip(&ok).any(|(&k, &o)| k > 0 && !o) || (n == 1 && c0 > 0) {
                continue;
            }
            let cost = accs.layer_cost(layer, &s)?.cost(objective);
            if better(cost, s[precise], &best) {
                best = Some((cost, s[precise]));
                split = s;
            }
        }
        return Ok(split);
    }
    // N > 2. Cost = sum_i w_i L_i + P * max_i L_i with w_i = p_act - p_idle and
    // P = sum p_idle (energy), or w = 0, P = 1 (latency). For every candidate
    // makespan T, a knapsack over accelerators minimizes sum_i w_i L_i with
    // every L_i <= T; the best T gives the optimum.
    let lat: Vec<Vec<f64>> = accs
        .iter()
        .map(|a| (0..=c).map(|k| a.latency(layer, k)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let w: Vec<f64> = match objective {
        Objective::Latency => vec![0.0; n],
        Objective::Energy => accs.iter().map(|a| a.p_act - a.p_idle).collect(),
    };
    let mut ts: Vec<f64> = lat.iter().flatten().copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut best: Option<(f64, usize)> = None;
    let mut split = vec![0; n];
    for &t in &ts {
        // dp[k] = (partial cost, precise channels, choices) over the first accelerators.
        let mut dp: Vec<Option<(f64, usize, Vec<usize>)>> = vec![None; c + 1];
        dp[0] = Some((0.0, 0, Vec::new()));
        for a in 0..n {
            let mut next: Vec<Option<(f64, usize, Vec<usize>)>> = vec![None; c + 1];
            for (used, cur) in dp.iter().enumerate() {
                let Some((cost, p, ch)) = cur else { continue };
                let max_k = if ok[a] { c - used } else { 0 };
                for k in 0..=max_k {
                    if lat[a][k] > t {
                        break;
                    }
                    let nc = cost + w[a] * lat[a][k];
                    let np = p + if a == precise { k } else { 0 };
                    let slot = &mut next[used + k];
                    let take = match slot {
                        None => true,
                        Some((bc, bp, _)) => (nc < *bc && !same(nc, *bc)) || (same(nc, *bc) && np > *bp),
                    };
                    if take {
                        let mut v = ch.clone();
                        v.push(k);
                        *slot = Some((nc, np, v));
                    }
                }
            }
            dp = next;
        }
        if let Some((_, _, s)) = &dp[c] {
            // Evaluate the exact cost; the true makespan may be below t.
            let cost = accs.layer_cost(layer, s)?.cost(objective);
            if better(cost, s[precise], &best) {
                best = Some((cost, s[precise]));
                split = s.clone();
            }
        }
    }
    Ok(split)
}

/// Channels in ascending accelerator order for a count vector.
pub fn assignment_from_counts(counts: &[usize]) -> Vec<usize> {
    counts.iter().enumerate().flat_map(|(a, &k)| std::iter::repeat_n(a, k)).collect()
}

pub fn min_cost(graph: &Graph, accs: &AcceleratorSet, objective: Objective) -> Result<MappingDecision> {
    let layers = graph
        .layers()
        .into_iter()
        .map(|i| {
            let split = min_cost_split(accs, &graph.layer_spec(i), objective)?;
            Ok(LayerAssignment { name: graph.nodes[i].name.clone(), assignments: assignment_from_counts(&split) })
        })
        .collect::<Result<_>>()?;
    Ok(MappingDecision { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::diana;

    #[test]
    fn toy_layer_goes_digital() {
        let d = diana();
        let l = LayerSpec::conv(8, 4, 1, 4);
        let s = min_cost_split(&d, &l, Objective::Latency).unwrap();
        assert_eq!(s, vec![0, 4]);
        assert_eq!(d.layer_cost(&l, &s).unwrap().latency, 64.0);
    }

    #[test]
    fn heuristic_layers() {
        let g = Graph::named("toy_resnet").unwrap();
        let d = diana();
        let m = io8_backbone_ternary(&g, &d).unwrap();
        let first: Vec<usize> = m.layers.iter().map(|l| l.assignments[0]).collect();
        assert_eq!(first, vec![1, 0, 0, 0, 1]);
        let mobile = Graph::named("toy_mobile").unwrap();
        let t = all_single(&mobile, &d, 0);
        assert_eq!(t.get("dw2").unwrap()[0], 1);
        assert_eq!(t.get("pw2").unwrap()[0], 0);
    }
}
