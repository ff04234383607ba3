//! Exhaustive reference for the per-layer minimum-cost split.

use odimo::baselines::min_cost_split;
use odimo::cost::{diana, AcceleratorSet, LatencyModel, LayerSpec, Objective};
use rand::Rng;

use super::rng;

/// Cost of a count vector, written out from the per-accelerator latencies.
pub fn oracle_cost(accs: &AcceleratorSet, layer: &LayerSpec, split: &[usize], obj: Objective) -> f64 {
    let lat: Vec<f64> = accs.iter().zip(split).map(|(a, &k)| a.latency(layer, k).unwrap()).collect();
    let m = lat.iter().cloned().fold(0.0, f64::max);
    match obj {
        Objective::Latency => m,
        Objective::Energy => accs.iter().zip(&lat).map(|(a, &l)| a.p_act * l + a.p_idle * (m - l)).sum(),
    }
}

/// Every count vector summing to `c`, skipping unsupported accelerators.
pub fn splits(n: usize, c: usize, ok: &[bool]) -> Vec<Vec<usize>> {
    if n == 1 {
        return if ok[0] || c == 0 { vec![vec![c]] } else { vec![] };
    }
    let mut out = Vec::new();
    let top = if ok[n - 1] { c } else { 0 };
    for k in 0..=top {
        for mut s in splits(n - 1, c - k, &ok[..n - 1]) {
            s.push(k);
            out.push(s);
        }
    }
    out
}

pub fn brute_force(accs: &AcceleratorSet, layer: &LayerSpec, obj: Objective) -> (f64, Vec<usize>) {
    let ok: Vec<bool> = accs.iter().map(|a| a.supports(layer.kind)).collect();
    let p = accs.precise_index();
    let all = splits(accs.len(), layer.c_out, &ok);
    let best = all.iter().map(|s| oracle_cost(accs, layer, s, obj)).fold(f64::INFINITY, f64::min);
    let winner = all
        .into_iter()
        .filter(|s| oracle_cost(accs, layer, s, obj) == best)
        .max_by_key(|s| s[p])
        .unwrap();
    (best, winner)
}

pub fn random_layer<R: Rng>(r: &mut R) -> LayerSpec {
    let c_out = r.random_range(1..=32);
    match r.random_range(0..3) {
        0 => LayerSpec::fc(r.random_range(1..=600), c_out),
        _ => {
            let f = [1, 3, 5][r.random_range(0..3)];
            LayerSpec::conv(r.random_range(1..=160), c_out, f, r.random_range(1..=16))
        }
    }
}

/// DIANA plus a third, slower 8-bit engine with idle power.
pub fn three_way() -> AcceleratorSet {
    let mut set = diana();
    let mut extra = set.accelerators[1].clone();
    extra.name = "cluster".into();
    extra.latency_model = LatencyModel::OpsProportional { k: 0.05 };
    extra.p_act = 3.0;
    extra.p_idle = 0.5;
    set.accelerators[0].p_idle = 0.1;
    set.accelerators.push(extra);
    set
}

/// Compares `layers` random layers against enumeration on two and three
/// accelerators, for both objectives.
pub fn check_against_enumeration(layers: usize, seed: u64) {
    let mut r = rng(seed);
    let sets = [diana(), three_way()];
    for _ in 0..layers {
        let layer = random_layer(&mut r);
        for accs in &sets {
            for obj in [Objective::Latency, Objective::Energy] {
                let got = min_cost_split(accs, &layer, obj).unwrap();
                let (cost, want) = brute_force(accs, &layer, obj);
                assert_eq!(oracle_cost(accs, &layer, &got, obj), cost, "{layer:?} {obj:?}");
                assert_eq!(got, want, "{layer:?} {obj:?}");
            }
        }
    }
}
