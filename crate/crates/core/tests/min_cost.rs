mod common;

use common::oracle::*;
use common::rng;
use odimo::baselines::{all_single, assignment_from_counts, min_cost, min_cost_split};
use odimo::cost::{diana, LayerKind, LayerSpec, Objective};
use odimo::graph::Graph;

#[test]
fn matches_exhaustive_enumeration_on_random_layers() {
    check_against_enumeration(50, 42);
}

#[test]
fn never_worse_than_single_accelerator_mappings() {
    let accs = diana();
    for net in ["toy_resnet", "toy_plain", "toy_mobile"] {
        let g = Graph::named(net).unwrap();
        for obj in [Objective::Latency, Objective::Energy] {
            let m = min_cost(&g, &accs, obj).unwrap();
            let c = m.total_cost(&g, &accs, obj).unwrap();
            for a in 0..accs.len() {
                assert!(c <= all_single(&g, &accs, a).total_cost(&g, &accs, obj).unwrap());
            }
        }
    }
}

#[test]
fn depthwise_layers_stay_on_capable_accelerators() {
    let accs = diana();
    let layer = LayerSpec { kind: LayerKind::Depthwise, ..LayerSpec::conv(1, 16, 3, 4) };
    assert_eq!(min_cost_split(&accs, &layer, Objective::Latency).unwrap(), vec![0, 16]);
    assert_eq!(assignment_from_counts(&[2, 1]), vec![0, 0, 1]);
}

#[test]
fn single_accelerator_takes_everything() {
    let mut accs = diana();
    accs.accelerators.truncate(1);
    assert_eq!(min_cost_split(&accs, &LayerSpec::conv(8, 5, 3, 4), Objective::Energy).unwrap(), vec![5]);
}

#[test]
fn decisions_follow_the_layers_under_permutation() {
    use rand::seq::SliceRandom;
    let mut r = rng(77);
    for accs in [diana(), three_way()] {
        for obj in [Objective::Latency, Objective::Energy] {
            let layers: Vec<LayerSpec> = (0..12).map(|_| random_layer(&mut r)).collect();
            let solve = |ls: &[LayerSpec]| -> Vec<Vec<usize>> { ls.iter().map(|l| min_cost_split(&accs, l, obj).unwrap()).collect() };
            let base = solve(&layers);
            let mut order: Vec<usize> = (0..layers.len()).collect();
            order.shuffle(&mut r);
            let permuted: Vec<LayerSpec> = order.iter().map(|&i| layers[i]).collect();
            let want: Vec<Vec<usize>> = order.iter().map(|&i| base[i].clone()).collect();
            assert_eq!(solve(&permuted), want);
        }
    }
    for net in ["toy_resnet", "toy_plain", "toy_mobile"] {
        let g = Graph::named(net).unwrap();
        let d = diana();
        let m = min_cost(&g, &d, Objective::Latency).unwrap();
        for (la, i) in m.layers.iter().zip(g.layers()) {
            let counts = min_cost_split(&d, &g.layer_spec(i), Objective::Latency).unwrap();
            assert_eq!(la.assignments, assignment_from_counts(&counts), "{net}/{}", la.name);
        }
    }
}
