mod common;

use common::equivalence::*;
use common::*;
use odimo::deploy::{Deployment, Precision};
use odimo::error::Error;
use odimo::graph::Graph;
use odimo::reorder::{apply_reorder, plan_reorder, reorder_and_split, ChannelPermutation, ReorderOptions, ReorderPlan};
use proptest::prelude::*;

#[test]
fn residual_network_is_unchanged_by_reordering() {
    for seed in 0..4 {
        check_equivalent("toy_resnet", seed, ReorderOptions::default(), 16);
    }
}

#[test]
fn flatten_and_depthwise_networks_are_unchanged() {
    for seed in 0..3 {
        check_equivalent("toy_plain", seed, ReorderOptions::default(), 16);
        check_equivalent("toy_mobile", seed, ReorderOptions::default(), 16);
    }
}

#[test]
fn gather_fallback_is_flagged_and_exact() {
    check_equivalent("toy_plain", 7, ReorderOptions { expand_flatten: false, allow_gather: true }, 16);
}

#[test]
fn flatten_without_expansion_or_gather_is_an_error() {
    let accs = diana_set();
    let (model, q, _) = fixture("toy_plain", &accs, 3);
    // Interleave conv2 so a non-identity permutation is required.
    let mut decision = odimo::mapping::MappingDecision::uniform(&model.graph, 1);
    let conv2 = decision.layers.iter_mut().find(|l| l.name == "conv2").unwrap();
    conv2.assignments.iter_mut().step_by(2).for_each(|a| *a = 0);
    let dep = Deployment::freeze(&model, &q, &accs, &decision).unwrap();
    let opts = ReorderOptions { expand_flatten: false, allow_gather: false };
    assert!(matches!(reorder_and_split(&dep, opts), Err(Error::Reorder(_))));
}

#[test]
fn reordered_layers_are_contiguous() {
    let accs = diana_set();
    let (model, q, _) = fixture("toy_plain", &accs, 11);
    let decision = random_decision(&model.graph, &accs, &mut rng(12));
    let dep = Deployment::freeze(&model, &q, &accs, &decision).unwrap();
    let (_, manifest) = reorder_and_split(&dep, ReorderOptions::default()).unwrap();
    // A plain chain has one primary producer per space, except the output layer.
    for l in &manifest.layers {
        if l.name != "fc" {
            assert!(!l.fragmented, "{} is fragmented", l.name);
        }
        assert!(!l.input_gather);
    }
}

#[test]
fn inconsistent_space_permutation_is_rejected() {
    let accs = diana_set();
    let (model, q, _) = fixture("toy_resnet", &accs, 5);
    let dep = Deployment::freeze(&model, &q, &accs, &random_decision(&model.graph, &accs, &mut rng(5))).unwrap();
    let g: &Graph = &dep.graph;
    let mut plan = plan_reorder(&dep);
    let conv4 = g.find("conv4").unwrap();
    let c = plan.perms[&conv4].len();
    plan.perms.insert(conv4, ChannelPermutation::new((0..c).rev().collect()).unwrap());
    plan.perms.insert(g.find("conv2").unwrap(), ChannelPermutation::identity(c));
    assert!(matches!(apply_reorder(&dep, &plan, ReorderOptions::default()), Err(Error::Reorder(_))));
    // The output layer keeps its order.
    let mut plan = ReorderPlan::default();
    let fc = g.find("fc").unwrap();
    plan.perms.insert(fc, ChannelPermutation::new((0..10).rev().collect()).unwrap());
    assert!(matches!(apply_reorder(&dep, &plan, ReorderOptions::default()), Err(Error::Reorder(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Arbitrary permutations of a hidden layer's channels, not only groupings.
    #[test]
    fn arbitrary_permutation_preserves_outputs(perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(), seed in 0u64..1000) {
        let accs = diana_set();
        let (model, q, data) = fixture("toy_plain", &accs, seed);
        let dep = Deployment::freeze(&model, &q, &accs, &random_decision(&model.graph, &accs, &mut rng(seed))).unwrap();
        let mut plan = ReorderPlan::default();
        plan.perms.insert(dep.graph.find("conv1").unwrap(), ChannelPermutation::new(perm).unwrap());
        let re = apply_reorder(&dep, &plan, ReorderOptions::default()).unwrap();
        let x = inputs(&data, 4);
        let d = max_abs_diff(&dep.run(&x, 4, Precision::Float).unwrap(), &re.run(&x, 4, Precision::Float).unwrap());
        prop_assert!(d <= 1e-6);
        prop_assert_eq!(dep.run(&x, 4, Precision::Quantized).unwrap(), re.run(&x, 4, Precision::Quantized).unwrap());
    }
}
