//! Reordered and split deployments against the original.

use odimo::deploy::{Deployment, Precision};
use odimo::reorder::{reorder_and_split, ReorderOptions};

use super::{diana_set, fixture, random_decision, rng};

pub fn inputs(data: &odimo::data::Dataset, n: usize) -> Vec<odimo::tensor::Float> {
    let idx: Vec<usize> = (0..n).collect();
    data.batch(&idx).0.to_vec()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One random decision on `net`, compared on `n` inputs.
pub fn check_equivalent(net: &str, seed: u64, opts: ReorderOptions, n: usize) {
    let accs = diana_set();
    let (model, q, data) = fixture(net, &accs, seed);
    let decision = random_decision(&model.graph, &accs, &mut rng(seed + 1));
    let dep = Deployment::freeze(&model, &q, &accs, &decision).unwrap();
    let (re, manifest) = reorder_and_split(&dep, opts).unwrap();
    let x = inputs(&data, n);
    let a = dep.run(&x, n, Precision::Float).unwrap();
    let b = re.run(&x, n, Precision::Float).unwrap();
    assert!(max_abs_diff(&a, &b) <= 1e-6, "{net}: float logits moved by {}", max_abs_diff(&a, &b));
    let qa = dep.run(&x, n, Precision::Quantized).unwrap();
    let qb = re.run(&x, n, Precision::Quantized).unwrap();
    assert_eq!(qa, qb, "{net}: quantized logits differ");
    assert_eq!(manifest.gather_fallback, opts.allow_gather && !opts.expand_flatten && net == "toy_plain");
    // Channel counts per accelerator are preserved.
    for (l0, l1) in dep.decision().layers.iter().zip(&re.decision().layers) {
        let mut a = l0.assignments.clone();
        let mut b = l1.assignments.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}
