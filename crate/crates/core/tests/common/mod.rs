#![allow(dead_code)]

pub mod equivalence;
pub mod golden;
pub mod gradcheck;
pub mod oracle;

use odimo::cost::{diana, AcceleratorSet};
use odimo::data::{gen_synthetic, Dataset, SyntheticSpec};
use odimo::graph::Graph;
use odimo::mapping::{LayerAssignment, MappingDecision};
use odimo::model::Model;
use odimo::qparams::{calibrate_ranges, QuantParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_data(seed: u64) -> Dataset {
    gen_synthetic(&SyntheticSpec::new(10, 200, seed)).unwrap()
}

/// Folded random model with calibrated activation ranges.
pub fn fixture(net: &str, accs: &AcceleratorSet, seed: u64) -> (Model, QuantParams, Dataset) {
    let graph = Graph::named(net).unwrap();
    let model = Model::init(graph, &mut rng(seed)).fold_bn().unwrap();
    let q = QuantParams::init(&model, accs).unwrap();
    let data = small_data(seed);
    calibrate_ranges(&model, &q, &data, 64).unwrap();
    (model, q, data)
}

/// Uniformly random assignment among the accelerators supporting each layer.
pub fn random_decision<R: Rng>(graph: &Graph, accs: &AcceleratorSet, rng: &mut R) -> MappingDecision {
    let layers = graph
        .layers()
        .into_iter()
        .map(|i| {
            let kind = graph.layer_spec(i).kind;
            let ok: Vec<usize> = (0..accs.len()).filter(|&a| accs.get(a).supports(kind)).collect();
            let c = graph.nodes[i].channels();
            LayerAssignment {
                name: graph.nodes[i].name.clone(),
                assignments: (0..c).map(|_| ok[rng.random_range(0..ok.len())]).collect(),
            }
        })
        .collect();
    MappingDecision { layers }
}

pub fn diana_set() -> AcceleratorSet {
    diana()
}
