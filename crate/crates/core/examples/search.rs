//! Mapping search on DIANA for a few cost strengths.

use odimo::cost::{diana, Objective};
use odimo::data::{gen_synthetic, SyntheticSpec};
use odimo::graph::Graph;
use odimo::model::Model;
use odimo::search::{discretize, search, SearchConfig, SearchState};
use odimo::sim::cost_report;
use odimo::tensor::OptimizerConfig;
use odimo::train::{pretrain, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> odimo::Result<()> {
    let data = gen_synthetic(&SyntheticSpec::new(10, 2000, 2))?;
    let graph = Graph::named("toy_resnet")?;
    let model = Model::init(graph.clone(), &mut ChaCha8Rng::seed_from_u64(2));
    let opt = OptimizerConfig::Sgd { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 };
    let train = TrainConfig { epochs: 4, batch_size: 32, optimizer: opt, patience: 20 };
    pretrain(&model, &data, &train, &mut ChaCha8Rng::seed_from_u64(2))?;
    let ck = model.fold_bn()?.checkpoint();
    let cfg = SearchConfig { epochs: 4, ..SearchConfig::default() };
    for lambda in [0.0, 1e-5, 1e-3] {
        let m = Model::from_checkpoint(graph.clone(), &ck)?;
        let mut state = SearchState::new(m, diana(), lambda, Objective::Latency, &cfg)?;
        let log = search(&mut state, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(3))?;
        let best = log.best_epoch.map(|e| &log.epochs[e]).expect("at least one epoch");
        let r = cost_report(&graph, &state.accelerators, &discretize(&state))?;
        println!(
            "lambda {lambda:e}: relaxed val {:.1}%, {:.0} cycles, {:.1}% analog channels",
            best.val_accuracy, r.latency_cycles, r.analog_channel_pct
        );
    }
    Ok(())
}
