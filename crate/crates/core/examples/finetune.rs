//! Quantization-aware fine-tuning of a fixed half-analog mapping.

use odimo::cost::diana;
use odimo::data::{gen_synthetic, SyntheticSpec};
use odimo::finetune::{deployed_accuracy, finetune, FinetuneConfig};
use odimo::graph::Graph;
use odimo::mapping::MappingDecision;
use odimo::model::Model;
use odimo::qparams::{calibrate_ranges, QuantParams};
use odimo::tensor::OptimizerConfig;
use odimo::train::{pretrain, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> odimo::Result<()> {
    let accs = diana();
    let data = gen_synthetic(&SyntheticSpec::new(10, 2000, 5))?;
    let raw = Model::init(Graph::named("toy_resnet")?, &mut ChaCha8Rng::seed_from_u64(5));
    let opt = OptimizerConfig::Sgd { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 };
    pretrain(&raw, &data, &TrainConfig { epochs: 4, batch_size: 32, optimizer: opt, patience: 20 }, &mut ChaCha8Rng::seed_from_u64(5))?;
    let model = raw.fold_bn()?;
    let quant = QuantParams::init(&model, &accs)?;
    calibrate_ranges(&model, &quant, &data, 64)?;

    // Lower half of every Conv/FC layer on the analog side where supported.
    let mut decision = MappingDecision::uniform(&model.graph, 1);
    for (la, i) in decision.layers.iter_mut().zip(model.graph.layers()) {
        if accs.get(0).supports(model.graph.layer_spec(i).kind) {
            let half = la.assignments.len() / 2;
            la.assignments[..half].fill(0);
        }
    }
    println!("before: {:.1}%", deployed_accuracy(&model, &quant, &accs, &decision, &data)?);
    let cfg = FinetuneConfig { epochs: 3, ..FinetuneConfig::default() };
    for e in finetune(&model, &quant, &accs, &decision, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(6))? {
        println!("epoch {}: loss {:.4} val {:.1}%", e.epoch, e.train_loss, e.val_accuracy);
    }
    println!("kept: {:.1}%", deployed_accuracy(&model, &quant, &accs, &decision, &data)?);
    Ok(())
}
