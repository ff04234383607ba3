//! Float pretraining of the residual toy network, then BN folding.

use odimo::data::{gen_synthetic, Split, SyntheticSpec};
use odimo::graph::Graph;
use odimo::model::{FloatExec, Model};
use odimo::tensor::OptimizerConfig;
use odimo::train::{evaluate, pretrain, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> odimo::Result<()> {
    let data = gen_synthetic(&SyntheticSpec::new(10, 2000, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::init(Graph::named("toy_resnet")?, &mut rng);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        optimizer: OptimizerConfig::Sgd { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 },
        patience: 20,
    };
    for e in pretrain(&model, &data, &cfg, &mut rng)? {
        println!("epoch {}: loss {:.4} val {:.1}%", e.epoch, e.train_loss, e.val_accuracy);
    }
    let folded = model.fold_bn()?;
    let acc = evaluate(&folded.graph, &FloatExec { model: &folded, train: false }, &data, Split::Val, 256)?;
    println!("after folding: val {acc:.1}%");
    Ok(())
}
