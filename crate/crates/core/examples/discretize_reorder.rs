//! Freezes a mixed mapping, reorders channels so each accelerator owns a
//! contiguous block, and checks the rewritten network is unchanged.

use odimo::cost::diana;
use odimo::data::{gen_synthetic, SyntheticSpec};
use odimo::deploy::{Deployment, Precision};
use odimo::graph::Graph;
use odimo::mapping::MappingDecision;
use odimo::model::Model;
use odimo::qparams::{calibrate_ranges, QuantParams};
use odimo::reorder::{reorder_and_split, ReorderOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> odimo::Result<()> {
    let accs = diana();
    let data = gen_synthetic(&SyntheticSpec::new(10, 400, 4))?;
    let model = Model::init(Graph::named("toy_resnet")?, &mut ChaCha8Rng::seed_from_u64(4)).fold_bn()?;
    let quant = QuantParams::init(&model, &accs)?;
    calibrate_ranges(&model, &quant, &data, 64)?;

    // Alternate accelerators channel by channel: the worst case for splitting.
    let mut decision = MappingDecision::uniform(&model.graph, 1);
    for la in &mut decision.layers {
        for (c, a) in la.assignments.iter_mut().enumerate() {
            *a = c % 2;
        }
    }
    decision.validate(&model.graph, &accs)?;

    let dep = Deployment::freeze(&model, &quant, &accs, &decision)?;
    let (re, manifest) = reorder_and_split(&dep, ReorderOptions::default())?;
    for l in &manifest.layers {
        let runs: Vec<String> = l.sublayers.iter().map(|s| format!("{}[{}..{})", s.accelerator, s.start, s.end)).collect();
        println!("{:>6}: {}", l.name, runs.join(" "));
    }

    let idx: Vec<usize> = (0..32).collect();
    let x = data.batch(&idx).0.to_vec();
    let same = dep.run(&x, 32, Precision::Quantized)? == re.run(&x, 32, Precision::Quantized)?;
    println!("quantized logits identical after reordering: {same}");
    Ok(())
}
