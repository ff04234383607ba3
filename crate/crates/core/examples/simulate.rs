//! Integer simulation of a mapped network and its per-layer breakdown.

use odimo::cost::diana;
use odimo::data::{gen_synthetic, Split, SyntheticSpec};
use odimo::deploy::Deployment;
use odimo::graph::Graph;
use odimo::mapping::MappingDecision;
use odimo::model::Model;
use odimo::qparams::{calibrate_ranges, QuantParams};
use odimo::reorder::{reorder_and_split, ReorderOptions};
use odimo::sim::{breakdown_csv, simulate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> odimo::Result<()> {
    let accs = diana();
    let data = gen_synthetic(&SyntheticSpec::new(10, 400, 8))?;
    let model = Model::init(Graph::named("toy_plain")?, &mut ChaCha8Rng::seed_from_u64(8)).fold_bn()?;
    let quant = QuantParams::init(&model, &accs)?;
    calibrate_ranges(&model, &quant, &data, 64)?;

    let mut decision = MappingDecision::uniform(&model.graph, 0);
    let last = decision.layers.len() - 1;
    decision.layers[last].assignments.fill(1);

    let dep = Deployment::freeze(&model, &quant, &accs, &decision)?;
    let (re, _) = reorder_and_split(&dep, ReorderOptions::default())?;
    let report = simulate(&re, &data, Split::Val)?;
    println!(
        "{} samples, accuracy {:.1}% (untrained), {:.0} cycles, {:.0} energy units",
        report.samples, report.accuracy_pct, report.latency_cycles, report.energy_units
    );
    for a in &report.accelerators {
        println!("{:>8}: {} channels, {:.1}% busy", a.name, a.channels, a.utilization_pct);
    }
    print!("{}", breakdown_csv(&report.layers, &accs));
    Ok(())
}
