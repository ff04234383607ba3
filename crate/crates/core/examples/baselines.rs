//! Cost of the reference mappings on each toy network.

use odimo::baselines::{all_single, io8_backbone_ternary, min_cost};
use odimo::cost::{diana, Objective};
use odimo::graph::Graph;
use odimo::sim::cost_report;

fn main() -> odimo::Result<()> {
    let accs = diana();
    println!("network,mapping,latency_cycles,energy_units,analog_ch_pct");
    for net in ["toy_resnet", "toy_plain", "toy_mobile"] {
        let g = Graph::named(net)?;
        let mappings = [
            ("all8", all_single(&g, &accs, accs.precise_index())),
            ("allternary", all_single(&g, &accs, accs.low_precision_index())),
            ("io8", io8_backbone_ternary(&g, &accs)?),
            ("mincost_latency", min_cost(&g, &accs, Objective::Latency)?),
            ("mincost_energy", min_cost(&g, &accs, Objective::Energy)?),
        ];
        for (name, d) in mappings {
            let r = cost_report(&g, &accs, &d)?;
            println!("{net},{name},{},{},{:.1}", r.latency_cycles, r.energy_units, r.analog_channel_pct);
        }
    }
    Ok(())
}
