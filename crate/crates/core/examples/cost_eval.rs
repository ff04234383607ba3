//! Exact and smooth layer costs for a few channel splits.

use odimo::cost::{diana, LayerSpec};

fn main() -> odimo::Result<()> {
    let accs = diana();
    let layer = LayerSpec::conv(64, 64, 3, 16);
    println!("analog,digital,aimc_cycles,digital_cycles,latency,smooth_latency,energy");
    for analog in [0, 16, 32, 48, 56, 60, 64] {
        let split = [analog, 64 - analog];
        let b = accs.layer_cost(&layer, &split)?;
        let f = [analog as f64, (64 - analog) as f64];
        let smooth = accs.layer_latency(&layer, &f, Some(2000.0))?;
        println!(
            "{},{},{},{},{},{smooth:.1},{}",
            split[0], split[1], b.per_accelerator[0], b.per_accelerator[1], b.latency, b.energy
        );
    }
    Ok(())
}
