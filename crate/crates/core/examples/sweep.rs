//! A small lambda sweep through the full pipeline, from a config file.

use std::path::Path;

use odimo::config::RunConfig;
use odimo::pipeline::{sweep, Context};

fn main() -> odimo::Result<()> {
    let mut cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/quick.toml"))?;
    cfg.out = std::env::temp_dir().join("odimo_example_sweep");
    cfg.lambdas = vec![0.0, 1e-5, 1e-3];
    let ctx = Context::new(cfg)?;
    for p in sweep(&ctx, 2)? {
        println!(
            "lambda {:e}: {} accuracy {:.1}% latency {} analog {:.1}%",
            p.lambda, p.status, p.accuracy, p.latency_cycles, p.analog_ch_pct
        );
    }
    println!("pareto.csv in {}", ctx.out().display());
    Ok(())
}
