use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use odimo::config::RunConfig;
use odimo::cost::{AcceleratorSet, LayerKind, LayerSpec, Objective};
use odimo::data::gen_synthetic;
use odimo::pipeline::{self, BaselineKind, Context};
use odimo::Result;

#[derive(Parser)]
#[command(name = "odimo", version, about = "Channel-wise mapping of CNNs onto heterogeneous accelerators")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cost to regularize: latency or energy.
    #[arg(long, global = true, value_parser = parse_objective)]
    objective: Option<Objective>,
    /// Comma-separated regularization strengths.
    #[arg(long, global = true, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel (lambda, seed) runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the configured synthetic dataset to --out.
    GenData,
    /// Float pretraining and BN folding for each seed.
    Pretrain,
    /// Mapping search for each (lambda, seed).
    Search,
    /// Argmax mapping and reorder manifest of each searched run.
    Discretize,
    /// Quantization-aware fine-tuning of each discretized run.
    Finetune,
    /// Reorder, split and simulate each run; writes report.json and breakdown.csv.
    Simulate,
    /// Fine-tune and simulate a reference mapping for each seed.
    Baseline {
        #[arg(value_enum)]
        kind: Baseline,
    },
    /// Every stage for every (lambda, seed); writes pareto.csv.
    Sweep,
    /// Exact cycles of one layer on every accelerator.
    CostEval(CostEval),
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    All8,
    Allternary,
    Io8,
    Mincost,
}

#[derive(Args)]
struct CostEval {
    #[arg(long, default_value = "conv")]
    kind: String,
    #[arg(long)]
    c_in: usize,
    #[arg(long)]
    c_out: usize,
    #[arg(long, default_value_t = 1)]
    fx: usize,
    #[arg(long, default_value_t = 1)]
    fy: usize,
    #[arg(long, default_value_t = 1)]
    ox: usize,
    #[arg(long, default_value_t = 1)]
    oy: usize,
    /// Channels given to each accelerator (defaults to all of them).
    #[arg(long)]
    channels: Option<usize>,
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    s.parse().map_err(|e: odimo::Error| e.to_string())
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = c.objective {
        cfg.objective = o;
    }
    if let Some(l) = &c.lambda {
        cfg.lambdas = l.clone();
    }
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.out = std::env::current_dir()?.join(o);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn runs(cfg: &RunConfig) -> Vec<(f64, u64, PathBuf)> {
    let out = cfg.out_dir();
    cfg.seeds
        .iter()
        .flat_map(|&s| cfg.lambdas.iter().map(move |&l| (l, s)))
        .map(|(l, s)| (l, s, out.join(pipeline::run_name(l, s))))
        .collect()
}

fn print_report(name: &str, r: &odimo::sim::InferenceReport) {
    println!(
        "{name}: accuracy {:.2}% latency {} cycles energy {} analog channels {:.1}%",
        r.accuracy_pct, r.latency_cycles, r.energy_units, r.analog_channel_pct
    );
}

fn cost_eval(e: &CostEval, accs: &AcceleratorSet) -> Result<()> {
    let kind = match e.kind.as_str() {
        "conv" => LayerKind::Conv,
        "depthwise" => LayerKind::Depthwise,
        "fc" => LayerKind::Fc,
        k => return Err(odimo::Error::Config(format!("unknown layer kind {k:?}"))),
    };
    let layer = LayerSpec { c_in: e.c_in, c_out: e.c_out, fx: e.fx, fy: e.fy, ox: e.ox, oy: e.oy, kind };
    layer.validate()?;
    let c = e.channels.unwrap_or(e.c_out);
    println!("accelerator,channels,cycles");
    for a in accs.iter() {
        println!("{},{c},{}", a.name, a.latency(&layer, c)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let jobs = cli.common.jobs;
    if let Cmd::CostEval(e) = &cli.cmd {
        return cost_eval(e, &cfg.accelerator_set()?);
    }
    if let Cmd::GenData = cli.cmd {
        let mut spec = cfg
            .dataset
            .synthetic
            .clone()
            .ok_or_else(|| odimo::Error::Config("gen-data needs a `dataset.synthetic` section".into()))?;
        if let Some(s) = cli.common.seed {
            spec.seed = s;
        }
        let out = cfg.out_dir();
        gen_synthetic(&spec)?.save(&out)?;
        println!("wrote {} samples to {}", spec.samples, out.display());
        return Ok(());
    }
    let ctx = Context::new(cfg)?;
    let cmd_name = match &cli.cmd {
        Cmd::Pretrain => "pretrain",
        Cmd::Search => "search",
        Cmd::Discretize => "discretize",
        Cmd::Finetune => "finetune",
        Cmd::Simulate => "simulate",
        Cmd::Baseline { .. } => "baseline",
        Cmd::Sweep => "sweep",
        Cmd::GenData | Cmd::CostEval(_) => unreachable!(),
    };
    match cli.cmd {
        Cmd::Pretrain => {
            for &s in &ctx.cfg.seeds {
                pipeline::pretrain_stage(&ctx, s)?;
            }
        }
        Cmd::Search => {
            for (l, s, dir) in runs(&ctx.cfg) {
                let pre = pipeline::pretrained(&ctx, s)?;
                pipeline::search_stage(&ctx, &pre, l, s, &dir)?;
            }
        }
        Cmd::Discretize => {
            for (_, _, dir) in runs(&ctx.cfg) {
                let d = pipeline::discretize_stage(&ctx, &dir)?;
                println!("{}: analog channels {:.1}%", dir.display(), d.analog_channel_pct(&ctx.accs));
            }
        }
        Cmd::Finetune => {
            for (_, s, dir) in runs(&ctx.cfg) {
                pipeline::finetune_stage(&ctx, &dir, s, None)?;
            }
        }
        Cmd::Simulate => {
            for (_, _, dir) in runs(&ctx.cfg) {
                print_report(&dir.display().to_string(), &pipeline::simulate_stage(&ctx, &dir)?);
            }
        }
        Cmd::Baseline { kind } => {
            let kind = match kind {
                Baseline::All8 => BaselineKind::All8,
                Baseline::Allternary => BaselineKind::AllTernary,
                Baseline::Io8 => BaselineKind::Io8,
                Baseline::Mincost => BaselineKind::MinCost,
            };
            for &s in &ctx.cfg.seeds {
                let pre = pipeline::pretrained(&ctx, s)?;
                print_report(kind.name(), &pipeline::baseline_stage(&ctx, &pre, kind, s)?);
            }
        }
        Cmd::Sweep => {
            for p in pipeline::sweep(&ctx, jobs)? {
                println!(
                    "lambda {} seed {}: {} accuracy {:.2}% latency {} energy {}",
                    p.lambda, p.seed, p.status, p.accuracy, p.latency_cycles, p.energy_units
                );
            }
        }
        Cmd::GenData | Cmd::CostEval(_) => unreachable!(),
    }
    pipeline::write_metadata(&ctx.out(), cmd_name)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
