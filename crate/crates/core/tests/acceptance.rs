//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{equivalence, golden, gradcheck, oracle, rng};
use odimo::baselines::{all_single, io8_backbone_ternary};
use odimo::config::RunConfig;
use odimo::cost::{diana, ops_proportional, AcceleratorSet, LayerKind, LayerSpec, Objective};
use odimo::graph::Graph;
use odimo::model::{forward, FloatExec, Model};
use odimo::pipeline::{baseline_stage, load_report, pretrained, sweep, BaselineKind, Context};
use odimo::quant::{QuantMode, QuantSpec};
use odimo::reorder::ReorderOptions;
use odimo::sim::cost_report;
use odimo::tensor::{Float, Tensor};
use rand::Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn gradients() -> Outcome {
    gradcheck::elementwise_ops();
    gradcheck::row_and_column_ops();
    gradcheck::convolution_and_linear();
    gradcheck::pooling_and_reshaping();
    gradcheck::losses_and_normalization();
    gradcheck::total_loss_alpha_gradient();
    Ok("every op and d(loss)/d(alpha), 20 instances each".into())
}

fn golden_table() -> Outcome {
    golden::check_table();
    golden::check_cost_eval(1);
    Ok(format!("{} configs, library and cost-eval", golden::golden().len()))
}

fn energy_collapse() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let layer = if r.random_bool(0.3) {
            LayerSpec::fc(r.random_range(1..2000), r.random_range(1..600))
        } else {
            let f = [1, 3, 5][r.random_range(0..3)];
            LayerSpec { c_in: r.random_range(1..300), c_out: r.random_range(1..600), fx: f, fy: f, ox: r.random_range(1..33), oy: r.random_range(1..33), kind: LayerKind::Conv }
        };
        let p = r.random_range(0.1..20.0);
        for base in [diana(), ops_proportional(false)] {
            for n in [2usize, 3] {
                let mut set = base.clone();
                if n == 3 {
                    let mut extra = set.accelerators[1].clone();
                    extra.name = "third".into();
                    set.accelerators.push(extra);
                }
                for a in &mut set.accelerators {
                    a.p_act = p;
                    a.p_idle = p;
                    a.supported_kinds = [LayerKind::Conv, LayerKind::Depthwise, LayerKind::Fc].into_iter().collect();
                }
                let mut counts = vec![0; n];
                for _ in 0..layer.c_out {
                    counts[r.random_range(0..n)] += 1;
                }
                let b = set.layer_cost(&layer, &counts).map_err(|e| e.to_string())?;
                let want = n as f64 * p * b.latency;
                let rel = (b.energy - want).abs() / want.max(1e-300);
                worst = worst.max(rel);
                ensure(rel <= 1e-9, format!("{layer:?} {counts:?}: energy {} vs {want}", b.energy))?;
            }
        }
    }
    Ok(format!("100 layers, worst relative gap {worst:.1e}"))
}

fn min_cost_oracle() -> Outcome {
    oracle::check_against_enumeration(50, 42);
    Ok("50 layers, 2 and 3 accelerators, both objectives".into())
}

fn reorder_equivalence() -> Outcome {
    for seed in 0..20 {
        equivalence::check_equivalent("toy_resnet", seed, ReorderOptions::default(), 100);
    }
    Ok("20 decisions x 100 inputs on the residual network".into())
}

fn quantizer_contract() -> Outcome {
    let mut r = rng(6);
    for _ in 0..50 {
        let s = r.random_range(-3.0..1.0) as Float;
        let x: Vec<Float> = (0..64).map(|_| r.random_range(-4.0..4.0) as Float).collect();
        let xt = Tensor::new(&[64], x).unwrap();
        let t = QuantSpec::new(2, QuantMode::Weights, s).unwrap();
        let e = s.exp();
        let y = t.apply(&xt).unwrap();
        ensure(y.to_vec().iter().all(|&v| v == 0.0 || v == e || v == -e), "ternary output off {-e^s, 0, e^s}")?;
        ensure(t.apply(&y).unwrap().to_vec() == y.to_vec(), "ternary quantizer is not idempotent")?;
        let q = QuantSpec::new(8, QuantMode::Weights, s).unwrap();
        let y = q.apply(&xt).unwrap();
        let step = e as f64 / 127.0;
        for &v in y.to_vec().iter() {
            let k = v as f64 / step;
            ensure((k - k.round()).abs() < 1e-3 && k.round().abs() <= 127.0, format!("{v} is off the 8-bit grid"))?;
        }
        ensure(q.apply(&y).unwrap().to_vec() == y.to_vec(), "8-bit quantizer is not idempotent")?;
    }
    let mut worst: f64 = 0.0;
    for net in ["toy_resnet", "toy_plain", "toy_mobile"] {
        let m = Model::init(Graph::named(net).unwrap(), &mut r);
        for p in m.layers.values() {
            if let Some(bn) = &p.bn {
                let c = p.bias.numel();
                let mut draw = |lo: f64, hi: f64| -> Vec<Float> { (0..c).map(|_| r.random_range(lo..hi) as Float).collect() };
                bn.gamma.set_data(draw(0.5, 2.0)).unwrap();
                bn.beta.set_data(draw(-0.5, 0.5)).unwrap();
                *bn.running_mean.borrow_mut() = draw(-0.3, 0.3);
                *bn.running_var.borrow_mut() = draw(0.2, 3.0);
            }
        }
        let folded = m.fold_bn().map_err(|e| e.to_string())?;
        let mut shape = vec![8];
        shape.extend_from_slice(m.graph.input_shape());
        let x = Tensor::randn(&shape, 1.0, &mut r);
        let a = forward(&m.graph, &FloatExec { model: &m, train: false }, &x).unwrap().to_vec();
        let b = forward(&folded.graph, &FloatExec { model: &folded, train: false }, &x).unwrap().to_vec();
        let dev = a.iter().zip(&b).map(|(p, q)| (*p as f64 - *q as f64).abs()).fold(0.0, f64::max);
        worst = worst.max(dev);
        ensure(dev < 1e-4, format!("{net}: folding moved outputs by {dev}"))?;
    }
    Ok(format!("grids and idempotence exact, fold deviation {worst:.1e}"))
}

fn lambda_tradeoff(out: &Path) -> Outcome {
    let mut cfg = RunConfig::load(&configs().join("run.toml")).map_err(|e| e.to_string())?;
    cfg.out = out.to_path_buf();
    let ctx = Context::new(cfg).map_err(|e| e.to_string())?;
    let params: usize = ctx.graph.layers().iter().map(|&i| ctx.graph.weight_shape(i).iter().product::<usize>() + ctx.graph.nodes[i].channels()).sum();
    ensure(params <= 50_000, format!("{params} parameters"))?;
    ensure(ctx.accs == diana(), "accelerators are not the DIANA pair")?;
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let points = sweep(&ctx, jobs).map_err(|e| e.to_string())?;
    ensure(points.len() == 5 && points.iter().all(|p| p.ok()), format!("sweep failed: {points:?}"))?;
    let pre = pretrained(&ctx, ctx.cfg.seeds[0]).map_err(|e| e.to_string())?;
    let all8 = baseline_stage(&ctx, &pre, BaselineKind::All8, ctx.cfg.seeds[0]).map_err(|e| e.to_string())?;
    let mincost = baseline_stage(&ctx, &pre, BaselineKind::MinCost, ctx.cfg.seeds[0]).map_err(|e| e.to_string())?;
    let obj = ctx.cfg.objective;
    let zero = &points[0];
    ensure(zero.lambda == 0.0, "first sweep point is not lambda = 0")?;
    ensure(
        all8.accuracy_pct - zero.accuracy <= 1.0,
        format!("lambda = 0 reaches {:.2}%, All-8bit {:.2}%", zero.accuracy, all8.accuracy_pct),
    )?;
    let costs: Vec<f64> = points.iter().map(|p| p.cost(obj)).collect();
    let inversions = costs.windows(2).filter(|w| w[1] > w[0]).count();
    ensure(inversions <= 1, format!("costs {costs:?} have {inversions} inversions"))?;
    let last = points.last().unwrap();
    let min_cost = match obj {
        Objective::Latency => mincost.latency_cycles,
        Objective::Energy => mincost.energy_units,
    };
    ensure(last.cost(obj) <= 1.5 * min_cost, format!("largest lambda costs {} against Min-Cost {min_cost}", last.cost(obj)))?;
    ensure(last.analog_ch_pct > 50.0, format!("largest lambda has {:.1}% analog channels", last.analog_ch_pct))?;
    Ok(format!(
        "acc {:.1}% vs All-8bit {:.1}%, costs {:?}, last {:.0} vs Min-Cost {:.0}, analog {:.1}%",
        zero.accuracy, all8.accuracy_pct, costs, last.cost(obj), min_cost, last.analog_ch_pct
    ))
}

fn baseline_sanity(c7: &Path) -> Outcome {
    let accs: AcceleratorSet = diana();
    let analog = accs.iter().position(|a| a.analog).unwrap();
    let digital = accs.precise_index();
    let mut reports = Vec::new();
    for net in ["toy_resnet", "toy_plain", "toy_mobile"] {
        let g = Graph::named(net).unwrap();
        reports.push(cost_report(&g, &accs, &all_single(&g, &accs, digital)).map_err(|e| e.to_string())?);
        let io8 = io8_backbone_ternary(&g, &accs).map_err(|e| e.to_string())?;
        let last = io8.layers.len() - 1;
        for (k, la) in io8.layers.iter().enumerate() {
            let spec = g.layer_spec(g.find(&la.name).unwrap());
            let want = if k == 0 || k == last || !accs.get(analog).supports(spec.kind) { digital } else { analog };
            ensure(la.assignments.iter().all(|&a| a == want), format!("{net}/{}: {:?}", la.name, la.assignments))?;
        }
    }
    // The trained All-8bit run from the trade-off criterion, when present.
    if let Ok(r) = load_report(&c7.join("baseline_all8_seed_0")) {
        reports.push(r);
    }
    for r in &reports {
        ensure(r.analog_channel_pct == 0.0, format!("All-8bit has {}% analog channels", r.analog_channel_pct))?;
        ensure(r.accelerators[analog].utilization_pct == 0.0, "All-8bit uses the analog accelerator")?;
    }
    Ok(format!("{} All-8bit reports at 0% analog, IO-8bit layers on digital", reports.len()))
}

fn run_quick(out: &Path) -> std::result::Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_odimo"))
        .arg("--config")
        .arg(configs().join("quick.toml"))
        .arg("--out")
        .arg(out)
        .args(["--jobs", "2", "sweep"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), String::from_utf8_lossy(&status.stderr).to_string())
}

fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "metadata.json") {
                let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
                if ext == "json" || ext == "csv" {
                    out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let (a, b) = (scratch("det_a"), scratch("det_b"));
    run_quick(&a)?;
    run_quick(&b)?;
    let (fa, fb) = (artifacts(&a), artifacts(&b));
    ensure(fa.len() == fb.len(), "different artifact sets")?;
    ensure(fa.iter().any(|(p, _)| p.ends_with("mapping.json")), "no mapping written")?;
    ensure(fa.iter().any(|(p, _)| p.ends_with("pareto.csv")), "no pareto.csv written")?;
    for ((pa, da), (pb, db)) in fa.iter().zip(&fb) {
        ensure(pa == pb && da == db, format!("{} differs between reruns", pa.display()))?;
    }
    Ok(format!("{} JSON/CSV artifacts byte-identical", fa.len()))
}

fn main() {
    let c7 = scratch("tradeoff");
    let c7_ref = c7.clone();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 gradient fidelity", Box::new(gradients)),
        ("2 cost-model golden table", Box::new(golden_table)),
        ("3 energy/latency collapse", Box::new(energy_collapse)),
        ("4 min-cost optimality", Box::new(min_cost_oracle)),
        ("5 reorder equivalence", Box::new(reorder_equivalence)),
        ("6 quantizer contract", Box::new(quantizer_contract)),
        ("7 lambda trade-off", Box::new(move || lambda_tradeoff(&c7))),
        ("8 baseline sanity", Box::new(move || baseline_sanity(&c7_ref))),
        ("9 determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let t = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
