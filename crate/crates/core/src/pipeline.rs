//! Workflows behind the command line: pretrain, search, discretize+reorder,
//! finetune, simulate, baselines and the lambda sweep.
//!
//! Output layout under the configured directory:
//!
//! ```text
//! pretrain/seed_<s>/{checkpoint/, log.json}
//! lambda_<l>_seed_<s>/search/{checkpoint/, log.json}
//! lambda_<l>_seed_<s>/{mapping.json, reorder.json}
//! lambda_<l>_seed_<s>/finetune/{checkpoint/, log.json}
//! lambda_<l>_seed_<s>/{report.json, breakdown.csv}
//! baseline_<kind>_seed_<s>/...
//! pareto.csv, pareto_front.csv, metadata.json
//! ```
//!
//! Everything except `metadata.json` is a pure function of config and seed.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::baselines::{all_single, io8_backbone_ternary, min_cost};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::cost::{AcceleratorSet, Objective};
use crate::data::{Dataset, Split};
use crate::deploy::Deployment;
use crate::error::{Error, Result};
use crate::finetune::finetune;
use crate::graph::Graph;
use crate::mapping::MappingDecision;
use crate::model::{FloatExec, Model};
use crate::qparams::{calibrate_ranges, QuantParams};
use crate::reorder::{reorder_and_split, Manifest};
use crate::search::{discretize, search, SearchState};
use crate::sim::{breakdown_csv, simulate, utilization_breakdown, InferenceReport};
use crate::train::{evaluate, pretrain};

/// Independent random streams derived from one seed.
pub fn stream(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stage);
    r
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Resolved inputs shared by every stage.
pub struct Context {
    pub cfg: RunConfig,
    pub graph: Graph,
    pub accs: AcceleratorSet,
    pub data: Dataset,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Context> {
        let graph = cfg.graph()?;
        let accs = cfg.accelerator_set()?;
        let data = cfg.dataset()?;
        if data.shape.as_slice() != graph.input_shape() {
            return Err(Error::Mismatch(format!(
                "dataset samples are {:?}, network `{}` expects {:?}",
                data.shape,
                graph.name,
                graph.input_shape()
            )));
        }
        if data.classes() > graph.classes() {
            return Err(Error::Mismatch(format!("dataset has {} classes, network outputs {}", data.classes(), graph.classes())));
        }
        Ok(Context { cfg, graph, accs, data })
    }

    pub fn out(&self) -> PathBuf {
        self.cfg.out_dir()
    }

    fn objective(&self) -> Objective {
        self.cfg.objective
    }
}

pub fn run_name(lambda: f64, seed: u64) -> String {
    format!("lambda_{lambda:e}_seed_{seed}")
}

pub fn pretrain_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("pretrain").join(format!("seed_{seed}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epochs: Vec<crate::train::EpochLog>,
    /// Validation accuracy of the BN-folded float model.
    pub folded_val_accuracy: f64,
}

/// Trains the float model and stores its BN-folded weights.
pub fn pretrain_stage(ctx: &Context, seed: u64) -> Result<Checkpoint> {
    let mut rng = stream(seed, 0);
    let model = Model::init(ctx.graph.clone(), &mut rng);
    let epochs = pretrain(&model, &ctx.data, &ctx.cfg.pretrain, &mut rng)?;
    let folded = model.fold_bn()?;
    let acc = evaluate(&folded.graph, &FloatExec { model: &folded, train: false }, &ctx.data, Split::Val, 256)?;
    log::info!("pretrain seed {seed}: folded val accuracy {acc:.2}%");
    let ck = folded.checkpoint();
    let dir = pretrain_dir(&ctx.out(), seed);
    ck.save(&dir.join("checkpoint"))?;
    write_json(&dir.join("log.json"), &PretrainLog { epochs, folded_val_accuracy: acc })?;
    Ok(ck)
}

/// Loads the stored pretrained weights, training them first if absent.
pub fn pretrained(ctx: &Context, seed: u64) -> Result<Checkpoint> {
    let dir = pretrain_dir(&ctx.out(), seed).join("checkpoint");
    if dir.join("index.json").is_file() {
        Checkpoint::load(&dir)
    } else {
        pretrain_stage(ctx, seed)
    }
}

pub fn search_stage(ctx: &Context, pre: &Checkpoint, lambda: f64, seed: u64, run: &Path) -> Result<SearchState> {
    let model = Model::from_checkpoint(ctx.graph.clone(), pre)?;
    let mut state = SearchState::new(model, ctx.accs.clone(), lambda, ctx.objective(), &ctx.cfg.search)?;
    let log = search(&mut state, &ctx.data, &ctx.cfg.search, &mut stream(seed, 1))?;
    state.checkpoint().save(&run.join("search").join("checkpoint"))?;
    write_json(&run.join("search").join("log.json"), &log)?;
    Ok(state)
}

fn load_search(ctx: &Context, run: &Path, lambda: f64) -> Result<SearchState> {
    let ck = Checkpoint::load(&run.join("search").join("checkpoint"))?;
    let model = Model::from_checkpoint(ctx.graph.clone(), &ck)?;
    let state = SearchState::new(model, ctx.accs.clone(), lambda, ctx.objective(), &ctx.cfg.search)?;
    state.restore(&ck)?;
    Ok(state)
}

fn write_reorder(ctx: &Context, dep: &Deployment, run: &Path) -> Result<(Deployment, Manifest)> {
    let (re, manifest) = reorder_and_split(dep, ctx.cfg.reorder)?;
    write_json(&run.join("reorder.json"), &manifest)?;
    Ok((re, manifest))
}

/// Argmax decision of a finished search plus its reorder manifest.
pub fn discretize_stage(ctx: &Context, run: &Path) -> Result<MappingDecision> {
    let state = load_search(ctx, run, 0.0)?;
    let decision = discretize(&state);
    decision.save(&run.join("mapping.json"))?;
    let dep = Deployment::freeze(&state.model, &state.quant, &ctx.accs, &decision)?;
    write_reorder(ctx, &dep, run)?;
    Ok(decision)
}

/// Fine-tunes the weights found in `run/search` (or `from`) under `run/mapping.json`.
pub fn finetune_stage(ctx: &Context, run: &Path, seed: u64, from: Option<&Checkpoint>) -> Result<(Model, QuantParams)> {
    let decision = MappingDecision::load(&run.join("mapping.json"))?;
    let (model, quant) = match from {
        Some(pre) => {
            let model = Model::from_checkpoint(ctx.graph.clone(), pre)?;
            let quant = QuantParams::init(&model, &ctx.accs)?;
            calibrate_ranges(&model, &quant, &ctx.data, ctx.cfg.search.batch_size.max(64))?;
            (model, quant)
        }
        None => {
            let s = load_search(ctx, run, 0.0)?;
            (s.model, s.quant)
        }
    };
    let log = finetune(&model, &quant, &ctx.accs, &decision, &ctx.data, &ctx.cfg.finetune, &mut stream(seed, 2))?;
    let mut ck = model.checkpoint();
    quant.to_checkpoint(&model, &ctx.accs, &mut ck);
    ck.save(&run.join("finetune").join("checkpoint"))?;
    write_json(&run.join("finetune").join("log.json"), &log)?;
    Ok((model, quant))
}

/// Freezes the fine-tuned network (or the searched one if no fine-tuning was
/// run), reorders and splits it, and simulates it on the validation split.
pub fn simulate_stage(ctx: &Context, run: &Path) -> Result<InferenceReport> {
    let decision = MappingDecision::load(&run.join("mapping.json"))?;
    let ft = run.join("finetune").join("checkpoint");
    let dir = if ft.join("index.json").is_file() { ft } else { run.join("search").join("checkpoint") };
    let ck = Checkpoint::load(&dir)?;
    let model = Model::from_checkpoint(ctx.graph.clone(), &ck)?;
    let quant = QuantParams::from_checkpoint(&model, &ctx.accs, &ck)?;
    let dep = Deployment::freeze(&model, &quant, &ctx.accs, &decision)?;
    let (re, _) = write_reorder(ctx, &dep, run)?;
    let report = simulate(&re, &ctx.data, Split::Val)?;
    write_json(&run.join("report.json"), &report)?;
    let rows = utilization_breakdown(&ctx.graph, &ctx.accs, &decision)?;
    std::fs::write(run.join("breakdown.csv"), breakdown_csv(&rows, &ctx.accs))?;
    Ok(report)
}

/// Search, discretize, fine-tune and simulate one point.
pub fn run_point(ctx: &Context, pre: &Checkpoint, lambda: f64, seed: u64) -> Result<InferenceReport> {
    let run = ctx.out().join(run_name(lambda, seed));
    search_stage(ctx, pre, lambda, seed, &run)?;
    discretize_stage(ctx, &run)?;
    finetune_stage(ctx, &run, seed, None)?;
    simulate_stage(ctx, &run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    All8,
    AllTernary,
    Io8,
    MinCost,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::All8, BaselineKind::AllTernary, BaselineKind::Io8, BaselineKind::MinCost];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::All8 => "all8",
            BaselineKind::AllTernary => "allternary",
            BaselineKind::Io8 => "io8",
            BaselineKind::MinCost => "mincost",
        }
    }

    pub fn decision(self, graph: &Graph, accs: &AcceleratorSet, objective: Objective) -> Result<MappingDecision> {
        match self {
            BaselineKind::All8 => Ok(all_single(graph, accs, accs.precise_index())),
            BaselineKind::AllTernary => Ok(all_single(graph, accs, accs.low_precision_index())),
            BaselineKind::Io8 => io8_backbone_ternary(graph, accs),
            BaselineKind::MinCost => min_cost(graph, accs, objective),
        }
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?} (all8, allternary, io8, mincost)")))
    }
}

/// Fine-tunes the pretrained network under a fixed baseline mapping.
pub fn baseline_stage(ctx: &Context, pre: &Checkpoint, kind: BaselineKind, seed: u64) -> Result<InferenceReport> {
    let run = ctx.out().join(format!("baseline_{}_seed_{seed}", kind.name()));
    kind.decision(&ctx.graph, &ctx.accs, ctx.objective())?.save(&run.join("mapping.json"))?;
    finetune_stage(ctx, &run, seed, Some(pre))?;
    simulate_stage(ctx, &run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub lambda: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub latency_cycles: f64,
    pub energy_units: f64,
    pub analog_ch_pct: f64,
    pub status: String,
}

impl ParetoPoint {
    fn failed(lambda: f64, seed: u64, e: &Error) -> ParetoPoint {
        let msg: String = e.to_string().chars().map(|c| if c == ',' || c == '\n' { ';' } else { c }).collect();
        ParetoPoint {
            lambda,
            seed,
            accuracy: f64::NAN,
            latency_cycles: f64::NAN,
            energy_units: f64::NAN,
            analog_ch_pct: f64::NAN,
            status: format!("failed: {msg}"),
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn cost(&self, objective: Objective) -> f64 {
        match objective {
            Objective::Latency => self.latency_cycles,
            Objective::Energy => self.energy_units,
        }
    }
}

pub const PARETO_HEADER: &str = "lambda,seed,accuracy,latency_cycles,energy_units,analog_ch_pct,status";

pub fn pareto_csv(points: &[ParetoPoint]) -> String {
    let mut s = String::from(PARETO_HEADER) + "\n";
    for p in points {
        s += &format!(
            "{},{},{},{},{},{},{}\n",
            p.lambda, p.seed, p.accuracy, p.latency_cycles, p.energy_units, p.analog_ch_pct, p.status
        );
    }
    s
}

/// Successful points not dominated in (higher accuracy, lower cost).
pub fn pareto_front(points: &[ParetoPoint], objective: Objective) -> Vec<ParetoPoint> {
    let ok: Vec<&ParetoPoint> = points.iter().filter(|p| p.ok()).collect();
    let dominates = |a: &ParetoPoint, b: &ParetoPoint| {
        let (ca, cb) = (a.cost(objective), b.cost(objective));
        a.accuracy >= b.accuracy && ca <= cb && (a.accuracy > b.accuracy || ca < cb)
    };
    ok.iter().filter(|b| !ok.iter().any(|a| dominates(a, b))).map(|p| (*p).clone()).collect()
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    unix_time: u64,
}

/// Records run metadata; the only output that varies between reruns.
pub fn write_metadata(out: &Path, command: &str) -> Result<()> {
    let unix_time = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(&out.join("metadata.json"), &Metadata { command, version: env!("CARGO_PKG_VERSION"), unix_time })
}

/// Runs `f` over `items` on up to `jobs` threads, keeping input order.
fn parallel_map<T: Sync, U: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<U>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("result lock").into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Runs every (lambda, seed) pair and writes `pareto.csv` and `pareto_front.csv`.
/// Failed runs are recorded with their error and do not stop the sweep.
pub fn sweep(ctx: &Context, jobs: usize) -> Result<Vec<ParetoPoint>> {
    let out = ctx.out();
    std::fs::create_dir_all(&out)?;
    let seeds = ctx.cfg.seeds.clone();
    let pre: Vec<Result<Checkpoint>> = parallel_map(&seeds, jobs, |&s| pretrained(ctx, s));
    let mut work = Vec::new();
    for (k, &s) in seeds.iter().enumerate() {
        for &l in &ctx.cfg.lambdas {
            work.push((l, s, k));
        }
    }
    let points = parallel_map(&work, jobs, |&(l, s, k)| {
        let r = match &pre[k] {
            Ok(ck) => run_point(ctx, ck, l, s),
            Err(e) => Err(Error::Config(format!("pretraining failed: {e}"))),
        };
        match r {
            Ok(rep) => ParetoPoint {
                lambda: l,
                seed: s,
                accuracy: rep.accuracy_pct,
                latency_cycles: rep.latency_cycles,
                energy_units: rep.energy_units,
                analog_ch_pct: rep.analog_channel_pct,
                status: "ok".into(),
            },
            Err(e) => {
                log::error!("lambda {l} seed {s}: {e}");
                ParetoPoint::failed(l, s, &e)
            }
        }
    });
    std::fs::write(out.join("pareto.csv"), pareto_csv(&points))?;
    std::fs::write(out.join("pareto_front.csv"), pareto_csv(&pareto_front(&points, ctx.objective())))?;
    write_metadata(&out, "sweep")?;
    Ok(points)
}

/// Reads back a report written by [`simulate_stage`].
pub fn load_report(run: &Path) -> Result<InferenceReport> {
    read_json(&run.join("report.json"))
}
