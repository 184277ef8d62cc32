use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgl_bench::config::Config;
use cgl_bench::formats;
use cgl_bench::orchestrate::{
    execute_plan, grid_search, hyper_grid, run_architecture_sweep, ArchSpec, BenchResult,
    ExperimentPlan, OrderMode, SweepAxis, DEPTH_GRID, WIDTH_GRID,
};
use cgl_bench::report::{analyze, scatter_csv};
use cgl_bench::store::ResultStore;
use cgl_core::data::DatasetProfile;
use cgl_core::graph::BackboneKind;
use cgl_core::methods::{MethodConfig, MethodKind, TrainerConfig};

#[derive(Parser)]
#[command(name = "cglbench", about = "Continual graph learning benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic skeleton-sequence dataset file.
    GenData(GenDataOpts),
    /// Run one method on one curriculum into a result store.
    Run(CampaignOpts),
    /// Run an order-sensitivity campaign.
    OrderCampaign(CampaignOpts),
    /// Sweep backbone width or depth for the selected methods.
    SweepArch(SweepOpts),
    /// Grid-search a method's hyperparameters on the canonical order.
    GridSearch(GridOpts),
    /// Summarize a result store into a metric report.
    Analyze(AnalyzeOpts),
    /// Emit scatter plot data (AA vs AF with the theoretical bound).
    EmitPlots(AnalyzeOpts),
}

#[derive(Args)]
struct GenDataOpts {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    joints: usize,
    #[arg(long, default_value_t = 24)]
    frames: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `bin` or `jsonl`.
    #[arg(long, default_value = "bin")]
    format: String,
}

#[derive(Args)]
struct SharedOpts {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated method list.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// `gcn` or `stgcn`.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    classes_per_task: Option<usize>,
    /// Full-scale campaign settings (100 epochs, 5 repeats, 100 sampled
    /// class orders or exhaustive task orders).
    #[arg(long, default_value_t = false)]
    preset_paper: bool,
}

#[derive(Args)]
struct CampaignOpts {
    #[command(flatten)]
    shared: SharedOpts,
    /// `canonical`, `task-exhaustive`, `task-sampled`, `class-sampled`.
    #[arg(long)]
    mode: Option<String>,
    /// Number of sampled orders.
    #[arg(long)]
    orders: Option<usize>,
}

#[derive(Args)]
struct SweepOpts {
    #[command(flatten)]
    shared: SharedOpts,
    /// `width` or `depth`.
    #[arg(long)]
    axis: String,
    /// Comma-separated values; defaults to the standard grid.
    #[arg(long)]
    values: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridOpts {
    #[command(flatten)]
    shared: SharedOpts,
    #[arg(long)]
    method: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeOpts {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 101)]
    bound_samples: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> BenchResult<()> {
    match cmd {
        Command::GenData(o) => gen_data(o),
        Command::Run(o) => campaign(o, true),
        Command::OrderCampaign(o) => campaign(o, false),
        Command::SweepArch(o) => sweep(o),
        Command::GridSearch(o) => grid(o),
        Command::Analyze(o) => {
            let store = ResultStore::open(&o.store)?;
            let report = analyze(&store)?;
            let json = serde_json::to_string_pretty(&report)?;
            write_or_print(o.out.as_deref(), &json)
        }
        Command::EmitPlots(o) => {
            let store = ResultStore::open(&o.store)?;
            let csv = scatter_csv(&store, o.bound_samples)?;
            write_or_print(o.out.as_deref(), &csv)
        }
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> BenchResult<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn gen_data(o: GenDataOpts) -> BenchResult<()> {
    let profile = DatasetProfile { joints: o.joints, frames: o.frames, num_classes: o.classes };
    let dataset = cgl_core::data::generate_synthetic(&profile, o.per_class, o.seed);
    match o.format.as_str() {
        "bin" => formats::save_binary(&o.out, &dataset)?,
        "jsonl" => formats::save_jsonl(&o.out, &dataset)?,
        other => return Err(format!("unknown format `{other}` (use bin|jsonl)").into()),
    }
    println!("wrote {} sequences to {}", dataset.sequences.len(), o.out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> BenchResult<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Per-method hyperparameter overrides from config keys like
/// `ewc.memory_strength = 100`.
fn method_config(cfg: &Config, method: MethodKind) -> BenchResult<MethodConfig> {
    let mut m = MethodConfig::defaults_for(method);
    let p = method.name();
    if let Some(v) = cfg.get::<f64>(&format!("{p}.memory_strength"))? {
        m.memory_strength = v;
    }
    if let Some(v) = cfg.get::<f64>(&format!("{p}.lambda_l"))? {
        m.lambda_l = v;
    }
    if let Some(v) = cfg.get::<f64>(&format!("{p}.lambda_t"))? {
        m.lambda_t = v;
    }
    if let Some(v) = cfg.get::<f64>(&format!("{p}.beta"))? {
        m.beta = v;
    }
    if let Some(v) = cfg.get::<f64>(&format!("{p}.lambda_dist"))? {
        m.lambda_dist = v;
    }
    if let Some(v) = cfg.get::<f64>(&format!("{p}.temperature"))? {
        m.temperature = v;
    }
    if let Some(v) = cfg.get::<f64>(&format!("{p}.frac_memories"))? {
        m.frac_memories = v;
    }
    Ok(m)
}

fn build_plan(shared: &SharedOpts, cfg: &Config, order_mode: OrderMode) -> BenchResult<ExperimentPlan> {
    let method_list = shared
        .methods
        .clone()
        .or(cfg.values.get("methods").cloned())
        .unwrap_or_else(|| "bare".into());
    let mut methods = Vec::new();
    for name in method_list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let kind = MethodKind::parse(name)?;
        methods.push((kind, method_config(cfg, kind)?));
    }
    let backbone = shared
        .backbone
        .clone()
        .or(cfg.values.get("backbone").cloned())
        .unwrap_or_else(|| "gcn".into());
    let kind = match backbone.as_str() {
        "gcn" => BackboneKind::Gcn,
        "stgcn" => BackboneKind::StgcnLite,
        other => return Err(format!("unknown backbone `{other}` (use gcn|stgcn)").into()),
    };
    let defaults = ArchSpec::default_gcn();
    let epochs_default = if shared.preset_paper { 100 } else { 100 };
    let repeats_default = if shared.preset_paper { 5 } else { 1 };
    Ok(ExperimentPlan {
        dataset_name: shared
            .dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        methods,
        order_mode,
        repeats: pick(shared.repeats, cfg, "repeats")?.unwrap_or(repeats_default),
        arch: ArchSpec {
            kind,
            depth: pick(shared.depth, cfg, "depth")?.unwrap_or(defaults.depth),
            width: pick(shared.width, cfg, "width")?.unwrap_or(defaults.width),
        },
        trainer: TrainerConfig {
            epochs: pick(shared.epochs, cfg, "trainer.epochs")?.unwrap_or(epochs_default),
            learning_rate: pick(shared.learning_rate, cfg, "trainer.learning_rate")?.unwrap_or(0.001),
            seed: 0, // replaced by the per-run derived seed
        },
        classes_per_task: pick(shared.classes_per_task, cfg, "classes_per_task")?.unwrap_or(2),
        master_seed: pick(shared.seed, cfg, "seed")?.unwrap_or(0),
        workers: pick(shared.workers, cfg, "workers")?.unwrap_or(1),
    })
}

fn pick<T: std::str::FromStr>(flag: Option<T>, cfg: &Config, key: &str) -> BenchResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => cfg.get(key),
    }
}

fn campaign(o: CampaignOpts, single_run: bool) -> BenchResult<()> {
    let cfg = load_config(o.shared.config.as_deref())?;
    let mode_name = o
        .mode
        .clone()
        .or(cfg.values.get("mode").cloned())
        .unwrap_or_else(|| "canonical".into());
    let orders = pick(o.orders, &cfg, "orders")?;
    let mode = match mode_name.as_str() {
        "canonical" => OrderMode::Canonical,
        "task-exhaustive" => OrderMode::TaskExhaustive,
        "task-sampled" => OrderMode::TaskSampled(orders.unwrap_or(10)),
        "class-sampled" => OrderMode::ClassSampled(orders.unwrap_or(100)),
        other => return Err(format!("unknown order mode `{other}`").into()),
    };
    let mode = if single_run { OrderMode::Canonical } else { mode };
    let plan = build_plan(&o.shared, &cfg, mode)?;
    let dataset = formats::load_dataset(&o.shared.dataset, None)?;
    let store = ResultStore::open(&o.shared.store)?;
    let ran = execute_plan(&store, &dataset, &plan)?;
    let records = store.load_all()?;
    println!("ran {ran} new cells; store holds {} records", records.len());
    if single_run {
        for r in &records {
            println!("{} hash={}", r.key.canonical(), r.hash);
        }
    }
    Ok(())
}

fn sweep(o: SweepOpts) -> BenchResult<()> {
    let cfg = load_config(o.shared.config.as_deref())?;
    let axis = match o.axis.as_str() {
        "width" => SweepAxis::Width,
        "depth" => SweepAxis::Depth,
        other => return Err(format!("unknown sweep axis `{other}` (use width|depth)").into()),
    };
    let values: Vec<usize> = match &o.values {
        Some(text) => text
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|e| format!("bad value `{v}`: {e}")))
            .collect::<Result<_, _>>()?,
        None => match axis {
            SweepAxis::Width => WIDTH_GRID.to_vec(),
            SweepAxis::Depth => DEPTH_GRID.to_vec(),
        },
    };
    let plan = build_plan(&o.shared, &cfg, OrderMode::Canonical)?;
    let dataset = formats::load_dataset(&o.shared.dataset, None)?;
    let store = ResultStore::open(&o.shared.store)?;
    let points = run_architecture_sweep(&store, &dataset, &plan, axis, &values)?;
    let mut csv = String::from("series,x,y\n");
    for p in &points {
        csv.push_str(&format!("{}.aa,{},{}\n", p.method, p.value, p.final_aa));
        csv.push_str(&format!("{}.af,{},{}\n", p.method, p.value, p.final_af));
    }
    write_or_print(o.out.as_deref(), &csv)
}

fn grid(o: GridOpts) -> BenchResult<()> {
    let cfg = load_config(o.shared.config.as_deref())?;
    let method = MethodKind::parse(&o.method)?;
    let plan = build_plan(&o.shared, &cfg, OrderMode::Canonical)?;
    let dataset = formats::load_dataset(&o.shared.dataset, None)?;
    let candidates = hyper_grid(method);
    let (best, outcomes) = grid_search(&dataset, method, &candidates, &plan)?;
    let json = serde_json::json!({
        "method": method.name(),
        "best": best,
        "candidates": outcomes.iter().map(|g| serde_json::json!({
            "config": g.config,
            "val_aa": g.val_aa,
            "val_af": g.val_af,
        })).collect::<Vec<_>>(),
    });
    write_or_print(o.out.as_deref(), &serde_json::to_string_pretty(&json)?)
}
