//! Campaign driver: turns an experiment plan into result-store records
//! with deterministic per-run seeding and optional worker parallelism.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use cgl_core::data::{
    all_permutations, build_tasks, permute_task_order, sample_permutation, Curriculum, Dataset,
};
use cgl_core::graph::{build_backbone, BackboneConfig, BackboneKind, SkeletonGraph};
use cgl_core::methods::{
    evaluate, train_task, EvalSplit, MethodConfig, MethodKind, MethodState, PreparedDataset,
    TrainerConfig,
};
use cgl_core::metrics::{AccuracyMatrix, OrderOutcome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::store::{RecordKey, ResultStore, RunRecord};

pub type BenchError = Box<dyn std::error::Error + Send + Sync>;
pub type BenchResult<T> = Result<T, BenchError>;

// ── seeding ─────────────────────────────────────────────────────────

/// FNV-1a 64-bit over the canonical run coordinates: the documented
/// splittable seeding scheme.
pub fn stable_hash64(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_run_seed(master_seed: u64, key: &RecordKey) -> u64 {
    stable_hash64(&format!("run|{master_seed}|{}", key.canonical()))
}

/// Split seed is method-independent so every method sees identical
/// splits for a given (order, repeat).
pub fn derive_split_seed(master_seed: u64, order_id: &str, repeat: usize, dataset: &str) -> u64 {
    stable_hash64(&format!("split|{master_seed}|{order_id}|{repeat}|{dataset}"))
}

// ── plan types ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub kind: BackboneKind,
    pub depth: usize,
    pub width: usize,
}

impl ArchSpec {
    pub fn default_gcn() -> Self {
        ArchSpec {
            kind: BackboneKind::Gcn,
            depth: cgl_core::graph::DEFAULT_DEPTH,
            width: cgl_core::graph::DEFAULT_WIDTH,
        }
    }

    pub fn label(&self) -> String {
        let k = match self.kind {
            BackboneKind::Gcn => "gcn",
            BackboneKind::StgcnLite => "stgcn",
        };
        format!("{k}-d{}-w{}", self.depth, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OrderSpec {
    Canonical,
    TaskPerm(Vec<usize>),
    ClassOrder(Vec<usize>),
}

impl OrderSpec {
    pub fn id(&self) -> String {
        match self {
            OrderSpec::Canonical => "canonical".into(),
            OrderSpec::TaskPerm(p) => {
                let parts: Vec<String> = p.iter().map(|x| x.to_string()).collect();
                format!("task-{}", parts.join("."))
            }
            OrderSpec::ClassOrder(c) => {
                let parts: Vec<String> = c.iter().map(|x| x.to_string()).collect();
                format!("class-{}", parts.join("."))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderMode {
    Canonical,
    TaskExhaustive,
    TaskSampled(usize),
    ClassSampled(usize),
}

/// Everything one campaign needs besides the dataset bytes.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub dataset_name: String,
    pub methods: Vec<(MethodKind, MethodConfig)>,
    pub order_mode: OrderMode,
    pub repeats: usize,
    pub arch: ArchSpec,
    pub trainer: TrainerConfig,
    pub classes_per_task: usize,
    pub master_seed: u64,
    pub workers: usize,
}

/// 120 for B = 5: exhaustive order enumeration is refused above this.
pub const PERMUTATION_CAP: usize = 120;

impl ExperimentPlan {
    pub fn validate(&self, num_classes: usize) -> BenchResult<()> {
        if self.repeats < 1 {
            return Err("repeats must be at least 1".into());
        }
        if self.methods.is_empty() {
            return Err("no methods selected".into());
        }
        if num_classes % self.classes_per_task != 0 {
            return Err(format!(
                "{num_classes} classes not divisible by {} per task",
                self.classes_per_task
            )
            .into());
        }
        if self.order_mode == OrderMode::TaskExhaustive {
            let b = num_classes / self.classes_per_task;
            let total: usize = (1..=b).product();
            if total > PERMUTATION_CAP {
                return Err(format!(
                    "{b}! = {total} task orders exceed the exhaustive cap {PERMUTATION_CAP}; \
                     use sampled mode"
                )
                .into());
            }
        }
        Ok(())
    }

    /// The shared order list: every method sees exactly these.
    pub fn orders(&self, num_classes: usize) -> Vec<OrderSpec> {
        let b = num_classes / self.classes_per_task;
        match self.order_mode {
            OrderMode::Canonical => vec![OrderSpec::Canonical],
            OrderMode::TaskExhaustive => {
                all_permutations(b).into_iter().map(OrderSpec::TaskPerm).collect()
            }
            OrderMode::TaskSampled(r) => {
                let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(&format!(
                    "orders|task|{}",
                    self.master_seed
                )));
                sample_distinct(r, b, &mut rng).into_iter().map(OrderSpec::TaskPerm).collect()
            }
            OrderMode::ClassSampled(r) => {
                let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(&format!(
                    "orders|class|{}",
                    self.master_seed
                )));
                sample_distinct(r, num_classes, &mut rng)
                    .into_iter()
                    .map(OrderSpec::ClassOrder)
                    .collect()
            }
        }
    }

    pub fn cells(&self, num_classes: usize) -> Vec<Cell> {
        let orders = self.orders(num_classes);
        let mut cells = Vec::new();
        for (method, mcfg) in &self.methods {
            for order in &orders {
                for repeat in 0..self.repeats {
                    cells.push(Cell {
                        method: *method,
                        mcfg: mcfg.clone(),
                        order: order.clone(),
                        repeat,
                    });
                }
            }
        }
        cells
    }
}

/// `r` distinct permutations of `n` items by rejection; falls back to
/// the full enumeration when `r` covers it.
fn sample_distinct(r: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let total: Option<usize> = (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k));
    if let Some(total) = total {
        if r >= total {
            return all_permutations(n);
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(r);
    while out.len() < r {
        let p = sample_permutation(n, rng);
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub method: MethodKind,
    pub mcfg: MethodConfig,
    pub order: OrderSpec,
    pub repeat: usize,
}

// ── single run ──────────────────────────────────────────────────────

pub fn curriculum_for(
    dataset: &Dataset,
    order: &OrderSpec,
    classes_per_task: usize,
    split_seed: u64,
) -> BenchResult<Curriculum> {
    let canonical: Vec<usize> = (0..dataset.profile.num_classes).collect();
    let cur = match order {
        OrderSpec::Canonical => build_tasks(dataset, &canonical, classes_per_task, split_seed)?,
        OrderSpec::TaskPerm(p) => {
            let base = build_tasks(dataset, &canonical, classes_per_task, split_seed)?;
            permute_task_order(&base, p)?
        }
        OrderSpec::ClassOrder(c) => build_tasks(dataset, c, classes_per_task, split_seed)?,
    };
    Ok(cur)
}

pub fn backbone_config(arch: &ArchSpec, profile: &cgl_core::data::DatasetProfile) -> BackboneConfig {
    let mut cfg = match arch.kind {
        BackboneKind::Gcn => BackboneConfig::gcn_default(3 * profile.frames, profile.num_classes),
        BackboneKind::StgcnLite => BackboneConfig::stgcn_default(profile.num_classes),
    };
    cfg.depth = arch.depth;
    cfg.width = arch.width;
    cfg
}

/// Train the full curriculum for one (method, order, repeat) cell and
/// build its record.
pub fn run_curriculum(
    dataset: &Dataset,
    prepared: &PreparedDataset,
    graph: &SkeletonGraph,
    cell: &Cell,
    plan: &ExperimentPlan,
) -> BenchResult<RunRecord> {
    let start = Instant::now();
    let key = RecordKey {
        method: cell.method.name().into(),
        order_id: cell.order.id(),
        repeat: cell.repeat,
        arch: plan.arch.label(),
        dataset: plan.dataset_name.clone(),
    };
    let run_seed = derive_run_seed(plan.master_seed, &key);
    let split_seed =
        derive_split_seed(plan.master_seed, &key.order_id, cell.repeat, &plan.dataset_name);
    let curriculum = curriculum_for(dataset, &cell.order, plan.classes_per_task, split_seed)?;

    let cfg = backbone_config(&plan.arch, &dataset.profile);
    let mut model = build_backbone(&cfg, graph, run_seed)?;
    let mut state = MethodState::new(cell.method);
    let tcfg = TrainerConfig { seed: run_seed, ..plan.trainer.clone() };

    let mut matrix = AccuracyMatrix::new();
    let mut last_row = None;
    for k in 0..curriculum.tasks.len() {
        train_task(&mut model, &mut state, prepared, &curriculum, k, &cell.mcfg, &tcfg, graph)
            .map_err(|e| format!("{}: {e}", key.canonical()))?;
        let row = evaluate(&model, prepared, &curriculum, k, graph, EvalSplit::Test)
            .map_err(|e| format!("{}: {e}", key.canonical()))?;
        matrix.push_row(row.task_accuracies.clone())?;
        last_row = Some(row);
    }
    let last = last_row.ok_or("curriculum has no tasks")?;
    let final_task_accuracies = curriculum
        .tasks
        .iter()
        .enumerate()
        .map(|(j, t)| (t.task_id, last.task_accuracies[j]))
        .collect();
    let hash = RunRecord::compute_hash(&key, run_seed, &matrix.rows, &last.class_accuracies);
    Ok(RunRecord {
        key,
        seed: run_seed,
        accuracy_matrix: matrix.rows,
        class_accuracies: last.class_accuracies,
        final_task_accuracies,
        wall_time_ms: start.elapsed().as_millis() as u64,
        hash,
    })
}

// ── parallel execution ──────────────────────────────────────────────

/// Worker cap from the environment; 0/unset leaves the plan untouched.
pub fn effective_workers(requested: usize) -> usize {
    let cap = std::env::var("CGLBENCH_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    let w = if cap > 0 { requested.min(cap) } else { requested };
    w.max(1)
}

/// Run every not-yet-stored cell of the plan; resumable because records
/// already present are skipped.
pub fn execute_plan(store: &ResultStore, dataset: &Dataset, plan: &ExperimentPlan) -> BenchResult<usize> {
    plan.validate(dataset.profile.num_classes)?;
    let prepared = Arc::new(match plan.arch.kind {
        BackboneKind::Gcn => PreparedDataset::gcn(dataset),
        BackboneKind::StgcnLite => PreparedDataset::stgcn(dataset),
    });
    let graph = Arc::new(SkeletonGraph::chain(dataset.profile.joints)?);
    let pending: Vec<Cell> = plan
        .cells(dataset.profile.num_classes)
        .into_iter()
        .filter(|cell| {
            let key = RecordKey {
                method: cell.method.name().into(),
                order_id: cell.order.id(),
                repeat: cell.repeat,
                arch: plan.arch.label(),
                dataset: plan.dataset_name.clone(),
            };
            !store.contains(&key)
        })
        .collect();
    let total = pending.len();
    let workers = effective_workers(plan.workers);
    let queue = Arc::new(Mutex::new(pending.into_iter().collect::<VecDeque<_>>()));
    let first_error: Arc<Mutex<Option<String>>> = Arc::new(Mutex::new(None));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let queue = Arc::clone(&queue);
            let first_error = Arc::clone(&first_error);
            let prepared = Arc::clone(&prepared);
            let graph = Arc::clone(&graph);
            scope.spawn(move || loop {
                if first_error.lock().unwrap().is_some() {
                    return;
                }
                let cell = match queue.lock().unwrap().pop_front() {
                    Some(c) => c,
                    None => return,
                };
                match run_curriculum(dataset, &prepared, &graph, &cell, plan)
                    .and_then(|r| store.put(&r).map_err(|e| e.into()))
                {
                    Ok(()) => {}
                    Err(e) => {
                        let mut slot = first_error.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some(format!("{e}"));
                        }
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.lock().unwrap().take() {
        return Err(e.into());
    }
    store.write_index()?;
    Ok(total)
}

/// Final-accuracy outcomes per order, pooled over repeats by mean, for
/// the given method.
pub fn outcomes_for(records: &[RunRecord], method: &str) -> Vec<OrderOutcome> {
    use std::collections::BTreeMap;
    let mut by_order: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.key.method == method) {
        by_order.entry(r.key.order_id.clone()).or_default().push(r);
    }
    by_order
        .into_values()
        .enumerate()
        .map(|(order_id, runs)| {
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for r in &runs {
                for (&t, &a) in &r.final_task_accuracies {
                    *acc.entry(t).or_insert(0.0) += a;
                }
            }
            for v in acc.values_mut() {
                *v /= runs.len() as f64;
            }
            OrderOutcome { order_id, final_task_accuracy: acc }
        })
        .collect()
}

// ── architecture sweep ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Width,
    Depth,
}

pub const WIDTH_GRID: [usize; 5] = [32, 64, 128, 256, 512];
pub const DEPTH_GRID: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub method: String,
    pub arch: String,
    pub value: usize,
    pub final_aa: f64,
    pub final_af: f64,
}

/// Vary exactly one architecture axis (the other at default, classifier
/// head untouched); emit the final AA/AF series per method.
pub fn run_architecture_sweep(
    store: &ResultStore,
    dataset: &Dataset,
    base: &ExperimentPlan,
    axis: SweepAxis,
    values: &[usize],
) -> BenchResult<Vec<SweepPoint>> {
    let mut points = Vec::new();
    for &v in values {
        let mut plan = base.clone();
        match axis {
            SweepAxis::Width => plan.arch.width = v,
            SweepAxis::Depth => plan.arch.depth = v,
        }
        execute_plan(store, dataset, &plan)?;
        let records = store.load_all()?;
        for (method, _) in &plan.methods {
            let matching: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.key.method == method.name() && r.key.arch == plan.arch.label())
                .collect();
            if matching.is_empty() {
                return Err(format!("no records for {} at {}", method.name(), plan.arch.label()).into());
            }
            let mut aa = 0.0;
            let mut af = 0.0;
            for r in &matching {
                let m = AccuracyMatrix { rows: r.accuracy_matrix.clone() };
                let last = m.num_tasks() - 1;
                aa += m.average_accuracy(last)?;
                af += m.average_forgetting(last)?;
            }
            points.push(SweepPoint {
                method: method.name().into(),
                arch: plan.arch.label(),
                value: v,
                final_aa: aa / matching.len() as f64,
                final_af: af / matching.len() as f64,
            });
        }
    }
    Ok(points)
}

// ── grid search ─────────────────────────────────────────────────────

/// The per-method hyperparameter candidate lists.
pub fn hyper_grid(method: MethodKind) -> Vec<MethodConfig> {
    let base = MethodConfig::defaults_for(method);
    match method {
        MethodKind::Bare | MethodKind::Joint => vec![base],
        MethodKind::Ewc | MethodKind::Mas => [1.0, 100.0, 1e4, 1e6]
            .into_iter()
            .map(|s| MethodConfig { memory_strength: s, ..base.clone() })
            .collect(),
        MethodKind::Twp => {
            let mut out = Vec::new();
            for ll in [100.0, 1e4] {
                for lt in [100.0, 1e4] {
                    for b in [0.01, 0.1] {
                        out.push(MethodConfig {
                            lambda_l: ll,
                            lambda_t: lt,
                            beta: b,
                            ..base.clone()
                        });
                    }
                }
            }
            out
        }
        MethodKind::Lwf => {
            let mut out = Vec::new();
            for ld in [0.1, 1.0, 10.0] {
                for t in [0.2, 2.0, 20.0] {
                    out.push(MethodConfig { lambda_dist: ld, temperature: t, ..base.clone() });
                }
            }
            out
        }
        MethodKind::Gem => {
            let mut out = Vec::new();
            for s in [0.05, 0.5, 5.0] {
                for f in [0.05, 0.1, 0.2] {
                    out.push(MethodConfig {
                        memory_strength: s,
                        frac_memories: f,
                        ..base.clone()
                    });
                }
            }
            out
        }
        MethodKind::Replay => [0.05, 0.1, 0.2]
            .into_iter()
            .map(|f| MethodConfig { frac_memories: f, ..base.clone() })
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub config: MethodConfig,
    pub val_aa: f64,
    pub val_af: f64,
}

/// Evaluate each candidate on the canonical curriculum; pick maximal
/// final validation AA, ties broken by lower AF, then first-listed.
pub fn grid_search(
    dataset: &Dataset,
    method: MethodKind,
    candidates: &[MethodConfig],
    base: &ExperimentPlan,
) -> BenchResult<(MethodConfig, Vec<GridOutcome>)> {
    if candidates.is_empty() {
        return Err("empty hyperparameter grid".into());
    }
    let prepared = match base.arch.kind {
        BackboneKind::Gcn => PreparedDataset::gcn(dataset),
        BackboneKind::StgcnLite => PreparedDataset::stgcn(dataset),
    };
    let graph = SkeletonGraph::chain(dataset.profile.joints)?;
    let split_seed = derive_split_seed(base.master_seed, "canonical", 0, &base.dataset_name);
    let curriculum =
        curriculum_for(dataset, &OrderSpec::Canonical, base.classes_per_task, split_seed)?;
    let cfg = backbone_config(&base.arch, &dataset.profile);
    let mut outcomes = Vec::new();
    for (ci, mcfg) in candidates.iter().enumerate() {
        let key = RecordKey {
            method: method.name().into(),
            order_id: format!("grid-{ci}"),
            repeat: 0,
            arch: base.arch.label(),
            dataset: base.dataset_name.clone(),
        };
        let run_seed = derive_run_seed(base.master_seed, &key);
        let mut model = build_backbone(&cfg, &graph, run_seed)?;
        let mut state = MethodState::new(method);
        let tcfg = TrainerConfig { seed: run_seed, ..base.trainer.clone() };
        let mut matrix = AccuracyMatrix::new();
        for k in 0..curriculum.tasks.len() {
            train_task(&mut model, &mut state, &prepared, &curriculum, k, mcfg, &tcfg, &graph)?;
            let row = evaluate(&model, &prepared, &curriculum, k, &graph, EvalSplit::Val)?;
            matrix.push_row(row.task_accuracies)?;
        }
        let last = matrix.num_tasks() - 1;
        outcomes.push(GridOutcome {
            config: mcfg.clone(),
            val_aa: matrix.average_accuracy(last)?,
            val_af: matrix.average_forgetting(last)?,
        });
    }
    let mut best = 0;
    for i in 1..outcomes.len() {
        let (a, b) = (&outcomes[i], &outcomes[best]);
        if a.val_aa > b.val_aa + 1e-15 || ((a.val_aa - b.val_aa).abs() <= 1e-15 && a.val_af < b.val_af - 1e-15)
        {
            best = i;
        }
    }
    Ok((outcomes[best].config.clone(), outcomes))
}
