//! The continual-learning method suite behind one trainer contract.
//!
//! `train_task` runs full-batch epochs of the chosen strategy — Bare,
//! Joint, EWC, MAS, TWP, LwF, GEM or Replay — and `evaluate` produces
//! one row of the accuracy matrix (macro-averaged over each task's
//! classes, argmax over all seen classes).

pub mod qp;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Curriculum;
use crate::error::{CglError, Result};
use crate::graph::{forward, Bound, ForwardTrace, Model, SkeletonGraph};
use crate::tensor::{Tape, Tensor, VarId};

pub use qp::gem_project;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MethodKind {
    Bare,
    Joint,
    Ewc,
    Mas,
    Twp,
    Lwf,
    Gem,
    Replay,
}

impl MethodKind {
    pub const ALL: [MethodKind; 8] = [
        MethodKind::Bare,
        MethodKind::Joint,
        MethodKind::Ewc,
        MethodKind::Mas,
        MethodKind::Twp,
        MethodKind::Lwf,
        MethodKind::Gem,
        MethodKind::Replay,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Bare => "bare",
            MethodKind::Joint => "joint",
            MethodKind::Ewc => "ewc",
            MethodKind::Mas => "mas",
            MethodKind::Twp => "twp",
            MethodKind::Lwf => "lwf",
            MethodKind::Gem => "gem",
            MethodKind::Replay => "replay",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CglError::InvalidConfig { detail: format!("unknown method `{s}`") })
    }
}

/// Per-method hyperparameters; only fields relevant to the chosen
/// method are consulted.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MethodConfig {
    pub method: MethodKind,
    /// EWC/MAS λ; GEM margin γ.
    pub memory_strength: f64,
    pub lambda_l: f64,
    pub lambda_t: f64,
    pub beta: f64,
    pub lambda_dist: f64,
    pub temperature: f64,
    pub frac_memories: f64,
}

impl MethodConfig {
    /// Grid-search winners for the UCLA-scale setup.
    pub fn defaults_for(method: MethodKind) -> Self {
        let mut cfg = MethodConfig {
            method,
            memory_strength: 0.0,
            lambda_l: 0.0,
            lambda_t: 0.0,
            beta: 0.0,
            lambda_dist: 0.0,
            temperature: 1.0,
            frac_memories: 0.0,
        };
        match method {
            MethodKind::Bare | MethodKind::Joint => {}
            MethodKind::Ewc => cfg.memory_strength = 1e6,
            MethodKind::Mas => cfg.memory_strength = 100.0,
            MethodKind::Twp => {
                cfg.lambda_l = 1e4;
                cfg.lambda_t = 1e4;
                cfg.beta = 0.01;
            }
            MethodKind::Lwf => {
                cfg.lambda_dist = 1.0;
                cfg.temperature = 2.0;
            }
            MethodKind::Gem => {
                cfg.memory_strength = 5.0;
                cfg.frac_memories = 0.2;
            }
            MethodKind::Replay => cfg.frac_memories = 0.2,
        }
        cfg
    }

    fn validate(&self) -> Result<()> {
        if matches!(self.method, MethodKind::Gem | MethodKind::Replay)
            && !(self.frac_memories > 0.0 && self.frac_memories <= 1.0)
        {
            return Err(CglError::InvalidConfig {
                detail: format!(
                    "{}: frac_memories must be in (0,1], got {}",
                    self.method.name(),
                    self.frac_memories
                ),
            });
        }
        if self.method == MethodKind::Lwf && self.temperature <= 0.0 {
            return Err(CglError::InvalidConfig {
                detail: format!("lwf: temperature must be positive, got {}", self.temperature),
            });
        }
        Ok(())
    }
}

/// Full-batch training protocol.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig { epochs: 100, learning_rate: 0.001, seed: 0 }
    }
}

/// Per-parameter nonnegative weights keyed by the model's registry.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImportanceMap {
    pub weights: BTreeMap<String, Vec<f64>>,
}

impl ImportanceMap {
    /// Flatten in the model's registry order.
    pub fn flat(&self, model: &Model) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(model.param_count());
        for p in &model.params {
            let w = self.weights.get(&p.name).ok_or_else(|| CglError::InvalidData {
                detail: format!("importance map missing parameter `{}`", p.name),
            })?;
            out.extend_from_slice(w);
        }
        Ok(out)
    }

    pub fn all_finite_nonnegative(&self) -> bool {
        self.weights
            .values()
            .all(|v| v.iter().all(|&x| x.is_finite() && x >= 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PenaltyKind {
    Ewc,
    Mas,
    Twp,
}

/// One past task's quadratic penalty: importance weights plus the
/// anchor snapshot θ*.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PenaltyRecord {
    pub task_id: usize,
    pub kind: PenaltyKind,
    pub importance: ImportanceMap,
    /// TWP topology-sensitivity map.
    pub topology: Option<ImportanceMap>,
    pub anchor: BTreeMap<String, Vec<f64>>,
}

/// Stored sample indices per past task; samples come from that task's
/// train split only.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpisodicMemory {
    pub per_task: Vec<(usize, Vec<usize>)>,
}

impl EpisodicMemory {
    pub fn all_indices(&self) -> Vec<usize> {
        self.per_task.iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }
}

/// Everything a strategy carries across tasks.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MethodState {
    pub method: MethodKind,
    pub completed: Vec<usize>,
    pub penalties: Vec<PenaltyRecord>,
    pub memory: EpisodicMemory,
    pub old_model: Option<Model>,
}

impl MethodState {
    pub fn new(method: MethodKind) -> Self {
        MethodState {
            method,
            completed: Vec::new(),
            penalties: Vec::new(),
            memory: EpisodicMemory::default(),
            old_model: None,
        }
    }
}

/// Read access to prepared per-sample inputs. The orchestrator hands
/// the trainer this narrow interface so tests can audit exactly which
/// samples a method touches.
pub trait SampleStore {
    fn len(&self) -> usize;
    fn input(&self, idx: usize) -> &Tensor;
    fn label(&self, idx: usize) -> usize;
}

/// Precomputed per-sample inputs for one backbone kind.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl PreparedDataset {
    pub fn gcn(dataset: &crate::data::Dataset) -> Self {
        let inputs = dataset
            .sequences
            .iter()
            .map(|s| crate::data::preprocess_gcn(s, &dataset.profile))
            .collect();
        let labels = dataset.sequences.iter().map(|s| s.label).collect();
        PreparedDataset { inputs, labels }
    }

    pub fn stgcn(dataset: &crate::data::Dataset) -> Self {
        let inputs = dataset
            .sequences
            .iter()
            .map(|s| crate::data::preprocess_stgcn(s, &dataset.profile))
            .collect();
        let labels = dataset.sequences.iter().map(|s| s.label).collect();
        PreparedDataset { inputs, labels }
    }
}

impl SampleStore for PreparedDataset {
    fn len(&self) -> usize {
        self.inputs.len()
    }
    fn input(&self, idx: usize) -> &Tensor {
        &self.inputs[idx]
    }
    fn label(&self, idx: usize) -> usize {
        self.labels[idx]
    }
}

/// Stack the indexed samples into one `[batch, ...]` tensor plus labels.
pub fn assemble_batch<S: SampleStore + ?Sized>(store: &S, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    if indices.is_empty() {
        return Err(CglError::EmptyTaskData { op: "assemble_batch" });
    }
    let first = store.input(indices[0]).shape.clone();
    let per = store.input(indices[0]).numel();
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let t = store.input(i);
        if t.shape != first {
            return Err(CglError::ShapeMismatch {
                op: "assemble_batch",
                lhs: first,
                rhs: t.shape.clone(),
            });
        }
        data.extend_from_slice(&t.data);
        labels.push(store.label(i));
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&first);
    Ok((Tensor::from_vec(shape, data)?, labels))
}

fn class_mask(classes: &[usize], num_classes: usize) -> Vec<bool> {
    let mut mask = vec![false; num_classes];
    for &c in classes {
        mask[c] = true;
    }
    mask
}

// ── importance estimation ───────────────────────────────────────────

/// Per-sample logits producer; also yields the message trace so TWP can
/// reach the aggregated-message nodes.
pub type SampleForward<'a> =
    &'a dyn Fn(&Model, &Bound, &mut Tape, &Tensor) -> Result<(VarId, ForwardTrace)>;

/// Diagonal Fisher: mean over samples of the squared gradient of
/// log p(y|x) at the true label, softmax over active classes.
pub fn ewc_after_task(
    model: &Model,
    samples: &[(Tensor, usize)],
    mask: &[bool],
    forward: SampleForward<'_>,
) -> Result<ImportanceMap> {
    if samples.is_empty() {
        return Err(CglError::EmptyTaskData { op: "ewc_after_task" });
    }
    let mut acc = vec![0.0; model.param_count()];
    for (input, label) in samples {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (logits, _) = forward(model, &bound, &mut tape, input)?;
        // ∂(−log p)/∂θ has the same square as ∂log p/∂θ
        let nll = tape.cross_entropy(logits, &[*label], mask)?;
        tape.backward(nll)?;
        let flat = flat_leaf_grads(model, &tape, &bound);
        for (a, g) in acc.iter_mut().zip(&flat) {
            *a += g * g;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(unflatten(model, &acc))
}

/// MAS Ω: mean over samples of |∂‖f(x)‖²₂/∂θ| with f the active logits.
pub fn mas_after_task(
    model: &Model,
    samples: &[Tensor],
    mask: &[bool],
    forward: SampleForward<'_>,
) -> Result<ImportanceMap> {
    if samples.is_empty() {
        return Err(CglError::EmptyTaskData { op: "mas_after_task" });
    }
    let mut acc = vec![0.0; model.param_count()];
    for input in samples {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (logits, _) = forward(model, &bound, &mut tape, input)?;
        let masked = mask_logits(&mut tape, logits, mask)?;
        let sq = tape.mul(masked, masked)?;
        let norm2 = tape.sum_all(sq);
        tape.backward(norm2)?;
        let flat = flat_leaf_grads(model, &tape, &bound);
        for (a, g) in acc.iter_mut().zip(&flat) {
            *a += g.abs();
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(unflatten(model, &acc))
}

/// TWP: loss-sensitivity mean |∂L/∂θ| and topology-sensitivity
/// mean |∂Σ_l‖ÂH_l‖²₂/∂θ| over the graph layers' aggregated messages.
pub fn twp_after_task(
    model: &Model,
    samples: &[(Tensor, usize)],
    mask: &[bool],
    forward: SampleForward<'_>,
) -> Result<(ImportanceMap, ImportanceMap)> {
    if samples.is_empty() {
        return Err(CglError::EmptyTaskData { op: "twp_after_task" });
    }
    let mut loss_acc = vec![0.0; model.param_count()];
    let mut topo_acc = vec![0.0; model.param_count()];
    for (input, label) in samples {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (logits, trace) = forward(model, &bound, &mut tape, input)?;
        if trace.messages.is_empty() {
            return Err(CglError::InvalidConfig {
                detail: String::from("twp requires a backbone with graph layers"),
            });
        }
        let nll = tape.cross_entropy(logits, &[*label], mask)?;
        tape.backward(nll)?;
        let flat = flat_leaf_grads(model, &tape, &bound);
        for (a, g) in loss_acc.iter_mut().zip(&flat) {
            *a += g.abs();
        }
        // topology proxy: squared norm of aggregated messages per layer
        let mut norms = Vec::with_capacity(trace.messages.len());
        for &m in &trace.messages {
            let sq = tape.mul(m, m)?;
            norms.push(tape.sum_all(sq));
        }
        let total = norms
            .into_iter()
            .try_fold(None::<VarId>, |acc, n| -> Result<Option<VarId>> {
                Ok(Some(match acc {
                    None => n,
                    Some(a) => tape.add(a, n)?,
                }))
            })?
            .expect("nonempty messages");
        tape.backward(total)?;
        let flat = flat_leaf_grads(model, &tape, &bound);
        for (a, g) in topo_acc.iter_mut().zip(&flat) {
            *a += g.abs();
        }
    }
    let n = samples.len() as f64;
    loss_acc.iter_mut().for_each(|a| *a /= n);
    topo_acc.iter_mut().for_each(|a| *a /= n);
    Ok((unflatten(model, &loss_acc), unflatten(model, &topo_acc)))
}

fn flat_leaf_grads(model: &Model, tape: &Tape, bound: &Bound) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.param_count());
    for (&v, p) in bound.vars.iter().zip(&model.params) {
        let g = tape.grad(v);
        if g.is_empty() {
            out.extend(core::iter::repeat(0.0).take(p.value.numel()));
        } else {
            out.extend_from_slice(g);
        }
    }
    out
}

fn unflatten(model: &Model, flat: &[f64]) -> ImportanceMap {
    let mut weights = BTreeMap::new();
    let mut off = 0;
    for p in &model.params {
        let n = p.value.numel();
        weights.insert(p.name.clone(), flat[off..off + n].to_vec());
        off += n;
    }
    ImportanceMap { weights }
}

fn anchor_of(model: &Model) -> BTreeMap<String, Vec<f64>> {
    model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.data.clone()))
        .collect()
}

/// Zero out inactive logit columns: elementwise product with the mask.
fn mask_logits(tape: &mut Tape, logits: VarId, mask: &[bool]) -> Result<VarId> {
    let shape = tape.shape(logits).to_vec();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let cols = *shape.last().unwrap();
    let mut m = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if mask[c] {
                m[r * cols + c] = 1.0;
            }
        }
    }
    let mv = tape.constant(shape, m);
    tape.mul(logits, mv)
}

// ── quadratic penalties ─────────────────────────────────────────────

/// Value of all accumulated penalties at the current parameters, with
/// their gradients added onto the model. EWC uses (λ/2)ΣF d²; MAS uses
/// λΣΩ d²; TWP uses Σ(λ_l I^loss + λ_t I^top) d².
pub fn apply_penalties(model: &mut Model, penalties: &[PenaltyRecord], mcfg: &MethodConfig) -> Result<f64> {
    let mut value = 0.0;
    if penalties.is_empty() {
        return Ok(value);
    }
    let theta = model.flat_params();
    let mut grad = vec![0.0; theta.len()];
    for pen in penalties {
        let imp = pen.importance.flat(model)?;
        let anchor = flatten_named(model, &pen.anchor)?;
        match pen.kind {
            PenaltyKind::Ewc => {
                let lam = mcfg.memory_strength;
                for i in 0..theta.len() {
                    let d = theta[i] - anchor[i];
                    value += 0.5 * lam * imp[i] * d * d;
                    grad[i] += lam * imp[i] * d;
                }
            }
            PenaltyKind::Mas => {
                let lam = mcfg.memory_strength;
                for i in 0..theta.len() {
                    let d = theta[i] - anchor[i];
                    value += lam * imp[i] * d * d;
                    grad[i] += 2.0 * lam * imp[i] * d;
                }
            }
            PenaltyKind::Twp => {
                let topo = pen
                    .topology
                    .as_ref()
                    .ok_or_else(|| CglError::InvalidData {
                        detail: String::from("twp penalty missing topology map"),
                    })?
                    .flat(model)?;
                for i in 0..theta.len() {
                    let d = theta[i] - anchor[i];
                    let w = mcfg.lambda_l * imp[i] + mcfg.lambda_t * topo[i];
                    value += w * d * d;
                    grad[i] += 2.0 * w * d;
                }
            }
        }
    }
    // add onto existing gradients
    let mut off = 0;
    for p in &mut model.params {
        let n = p.value.numel();
        p.value.accumulate_grad(&grad[off..off + n]);
        off += n;
    }
    Ok(value)
}

fn flatten_named(model: &Model, named: &BTreeMap<String, Vec<f64>>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(model.param_count());
    for p in &model.params {
        let v = named.get(&p.name).ok_or_else(|| CglError::InvalidData {
            detail: format!("anchor missing parameter `{}`", p.name),
        })?;
        out.extend_from_slice(v);
    }
    Ok(out)
}

// ── LwF ─────────────────────────────────────────────────────────────

/// Temperature-softened probabilities of `logits` over the masked
/// columns; inactive columns are zero.
pub fn soften_probs(logits: &[f64], rows: usize, cols: usize, mask: &[bool], temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let mut m = f64::NEG_INFINITY;
        for c in 0..cols {
            if mask[c] && row[c] / temperature > m {
                m = row[c] / temperature;
            }
        }
        let mut denom = 0.0;
        for c in 0..cols {
            if mask[c] {
                denom += libm::exp(row[c] / temperature - m);
            }
        }
        for c in 0..cols {
            if mask[c] {
                out[r * cols + c] = libm::exp(row[c] / temperature - m) / denom;
            }
        }
    }
    out
}

/// CE(labels) + λ·T²·CE(softened old probs, softened new probs) over the
/// old classes, mean over the batch.
#[allow(clippy::too_many_arguments)]
pub fn lwf_loss(
    tape: &mut Tape,
    new_logits: VarId,
    labels: &[usize],
    active_mask: &[bool],
    old_probs_softened: &[f64],
    old_mask: &[bool],
    lambda_dist: f64,
    temperature: f64,
) -> Result<VarId> {
    if temperature <= 0.0 {
        return Err(CglError::InvalidConfig {
            detail: format!("temperature must be positive, got {temperature}"),
        });
    }
    let ce = tape.cross_entropy(new_logits, labels, active_mask)?;
    let distill = lwf_distillation(
        tape,
        new_logits,
        old_probs_softened,
        old_mask,
        lambda_dist,
        temperature,
        labels.len(),
    )?;
    tape.add(ce, distill)
}

/// The distillation term alone: λ·T²·(−Σ p_old · log softmax(new/T))/B.
pub fn lwf_distillation(
    tape: &mut Tape,
    new_logits: VarId,
    old_probs_softened: &[f64],
    old_mask: &[bool],
    lambda_dist: f64,
    temperature: f64,
    batch: usize,
) -> Result<VarId> {
    let shape = tape.shape(new_logits).to_vec();
    let scaled = tape.scale(new_logits, 1.0 / temperature);
    let lsm = tape.log_softmax_masked(scaled, old_mask)?;
    let p_old = tape.constant(shape, old_probs_softened.to_vec());
    let prod = tape.mul(lsm, p_old)?;
    let s = tape.sum_all(prod);
    Ok(tape.scale(s, -lambda_dist * temperature * temperature / batch as f64))
}

// ── replay / memory ─────────────────────────────────────────────────

/// Current train split plus every stored sample.
pub fn replay_mix(current_train: &[usize], memory: &EpisodicMemory) -> Vec<usize> {
    let mut out = current_train.to_vec();
    out.extend(memory.all_indices());
    out
}

/// Store ⌈frac·n⌉ uniformly sampled (without replacement) train indices
/// of the finished task.
pub fn update_memory(
    memory: &mut EpisodicMemory,
    task_id: usize,
    train: &[usize],
    frac: f64,
    seed: u64,
) -> Result<()> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(CglError::InvalidConfig {
            detail: format!("frac_memories must be in (0,1], got {frac}"),
        });
    }
    let n = train.len();
    let cap = ceil_frac(frac, n).min(n);
    let mut pool = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task_id as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D));
    pool.shuffle(&mut rng);
    pool.truncate(cap);
    memory.per_task.push((task_id, pool));
    Ok(())
}

fn ceil_frac(frac: f64, n: usize) -> usize {
    libm::ceil(frac * n as f64) as usize
}

// ── training ────────────────────────────────────────────────────────

/// Train the model on the curriculum's `k`-th task (presentation order)
/// under the configured strategy, updating the method state at task end.
/// Returns the final epoch's total loss.
pub fn train_task<S: SampleStore + ?Sized>(
    model: &mut Model,
    state: &mut MethodState,
    store: &S,
    curriculum: &Curriculum,
    k: usize,
    mcfg: &MethodConfig,
    tcfg: &TrainerConfig,
    graph: &SkeletonGraph,
) -> Result<f64> {
    mcfg.validate()?;
    let task = &curriculum.tasks[k];
    if state.completed.contains(&task.task_id) {
        return Err(CglError::InvalidConfig {
            detail: format!("task {} already trained", task.task_id),
        });
    }
    let num_classes = model.config.num_classes;
    let active = curriculum.seen_classes(k);
    let mask = class_mask(&active, num_classes);
    let old_classes: Vec<usize> = if k > 0 { curriculum.seen_classes(k - 1) } else { Vec::new() };
    let old_mask = class_mask(&old_classes, num_classes);

    // training pool per strategy
    let train_idx: Vec<usize> = match mcfg.method {
        MethodKind::Joint => curriculum.tasks[..=k]
            .iter()
            .flat_map(|t| t.train.iter().copied())
            .collect(),
        MethodKind::Replay => replay_mix(&task.train, &state.memory),
        _ => task.train.clone(),
    };
    let (batch, labels) = assemble_batch(store, &train_idx)?;

    // frozen-model outputs are constant across epochs
    let lwf_old = if mcfg.method == MethodKind::Lwf {
        state.old_model.as_ref().map(|old| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let bound = old.bind(&mut tape);
            let (logits, _) = forward(old, &bound, &mut tape, &batch, graph)?;
            Ok(soften_probs(
                tape.value(logits),
                labels.len(),
                num_classes,
                &old_mask,
                mcfg.temperature,
            ))
        })
    } else {
        None
    };
    let lwf_old = match lwf_old {
        Some(r) => Some(r?),
        None => None,
    };

    // GEM memory batches, assembled once
    let gem_memories: Vec<(Tensor, Vec<usize>)> = if mcfg.method == MethodKind::Gem {
        state
            .memory
            .per_task
            .iter()
            .map(|(_, idx)| assemble_batch(store, idx))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut last_loss = 0.0;
    for _epoch in 0..tcfg.epochs {
        model.zero_grads();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (logits, _) = forward(model, &bound, &mut tape, &batch, graph)?;
        let loss = match (&lwf_old, mcfg.method) {
            (Some(old_probs), MethodKind::Lwf) => lwf_loss(
                &mut tape,
                logits,
                &labels,
                &mask,
                old_probs,
                &old_mask,
                mcfg.lambda_dist,
                mcfg.temperature,
            )?,
            _ => tape.cross_entropy(logits, &labels, &mask)?,
        };
        tape.backward(loss)?;
        model.absorb_grads(&tape, &bound);
        last_loss = tape.value(loss)[0];

        if matches!(mcfg.method, MethodKind::Ewc | MethodKind::Mas | MethodKind::Twp) {
            last_loss += apply_penalties(model, &state.penalties, mcfg)?;
        }
        if mcfg.method == MethodKind::Twp && mcfg.beta > 0.0 {
            last_loss += add_gradient_norm_term(model, store, &train_idx, &mask, graph, mcfg.beta, &batch, &labels)?;
        }
        if mcfg.method == MethodKind::Gem && !gem_memories.is_empty() {
            let flat = model.flat_grad()?;
            let mem_grads = gem_memories
                .iter()
                .map(|(mb, ml)| grad_of_batch(model, mb, ml, &mask, graph))
                .collect::<Result<Vec<_>>>()?;
            let projected = gem_project(&flat, &mem_grads, mcfg.memory_strength)?;
            model.set_flat_grad(&projected)?;
        }
        model.sgd_step(tcfg.learning_rate)?;
    }

    // task-end state updates
    let per_sample_fwd = |m: &Model, b: &Bound, t: &mut Tape, input: &Tensor| forward(m, b, t, input, graph);
    match mcfg.method {
        MethodKind::Ewc => {
            let samples = singles(store, &task.train);
            let fisher = ewc_after_task(model, &samples, &mask, &per_sample_fwd)?;
            state.penalties.push(PenaltyRecord {
                task_id: task.task_id,
                kind: PenaltyKind::Ewc,
                importance: fisher,
                topology: None,
                anchor: anchor_of(model),
            });
        }
        MethodKind::Mas => {
            let samples: Vec<Tensor> = singles(store, &task.train).into_iter().map(|(t, _)| t).collect();
            let omega = mas_after_task(model, &samples, &mask, &per_sample_fwd)?;
            state.penalties.push(PenaltyRecord {
                task_id: task.task_id,
                kind: PenaltyKind::Mas,
                importance: omega,
                topology: None,
                anchor: anchor_of(model),
            });
        }
        MethodKind::Twp => {
            let samples = singles(store, &task.train);
            let (loss_imp, topo_imp) = twp_after_task(model, &samples, &mask, &per_sample_fwd)?;
            state.penalties.push(PenaltyRecord {
                task_id: task.task_id,
                kind: PenaltyKind::Twp,
                importance: loss_imp,
                topology: Some(topo_imp),
                anchor: anchor_of(model),
            });
        }
        MethodKind::Lwf => {
            state.old_model = Some(crate::graph::clone_model(model));
        }
        MethodKind::Gem | MethodKind::Replay => {
            update_memory(&mut state.memory, task.task_id, &task.train, mcfg.frac_memories, tcfg.seed)?;
        }
        MethodKind::Bare | MethodKind::Joint => {}
    }
    state.completed.push(task.task_id);
    Ok(last_loss)
}

fn singles<S: SampleStore + ?Sized>(store: &S, indices: &[usize]) -> Vec<(Tensor, usize)> {
    indices
        .iter()
        .map(|&i| {
            let t = store.input(i);
            let mut shape = vec![1];
            shape.extend_from_slice(&t.shape);
            (
                Tensor { shape, data: t.data.clone(), requires_grad: false, grad: None },
                store.label(i),
            )
        })
        .collect()
}

/// Flat CE gradient for one batch at the current parameters; the
/// model's own gradients are left untouched.
fn grad_of_batch(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    mask: &[bool],
    graph: &SkeletonGraph,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (logits, _) = forward(model, &bound, &mut tape, batch, graph)?;
    let loss = tape.cross_entropy(logits, labels, mask)?;
    tape.backward(loss)?;
    Ok(flat_leaf_grads(model, &tape, &bound))
}

/// TWP's flat-minimum term β‖∇L‖₂, differentiated without higher-order
/// tape support: ∇(‖g‖) = Hg/‖g‖, and the Hessian-vector product is a
/// central finite difference of the gradient along g/‖g‖.
#[allow(clippy::too_many_arguments)]
fn add_gradient_norm_term<S: SampleStore + ?Sized>(
    model: &mut Model,
    _store: &S,
    _train_idx: &[usize],
    mask: &[bool],
    graph: &SkeletonGraph,
    beta: f64,
    batch: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let g0 = grad_of_batch(model, batch, labels, mask, graph)?;
    let norm = libm::sqrt(g0.iter().map(|v| v * v).sum::<f64>());
    if norm == 0.0 {
        return Ok(0.0);
    }
    let eps = 1e-5;
    let theta = model.flat_params();
    let dir: Vec<f64> = g0.iter().map(|v| v / norm).collect();
    let plus: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t - eps * d).collect();
    model.set_flat_params(&plus)?;
    let gp = grad_of_batch(model, batch, labels, mask, graph)?;
    model.set_flat_params(&minus)?;
    let gm = grad_of_batch(model, batch, labels, mask, graph)?;
    model.set_flat_params(&theta)?;
    let hvp: Vec<f64> = gp
        .iter()
        .zip(&gm)
        .map(|(p, m)| beta * (p - m) / (2.0 * eps))
        .collect();
    let mut off = 0;
    for p in &mut model.params {
        let n = p.value.numel();
        p.value.accumulate_grad(&hvp[off..off + n]);
        off += n;
    }
    Ok(beta * norm)
}

// ── evaluation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Val,
    Test,
}

/// One accuracy-matrix row: a_{k,j} for j ≤ k plus per-class accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task_accuracies: Vec<f64>,
    pub class_accuracies: BTreeMap<usize, f64>,
}

/// Evaluate after training through task `k`: argmax over all classes
/// seen up to `k`, macro-averaged per task over its classes.
pub fn evaluate<S: SampleStore + ?Sized>(
    model: &Model,
    store: &S,
    curriculum: &Curriculum,
    k: usize,
    graph: &SkeletonGraph,
    split: EvalSplit,
) -> Result<EvalRow> {
    let num_classes = model.config.num_classes;
    let seen = curriculum.seen_classes(k);
    let mask = class_mask(&seen, num_classes);
    let mut class_correct: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for task in &curriculum.tasks[..=k] {
        let indices = match split {
            EvalSplit::Val => &task.val,
            EvalSplit::Test => &task.test,
        };
        let (batch, labels) = assemble_batch(store, indices)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (logits, _) = forward(model, &bound, &mut tape, &batch, graph)?;
        let vals = tape.value(logits);
        for (r, &y) in labels.iter().enumerate() {
            let row = &vals[r * num_classes..(r + 1) * num_classes];
            let mut best = f64::NEG_INFINITY;
            let mut pred = usize::MAX;
            for (c, &v) in row.iter().enumerate() {
                if mask[c] && v > best {
                    best = v;
                    pred = c;
                }
            }
            let e = class_correct.entry(y).or_insert((0, 0));
            e.1 += 1;
            if pred == y {
                e.0 += 1;
            }
        }
    }
    let class_accuracies: BTreeMap<usize, f64> = class_correct
        .iter()
        .map(|(&c, &(hit, n))| (c, hit as f64 / n as f64))
        .collect();
    let task_accuracies = curriculum.tasks[..=k]
        .iter()
        .map(|t| {
            let accs: Vec<f64> = t
                .class_ids
                .iter()
                .filter_map(|c| class_accuracies.get(c).copied())
                .collect();
            accs.iter().sum::<f64>() / accs.len() as f64
        })
        .collect();
    Ok(EvalRow { task_accuracies, class_accuracies })
}
