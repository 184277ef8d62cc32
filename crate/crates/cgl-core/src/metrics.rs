//! Continual-learning metrics over the lower-triangular accuracy matrix
//! plus order-sensitivity dispersion across curricula.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CglError, Result};

/// Row `k` holds a_{k,j} for j = 0..=k: accuracy on task j's test split
/// after finishing training on task k.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(CglError::InvalidData {
                detail: format!(
                    "accuracy row {} must have {} entries, got {}",
                    self.rows.len(),
                    self.rows.len() + 1,
                    row.len()
                ),
            });
        }
        if let Some(&bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CglError::InvalidData {
                detail: format!("accuracy {bad} outside [0,1]"),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    /// a_{k,j}, 0-based.
    pub fn entry(&self, k: usize, j: usize) -> Result<f64> {
        self.rows
            .get(k)
            .and_then(|r| r.get(j))
            .copied()
            .ok_or_else(|| CglError::InvalidData {
                detail: format!("accuracy matrix has no entry ({k},{j})"),
            })
    }

    /// AA_k = (1/(k+1)) Σ_{j≤k} a_{k,j} (0-based row index).
    pub fn average_accuracy(&self, k: usize) -> Result<f64> {
        let row = self.rows.get(k).ok_or_else(|| CglError::InvalidData {
            detail: format!("accuracy matrix has no row {k}"),
        })?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// f_j^k = max_{l<k} a_{l,j} − a_{k,j}, defined for j < k.
    pub fn forgetting(&self, k: usize, j: usize) -> Result<f64> {
        if j >= k {
            return Err(CglError::InvalidData {
                detail: format!("forgetting needs j < k, got j={j}, k={k}"),
            });
        }
        let mut best = f64::NEG_INFINITY;
        for l in j..k {
            best = best.max(self.entry(l, j)?);
        }
        Ok(best - self.entry(k, j)?)
    }

    /// AF_k = (1/k) Σ_{j<k} f_j^k; undefined for the first task.
    pub fn average_forgetting(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(CglError::InvalidData {
                detail: String::from("average forgetting is undefined after the first task"),
            });
        }
        let mut sum = 0.0;
        for j in 0..k {
            sum += self.forgetting(k, j)?;
        }
        Ok(sum / k as f64)
    }
}

/// Upper bound AF_k ≤ 1 − (k/(k−1))·AA_k + (1/(k−1))·a_{k,k}, with k the
/// 1-based number of tasks seen (k ≥ 2).
pub fn af_upper_bound(num_tasks_seen: usize, average_acc: f64, current_task_acc: f64) -> Result<f64> {
    if num_tasks_seen < 2 {
        return Err(CglError::InvalidData {
            detail: format!("bound needs at least two tasks, got {num_tasks_seen}"),
        });
    }
    let k = num_tasks_seen as f64;
    Ok(1.0 - k / (k - 1.0) * average_acc + current_task_acc / (k - 1.0))
}

/// One curriculum's end state: final accuracy per task id.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OrderOutcome {
    pub order_id: usize,
    pub final_task_accuracy: BTreeMap<usize, f64>,
}

/// Per-task spread of final accuracy across orders plus its max and
/// mean over tasks.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OpdSummary {
    pub per_task: BTreeMap<usize, f64>,
    pub mopd: f64,
    pub aopd: f64,
}

/// OPD_t = max_r a_t − min_r a_t over the runs; MOPD = max_t OPD_t,
/// AOPD = mean_t OPD_t. Needs at least two runs covering the same tasks.
pub fn order_dispersion(outcomes: &[OrderOutcome]) -> Result<OpdSummary> {
    if outcomes.len() < 2 {
        return Err(CglError::InvalidData {
            detail: format!("dispersion needs at least two orders, got {}", outcomes.len()),
        });
    }
    let tasks: Vec<usize> = outcomes[0].final_task_accuracy.keys().copied().collect();
    let mut per_task = BTreeMap::new();
    for &t in &tasks {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for o in outcomes {
            let a = o.final_task_accuracy.get(&t).copied().ok_or_else(|| {
                CglError::InvalidData {
                    detail: format!("order {} is missing task {t}", o.order_id),
                }
            })?;
            lo = lo.min(a);
            hi = hi.max(a);
        }
        per_task.insert(t, hi - lo);
    }
    let mopd = per_task.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let aopd = per_task.values().sum::<f64>() / per_task.len() as f64;
    Ok(OpdSummary { per_task, mopd, aopd })
}

/// Pool two campaigns (e.g. task-order and class-order runs) into one
/// dispersion computation.
pub fn aggregate_campaigns(a: &[OrderOutcome], b: &[OrderOutcome]) -> Result<OpdSummary> {
    let mut all = Vec::with_capacity(a.len() + b.len());
    all.extend_from_slice(a);
    all.extend_from_slice(b);
    order_dispersion(&all)
}

/// A `(series, x, y)` plot row.
pub type PlotRow = (String, f64, f64);

/// Scatter points for one method series: x = AA_k, y = AF_k.
pub fn scatter_rows(series: &str, points: &[(f64, f64)]) -> Vec<PlotRow> {
    points
        .iter()
        .map(|&(aa, af)| (String::from(series), aa, af))
        .collect()
}

/// The theoretical frontier sampled on [0,1] with the current-task
/// accuracy pinned to 1: y = 1 − (k/(k−1))·x + 1/(k−1).
pub fn bound_rows(num_tasks_seen: usize, samples: usize) -> Result<Vec<PlotRow>> {
    if samples < 2 {
        return Err(CglError::InvalidData {
            detail: format!("bound line needs at least two samples, got {samples}"),
        });
    }
    let mut rows = Vec::with_capacity(samples);
    for i in 0..samples {
        let x = i as f64 / (samples - 1) as f64;
        rows.push((String::from("af_bound"), x, af_upper_bound(num_tasks_seen, x, 1.0)?));
    }
    Ok(rows)
}
