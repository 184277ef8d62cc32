//! Post-hoc analysis of a result store: metric reports, integrity
//! verification, and plot-data emission.

use std::collections::BTreeMap;

use cgl_core::metrics::{
    af_upper_bound, bound_rows, order_dispersion, scatter_rows, AccuracyMatrix, PlotRow,
};
use serde::Serialize;

use crate::orchestrate::{outcomes_for, BenchResult};
use crate::store::{RunRecord, ResultStore};

#[derive(Debug, Clone, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

fn stat(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Stat { mean, std }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    #[serde(rename = "AA")]
    pub aa: Stat,
    #[serde(rename = "AF")]
    pub af: Stat,
    #[serde(rename = "AOPD")]
    pub aopd: Option<f64>,
    #[serde(rename = "MOPD")]
    pub mopd: Option<f64>,
    pub runs: usize,
}

pub type MetricReport = BTreeMap<String, MethodReport>;

/// Verify every record's content hash and the forgetting upper bound on
/// every stored matrix, then summarize per method.
pub fn analyze(store: &ResultStore) -> BenchResult<MetricReport> {
    let records = store.load_all()?;
    if records.is_empty() {
        return Err("no records in store".into());
    }
    for r in &records {
        let expect = RunRecord::compute_hash(&r.key, r.seed, &r.accuracy_matrix, &r.class_accuracies);
        if expect != r.hash {
            return Err(format!("integrity failure: {} hash mismatch", r.key.canonical()).into());
        }
        check_bound(r)?;
    }
    let mut methods: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in &records {
        methods.entry(r.key.method.clone()).or_default().push(r);
    }
    let mut report = MetricReport::new();
    for (method, runs) in methods {
        let mut aas = Vec::new();
        let mut afs = Vec::new();
        for r in &runs {
            let m = AccuracyMatrix { rows: r.accuracy_matrix.clone() };
            let last = m.num_tasks() - 1;
            aas.push(m.average_accuracy(last)?);
            if last > 0 {
                afs.push(m.average_forgetting(last)?);
            }
        }
        let outcomes = outcomes_for(&records, &method);
        let (aopd, mopd) = if outcomes.len() >= 2 {
            let s = order_dispersion(&outcomes)?;
            (Some(s.aopd), Some(s.mopd))
        } else {
            (None, None)
        };
        report.insert(
            method,
            MethodReport { aa: stat(&aas), af: stat(&afs), aopd, mopd, runs: runs.len() },
        );
    }
    Ok(report)
}

fn check_bound(r: &RunRecord) -> BenchResult<()> {
    let m = AccuracyMatrix { rows: r.accuracy_matrix.clone() };
    for k in 1..m.num_tasks() {
        let af = m.average_forgetting(k)?;
        let bound = af_upper_bound(k + 1, m.average_accuracy(k)?, m.entry(k, k)?)?;
        if af > bound + 1e-9 {
            return Err(format!(
                "forgetting bound violated by {} at task {k}: AF {af} > {bound}",
                r.key.canonical()
            )
            .into());
        }
    }
    Ok(())
}

/// One scatter point per run (x = final AA, y = final AF) per method
/// series, plus the theoretical frontier as series `af_bound`.
pub fn scatter_csv(store: &ResultStore, bound_samples: usize) -> BenchResult<String> {
    let records = store.load_all()?;
    if records.is_empty() {
        return Err("no records in store".into());
    }
    let mut methods: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut num_tasks = 0;
    for r in &records {
        let m = AccuracyMatrix { rows: r.accuracy_matrix.clone() };
        let last = m.num_tasks() - 1;
        if last == 0 {
            continue;
        }
        num_tasks = num_tasks.max(m.num_tasks());
        methods
            .entry(r.key.method.clone())
            .or_default()
            .push((m.average_accuracy(last)?, m.average_forgetting(last)?));
    }
    if num_tasks < 2 {
        return Err("scatter needs runs with at least two tasks".into());
    }
    let mut rows: Vec<PlotRow> = Vec::new();
    for (method, points) in &methods {
        rows.extend(scatter_rows(method, points));
    }
    rows.extend(bound_rows(num_tasks, bound_samples)?);
    let mut out = String::from("series,x,y\n");
    for (series, x, y) in rows {
        out.push_str(&format!("{series},{x},{y}\n"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::RecordKey;

    fn record(method: &str, repeat: usize, rows: Vec<Vec<f64>>) -> RunRecord {
        let key = RecordKey {
            method: method.into(),
            order_id: "canonical".into(),
            repeat,
            arch: "gcn-d2-w64".into(),
            dataset: "synth".into(),
        };
        let classes: BTreeMap<usize, f64> = [(0, 0.5)].into_iter().collect();
        let final_task: BTreeMap<usize, f64> = rows
            .last()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(t, &a)| (t, a))
            .collect();
        let hash = RunRecord::compute_hash(&key, 1, &rows, &classes);
        RunRecord {
            key,
            seed: 1,
            accuracy_matrix: rows,
            class_accuracies: classes,
            final_task_accuracies: final_task,
            wall_time_ms: 0,
            hash,
        }
    }

    #[test]
    fn analyze_empty_store_errors() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path()).unwrap();
        let err = analyze(&store).unwrap_err();
        assert!(format!("{err}").contains("no records"));
    }

    #[test]
    fn analyze_summarizes_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path()).unwrap();
        store.put(&record("bare", 0, vec![vec![0.9], vec![0.2, 0.8]])).unwrap();
        store.put(&record("bare", 1, vec![vec![0.9], vec![0.4, 0.8]])).unwrap();
        let report = analyze(&store).unwrap();
        let bare = &report["bare"];
        assert_eq!(bare.runs, 2);
        assert!((bare.aa.mean - (0.5 + 0.6) / 2.0).abs() < 1e-12);
        assert!((bare.af.mean - (0.7 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn analyze_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path()).unwrap();
        let mut r = record("bare", 0, vec![vec![0.9], vec![0.2, 0.8]]);
        r.accuracy_matrix[1][0] = 0.3; // edited without re-hashing
        store.put(&r).unwrap();
        let err = analyze(&store).unwrap_err();
        assert!(format!("{err}").contains("integrity"));
    }

    #[test]
    fn scatter_has_points_and_bound() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path()).unwrap();
        store.put(&record("bare", 0, vec![vec![0.9], vec![0.2, 0.8]])).unwrap();
        let csv = scatter_csv(&store, 5).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "series,x,y");
        assert!(lines.iter().any(|l| l.starts_with("bare,")));
        assert_eq!(lines.iter().filter(|l| l.starts_with("af_bound,")).count(), 5);
        // every point must sit on or below the bound at its AA
        let m = AccuracyMatrix { rows: vec![vec![0.9], vec![0.2, 0.8]] };
        let aa = m.average_accuracy(1).unwrap();
        let af = m.average_forgetting(1).unwrap();
        assert!(af <= af_upper_bound(2, aa, 1.0).unwrap() + 1e-9);
    }
}
