//! Metric implementations against independent brute-force recomputation,
//! plus a large fuzz of the forgetting upper bound.

use std::collections::BTreeMap;

use cgl_core::metrics::{af_upper_bound, order_dispersion, AccuracyMatrix, OrderOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, b: usize) -> AccuracyMatrix {
    let mut m = AccuracyMatrix::new();
    for k in 0..b {
        let row: Vec<f64> = (0..=k).map(|_| rng.gen_range(0.0..=1.0)).collect();
        m.push_row(row).unwrap();
    }
    m
}

#[test]
fn accuracy_and_forgetting_match_naive_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let b = rng.gen_range(2..=6);
        let m = random_matrix(&mut rng, b);
        for k in 0..b {
            // naive AA
            let mut s = 0.0;
            for j in 0..=k {
                s += m.entry(k, j).unwrap();
            }
            let aa = s / (k + 1) as f64;
            assert!((m.average_accuracy(k).unwrap() - aa).abs() <= 1e-12);
        }
        for k in 1..b {
            // naive AF via explicit running max
            let mut total = 0.0;
            for j in 0..k {
                let mut best = m.entry(j, j).unwrap();
                for l in j + 1..k {
                    let v = m.entry(l, j).unwrap();
                    if v > best {
                        best = v;
                    }
                }
                total += best - m.entry(k, j).unwrap();
            }
            let af = total / k as f64;
            assert!((m.average_forgetting(k).unwrap() - af).abs() <= 1e-12);
        }
    }
}

#[test]
fn dispersion_matches_naive_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for _ in 0..50 {
        let tasks = rng.gen_range(2..=5usize);
        let runs = rng.gen_range(2..=8usize);
        let outcomes: Vec<OrderOutcome> = (0..runs)
            .map(|order_id| OrderOutcome {
                order_id,
                final_task_accuracy: (0..tasks).map(|t| (t, rng.gen_range(0.0..=1.0))).collect(),
            })
            .collect();
        let s = order_dispersion(&outcomes).unwrap();
        // naive per-task max/min scan
        let mut per: BTreeMap<usize, f64> = BTreeMap::new();
        for t in 0..tasks {
            let vals: Vec<f64> = outcomes.iter().map(|o| o.final_task_accuracy[&t]).collect();
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            per.insert(t, hi - lo);
        }
        let mopd = per.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        let aopd: f64 = per.values().sum::<f64>() / tasks as f64;
        for t in 0..tasks {
            assert!((s.per_task[&t] - per[&t]).abs() <= 1e-12);
        }
        assert!((s.mopd - mopd).abs() <= 1e-12);
        assert!((s.aopd - aopd).abs() <= 1e-12);
    }
}

#[test]
fn forgetting_bound_fuzz_million_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(1_000_003);
    let mut checks = 0u64;
    for _ in 0..1_000_000 {
        let b = rng.gen_range(2..=6);
        let m = random_matrix(&mut rng, b);
        for k in 1..b {
            let af = m.average_forgetting(k).unwrap();
            let aa = m.average_accuracy(k).unwrap();
            let akk = m.entry(k, k).unwrap();
            let bound = af_upper_bound(k + 1, aa, akk).unwrap();
            assert!(af <= bound + 1e-9, "violation at k={k}: AF={af} bound={bound}");
            checks += 1;
        }
    }
    assert!(checks >= 1_000_000);
}
