//! Skeleton-sequence datasets and class-incremental curricula.
//!
//! Tasks hold two disjoint classes each with stratified 8:1:1
//! train/val/test splits. Task-order permutation keeps the canonical
//! class pairs; class-order shuffling rebuilds tasks from a permuted
//! class list. The synthetic generator produces separable oscillatory
//! joint motion per class at desk scale.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CglError, Result};
use crate::tensor::Tensor;

/// Shape contract of a dataset (Table-1 style profile).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetProfile {
    pub joints: usize,
    pub frames: usize,
    pub num_classes: usize,
}

impl DatasetProfile {
    /// N-UCLA-like: 20 joints, 52 frames, 10 classes.
    pub fn ucla() -> Self {
        DatasetProfile { joints: 20, frames: 52, num_classes: 10 }
    }

    /// NTU-like: 25 joints, 300 frames, 10 classes.
    pub fn ntu() -> Self {
        DatasetProfile { joints: 25, frames: 300, num_classes: 10 }
    }
}

/// A labeled motion sample: `frames × joints × 3` coordinates.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SkeletonSequence {
    pub coords: Vec<f64>,
    pub label: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dataset {
    pub profile: DatasetProfile,
    pub sequences: Vec<SkeletonSequence>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let expect = self.profile.frames * self.profile.joints * 3;
        for (i, s) in self.sequences.iter().enumerate() {
            if s.coords.len() != expect {
                return Err(CglError::InvalidData {
                    detail: format!(
                        "sequence {i}: coord length {} != frames*joints*3 = {expect}",
                        s.coords.len()
                    ),
                });
            }
            if s.label >= self.profile.num_classes {
                return Err(CglError::InvalidData {
                    detail: format!("sequence {i}: unknown class id {}", s.label),
                });
            }
            if !s.coords.iter().all(|v| v.is_finite()) {
                return Err(CglError::InvalidData {
                    detail: format!("sequence {i}: non-finite coordinate"),
                });
            }
        }
        Ok(())
    }
}

/// Row j is joint j's frame-ordered (x,y,z) concatenation: `joints × 3·frames`.
pub fn preprocess_gcn(seq: &SkeletonSequence, profile: &DatasetProfile) -> Tensor {
    let (frames, joints) = (profile.frames, profile.joints);
    let mut out = vec![0.0; joints * 3 * frames];
    for t in 0..frames {
        for j in 0..joints {
            for d in 0..3 {
                out[j * (3 * frames) + t * 3 + d] = seq.coords[t * joints * 3 + j * 3 + d];
            }
        }
    }
    Tensor { shape: vec![joints, 3 * frames], data: out, requires_grad: false, grad: None }
}

/// `frames × joints × 3` tensor view for ST-GCN.
pub fn preprocess_stgcn(seq: &SkeletonSequence, profile: &DatasetProfile) -> Tensor {
    Tensor {
        shape: vec![profile.frames, profile.joints, 3],
        data: seq.coords.clone(),
        requires_grad: false,
        grad: None,
    }
}

/// One task: two (by default) classes with index-based splits into the
/// owning dataset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskSpec {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OrderKind {
    Canonical,
    TaskPermutation,
    ClassShuffle,
}

/// Ordered task sequence one continual run consumes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Curriculum {
    pub tasks: Vec<TaskSpec>,
    pub order_kind: OrderKind,
    /// Human-readable permutation descriptor, e.g. "task:2-0-1".
    pub order_id: String,
}

impl Curriculum {
    /// Classes seen after presenting tasks `0..=k` (presentation order).
    pub fn seen_classes(&self, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.tasks[..=k]
            .iter()
            .flat_map(|t| t.class_ids.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Cross-task class disjointness plus full class coverage.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = vec![false; num_classes];
        for t in &self.tasks {
            for &c in &t.class_ids {
                if c >= num_classes || seen[c] {
                    return Err(CglError::InvalidData {
                        detail: format!("class {c} missing or duplicated across tasks"),
                    });
                }
                seen[c] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(CglError::InvalidData {
                detail: String::from("curriculum does not cover all classes"),
            });
        }
        Ok(())
    }
}

/// Stratified per-class 8:1:1 split and disjoint-class task assembly.
/// Task i holds classes `class_order[cpt*i .. cpt*(i+1)]`.
pub fn build_tasks(
    dataset: &Dataset,
    class_order: &[usize],
    classes_per_task: usize,
    split_seed: u64,
) -> Result<Curriculum> {
    let ncls = dataset.profile.num_classes;
    if class_order.len() != ncls {
        return Err(CglError::InvalidPermutation {
            detail: format!("class order length {} != {ncls}", class_order.len()),
        });
    }
    let mut seen = vec![false; ncls];
    for &c in class_order {
        if c >= ncls || seen[c] {
            return Err(CglError::InvalidPermutation {
                detail: format!("duplicate or out-of-range class {c}"),
            });
        }
        seen[c] = true;
    }
    if ncls % classes_per_task != 0 {
        return Err(CglError::InvalidConfig {
            detail: format!("{ncls} classes not divisible by {classes_per_task} per task"),
        });
    }

    // per-class deterministic shuffled index pools
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ncls];
    for (i, s) in dataset.sequences.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut splits: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = Vec::with_capacity(ncls);
    for (c, pool) in by_class.iter().enumerate() {
        let mut pool = pool.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        pool.shuffle(&mut rng);
        let n = pool.len();
        let n_val = (n + 5) / 10; // nearest to n/10
        let n_test = (n + 5) / 10;
        let n_train = n - n_val - n_test;
        let train = pool[..n_train].to_vec();
        let val = pool[n_train..n_train + n_val].to_vec();
        let test = pool[n_train + n_val..].to_vec();
        splits.push((train, val, test));
    }

    let b = ncls / classes_per_task;
    let mut tasks = Vec::with_capacity(b);
    for i in 0..b {
        let class_ids = class_order[i * classes_per_task..(i + 1) * classes_per_task].to_vec();
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for &c in &class_ids {
            train.extend_from_slice(&splits[c].0);
            val.extend_from_slice(&splits[c].1);
            test.extend_from_slice(&splits[c].2);
        }
        tasks.push(TaskSpec { task_id: i, class_ids, train, val, test });
    }
    let canonical = class_order.windows(1).count() == ncls
        && class_order.iter().enumerate().all(|(i, &c)| i == c);
    Ok(Curriculum {
        tasks,
        order_kind: if canonical { OrderKind::Canonical } else { OrderKind::ClassShuffle },
        order_id: if canonical {
            String::from("canonical")
        } else {
            format!("class:{}", join_ids(class_order))
        },
    })
}

fn join_ids(ids: &[usize]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push('-');
        }
        s.push_str(&format!("{id}"));
    }
    s
}

/// Reorder task presentation; class memberships and splits untouched.
pub fn permute_task_order(curriculum: &Curriculum, permutation: &[usize]) -> Result<Curriculum> {
    let b = curriculum.tasks.len();
    if permutation.len() != b {
        return Err(CglError::InvalidPermutation {
            detail: format!("permutation length {} != {b} tasks", permutation.len()),
        });
    }
    let mut seen = vec![false; b];
    for &p in permutation {
        if p >= b || seen[p] {
            return Err(CglError::InvalidPermutation {
                detail: format!("duplicate or out-of-range task {p}"),
            });
        }
        seen[p] = true;
    }
    let tasks = permutation.iter().map(|&p| curriculum.tasks[p].clone()).collect();
    let identity = permutation.iter().enumerate().all(|(i, &p)| i == p);
    Ok(Curriculum {
        tasks,
        order_kind: if identity { curriculum.order_kind } else { OrderKind::TaskPermutation },
        order_id: if identity {
            curriculum.order_id.clone()
        } else {
            format!("task:{}", join_ids(permutation))
        },
    })
}

/// A task order over canonical pairs is the class order obtained by
/// concatenating each task's canonical classes in permuted order.
pub fn task_order_to_class_order(
    permutation: &[usize],
    classes_per_task: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(permutation.len() * classes_per_task);
    for &t in permutation {
        for c in 0..classes_per_task {
            out.push(t * classes_per_task + c);
        }
    }
    out
}

/// Class-specific oscillatory joint motion plus noise. Each class gets
/// per-joint frequencies, phases, amplitudes and DC offsets drawn from
/// the class seed, which keeps the classes linearly separable while
/// sharing the coordinate range.
pub fn generate_synthetic(
    profile: &DatasetProfile,
    seqs_per_class: usize,
    seed: u64,
) -> Dataset {
    let (frames, joints, ncls) = (profile.frames, profile.joints, profile.num_classes);
    let mut sequences = Vec::with_capacity(ncls * seqs_per_class);
    let noise_sigma = 0.05;
    for c in 0..ncls {
        let mut crng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
        // class signature: per joint, per axis
        let n_sig = joints * 3;
        let freq: Vec<f64> = (0..n_sig).map(|_| crng.gen_range(0.5..3.0)).collect();
        let phase: Vec<f64> = (0..n_sig).map(|_| crng.gen_range(0.0..core::f64::consts::TAU)).collect();
        let amp: Vec<f64> = (0..n_sig).map(|_| crng.gen_range(0.4..1.2)).collect();
        let offset: Vec<f64> = (0..n_sig).map(|_| crng.gen_range(-1.0..1.0)).collect();
        for s in 0..seqs_per_class {
            let mut srng = ChaCha8Rng::seed_from_u64(
                seed ^ ((c * seqs_per_class + s) as u64 + 1).wrapping_mul(0xE703_7ED1_A0B4_28DB),
            );
            let jitter: f64 = srng.gen_range(-0.3..0.3);
            let mut coords = vec![0.0; frames * joints * 3];
            for t in 0..frames {
                let tt = t as f64 / frames as f64;
                for j in 0..joints {
                    for d in 0..3 {
                        let k = j * 3 + d;
                        let clean = offset[k]
                            + amp[k]
                                * libm::sin(core::f64::consts::TAU * freq[k] * tt + phase[k] + jitter);
                        coords[t * joints * 3 + j * 3 + d] =
                            clean + noise_sigma * gauss(&mut srng);
                    }
                }
            }
            sequences.push(SkeletonSequence {
                coords,
                label: c,
                source_id: format!("synth-{c}-{s}"),
            });
        }
    }
    Dataset { profile: *profile, sequences }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Uniform random permutation of `0..n` from a seeded generator.
pub fn sample_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// All permutations of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
    out
}
