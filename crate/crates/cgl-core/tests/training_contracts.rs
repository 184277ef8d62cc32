//! Cross-method trainer contracts: data-access discipline during a task
//! and first-task equivalence to the bare baseline.

use std::cell::RefCell;
use std::collections::BTreeSet;

use cgl_core::data::{build_tasks, generate_synthetic, Curriculum, DatasetProfile};
use cgl_core::graph::{build_backbone, BackboneConfig, Model, SkeletonGraph};
use cgl_core::methods::{
    train_task, MethodConfig, MethodKind, MethodState, PreparedDataset, SampleStore, TrainerConfig,
};
use cgl_core::tensor::Tensor;

struct AuditStore<'a> {
    inner: &'a PreparedDataset,
    accessed: RefCell<BTreeSet<usize>>,
}

impl<'a> AuditStore<'a> {
    fn new(inner: &'a PreparedDataset) -> Self {
        AuditStore { inner, accessed: RefCell::new(BTreeSet::new()) }
    }
    fn reset(&self) {
        self.accessed.borrow_mut().clear();
    }
    fn seen(&self) -> BTreeSet<usize> {
        self.accessed.borrow().clone()
    }
}

impl SampleStore for AuditStore<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn input(&self, idx: usize) -> &Tensor {
        self.accessed.borrow_mut().insert(idx);
        self.inner.input(idx)
    }
    fn label(&self, idx: usize) -> usize {
        self.accessed.borrow_mut().insert(idx);
        self.inner.label(idx)
    }
}

fn fixture() -> (PreparedDataset, Curriculum, SkeletonGraph, Model) {
    let profile = DatasetProfile { joints: 4, frames: 6, num_classes: 6 };
    let dataset = generate_synthetic(&profile, 6, 42);
    let curriculum = build_tasks(&dataset, &(0..6).collect::<Vec<_>>(), 2, 7).unwrap();
    let graph = SkeletonGraph::chain(profile.joints).unwrap();
    let mut cfg = BackboneConfig::gcn_default(3 * profile.frames, profile.num_classes);
    cfg.width = 8;
    cfg.head_width = 8;
    let model = build_backbone(&cfg, &graph, 5).unwrap();
    (PreparedDataset::gcn(&dataset), curriculum, graph, model)
}

fn short_trainer() -> TrainerConfig {
    TrainerConfig { epochs: 2, learning_rate: 0.01, seed: 1 }
}

#[test]
fn no_method_reads_future_tasks() {
    let (prepared, curriculum, graph, model) = fixture();
    let tcfg = short_trainer();
    let future: BTreeSet<usize> = {
        let t = &curriculum.tasks[2];
        t.train.iter().chain(&t.val).chain(&t.test).copied().collect()
    };
    let eval_splits: BTreeSet<usize> = curriculum
        .tasks
        .iter()
        .flat_map(|t| t.val.iter().chain(&t.test))
        .copied()
        .collect();

    for method in MethodKind::ALL {
        let mcfg = MethodConfig::defaults_for(method);
        let audit = AuditStore::new(&prepared);
        let mut m = cgl_core::graph::clone_model(&model);
        let mut state = MethodState::new(method);
        train_task(&mut m, &mut state, &audit, &curriculum, 0, &mcfg, &tcfg, &graph).unwrap();
        audit.reset();
        train_task(&mut m, &mut state, &audit, &curriculum, 1, &mcfg, &tcfg, &graph).unwrap();
        let seen = audit.seen();
        assert!(
            seen.is_disjoint(&future),
            "{}: read future task data during task 1",
            method.name()
        );
        assert!(
            seen.is_disjoint(&eval_splits),
            "{}: read evaluation splits during training",
            method.name()
        );
        // past-task training data only through the stored memory
        if method != MethodKind::Joint {
            let task0: BTreeSet<usize> = curriculum.tasks[0].train.iter().copied().collect();
            let stored: BTreeSet<usize> = state.memory.all_indices().into_iter().collect();
            let leaked: Vec<usize> = seen.intersection(&task0).filter(|i| !stored.contains(i)).copied().collect();
            assert!(leaked.is_empty(), "{}: read unsanctioned past samples {leaked:?}", method.name());
        }
    }
}

#[test]
fn first_task_matches_bare_trajectory() {
    let (prepared, curriculum, graph, model) = fixture();
    let tcfg = short_trainer();
    let reference = {
        let mut m = cgl_core::graph::clone_model(&model);
        let mut state = MethodState::new(MethodKind::Bare);
        let mcfg = MethodConfig::defaults_for(MethodKind::Bare);
        train_task(&mut m, &mut state, &prepared, &curriculum, 0, &mcfg, &tcfg, &graph).unwrap();
        m.flat_params()
    };
    for method in MethodKind::ALL {
        let mut mcfg = MethodConfig::defaults_for(method);
        if method == MethodKind::Twp {
            // the gradient-norm term is active from the first task by design
            mcfg.beta = 0.0;
        }
        let mut m = cgl_core::graph::clone_model(&model);
        let mut state = MethodState::new(method);
        train_task(&mut m, &mut state, &prepared, &curriculum, 0, &mcfg, &tcfg, &graph).unwrap();
        assert_eq!(m.flat_params(), reference, "{} diverged on the first task", method.name());
    }
}

#[test]
fn twp_beta_changes_first_task() {
    let (prepared, curriculum, graph, model) = fixture();
    let tcfg = short_trainer();
    let run = |beta: f64| {
        let mut mcfg = MethodConfig::defaults_for(MethodKind::Twp);
        mcfg.beta = beta;
        let mut m = cgl_core::graph::clone_model(&model);
        let mut state = MethodState::new(MethodKind::Twp);
        train_task(&mut m, &mut state, &prepared, &curriculum, 0, &mcfg, &tcfg, &graph).unwrap();
        m.flat_params()
    };
    assert_ne!(run(0.0), run(0.5));
}

#[test]
fn repeated_task_rejected() {
    let (prepared, curriculum, graph, model) = fixture();
    let tcfg = short_trainer();
    let mcfg = MethodConfig::defaults_for(MethodKind::Bare);
    let mut m = cgl_core::graph::clone_model(&model);
    let mut state = MethodState::new(MethodKind::Bare);
    train_task(&mut m, &mut state, &prepared, &curriculum, 0, &mcfg, &tcfg, &graph).unwrap();
    assert!(train_task(&mut m, &mut state, &prepared, &curriculum, 0, &mcfg, &tcfg, &graph).is_err());
}

#[test]
fn same_seed_same_parameters_across_full_runs() {
    let (prepared, curriculum, graph, model) = fixture();
    let tcfg = short_trainer();
    let run = || {
        let mcfg = MethodConfig::defaults_for(MethodKind::Replay);
        let mut m = cgl_core::graph::clone_model(&model);
        let mut state = MethodState::new(MethodKind::Replay);
        for k in 0..curriculum.tasks.len() {
            train_task(&mut m, &mut state, &prepared, &curriculum, k, &mcfg, &tcfg, &graph).unwrap();
        }
        m.flat_params()
    };
    assert_eq!(run(), run());
}
