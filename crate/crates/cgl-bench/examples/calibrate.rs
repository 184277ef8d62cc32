use cgl_bench::orchestrate::*;
use cgl_core::data::{generate_synthetic, DatasetProfile};
use cgl_core::methods::{MethodConfig, MethodKind, TrainerConfig};
use cgl_core::metrics::AccuracyMatrix;
use std::time::Instant;

fn main() {
    let profile = DatasetProfile { joints: 20, frames: 24, num_classes: 10 };
    let dataset = generate_synthetic(&profile, 30, 1);
    let plan = ExperimentPlan {
        dataset_name: "cal".into(),
        methods: vec![
            (MethodKind::Bare, MethodConfig::defaults_for(MethodKind::Bare)),
            (MethodKind::Replay, MethodConfig::defaults_for(MethodKind::Replay)),
            (MethodKind::Joint, MethodConfig::defaults_for(MethodKind::Joint)),
        ],
        order_mode: OrderMode::Canonical,
        repeats: 1,
        arch: ArchSpec::default_gcn(),
        trainer: TrainerConfig::default(),
        classes_per_task: 2,
        master_seed: 7,
        workers: 1,
    };
    let prepared = cgl_core::methods::PreparedDataset::gcn(&dataset);
    let graph = cgl_core::graph::SkeletonGraph::chain(profile.joints).unwrap();
    for cell in plan.cells(10) {
        let t = Instant::now();
        let rec = run_curriculum(&dataset, &prepared, &graph, &cell, &plan).unwrap();
        let m = AccuracyMatrix { rows: rec.accuracy_matrix.clone() };
        let aa = m.average_accuracy(4).unwrap();
        let af = m.average_forgetting(4).unwrap();
        println!("{}: AA5={aa:.3} AF5={af:.3} a00={:.3} time={:?}", cell.method.name(), rec.accuracy_matrix[0][0], t.elapsed());
    }
}
