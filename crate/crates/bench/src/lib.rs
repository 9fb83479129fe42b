//! Fixtures shared by the criterion benches.

use mapsac_core::ablr::{Checkpoint, MetaModel};
use mapsac_core::meta::{generate_meta_tasks, initial_checkpoint, split_tasks, TaskDataset, TaskSplit};
use mapsac_core::numerics::Rng;
use mapsac_core::qp::{Halfspace, QpProblem};
use mapsac_core::runner::{ScenarioId, ScenarioSpec};
use mapsac_core::sim::warmstart_samples;

/// Scenario-1 tasks with the untrained checkpoint built from them.
pub struct MetaFixture {
    pub spec: ScenarioSpec,
    pub tasks: Vec<TaskDataset>,
    pub splits: Vec<TaskSplit>,
    pub checkpoint: Checkpoint,
}

pub fn meta_fixture() -> MetaFixture {
    let spec = ScenarioSpec::new(ScenarioId::FixedObstacle);
    let mut rng = Rng::new(0);
    let tasks = generate_meta_tasks(&spec.meta_tasks, spec.meta.tasks, spec.meta.samples_per_task, &mut rng)
        .expect("meta tasks");
    let splits = split_tasks(&tasks, &spec.meta, &mut rng).expect("splits");
    let checkpoint = initial_checkpoint(&spec.meta, &tasks).expect("checkpoint");
    MetaFixture {
        spec,
        tasks,
        splits,
        checkpoint,
    }
}

/// A model conditioned on the warm-start samples, as at the start of a run.
pub fn warm_model(fx: &MetaFixture) -> MetaModel {
    let mut model = MetaModel::from_checkpoint(&fx.checkpoint).expect("model");
    let data = warmstart_samples(&fx.spec.obstacles, &fx.spec.plant, &mut Rng::new(1)).remove(0);
    model
        .warm_start(&data, fx.spec.finetune_steps, fx.spec.finetune_step_size)
        .expect("warm start");
    model
}

/// Random two-input problems with up to `max_rows` barrier rows.
pub fn qp_problems(count: usize, max_rows: usize, seed: u64) -> Vec<QpProblem> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| {
            let u_ref = vec![rng.uniform_range(-7.0, 7.0), rng.uniform_range(-7.0, 7.0)];
            let rows = (0..=rng.below(max_rows))
                .map(|_| {
                    let t = rng.uniform_range(0.0, std::f64::consts::TAU);
                    Halfspace::new(vec![t.cos(), t.sin()], rng.uniform_range(-4.0, 6.0))
                })
                .collect();
            QpProblem::with_box(u_ref, rows, 5.0).expect("problem")
        })
        .collect()
}
