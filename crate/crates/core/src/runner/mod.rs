//! Scenario orchestration: meta-training, closed-loop episodes with the four
//! controllers, the confidence-set coverage study and the boundary
//! illustration.

mod illustrate;
mod prop1;
mod scenario;

pub use illustrate::{illustrate, Illustration, IllustrationAreas, ILLUSTRATE_GRID, ILLUSTRATE_HI, ILLUSTRATE_LO};
pub use prop1::{validate_prop1, Prop1Config, Prop1Report};
pub use scenario::{ObservationMode, ScenarioId, ScenarioSpec};

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::ablr::{Checkpoint, MetaModel};
use crate::control::control_step;
use crate::error::{Error, Result};
use crate::gp::{gp_fit, FitOptions, GpModel};
use crate::meta::{generate_meta_tasks, meta_train, MetaOutcome};
use crate::numerics::Rng;
use crate::qp::QpStatus;
use crate::safety::{h_and_grad, CbfSettings, Method, Obstacle, UncertaintyModel};
use crate::sim::{
    observe_delta, step, warmstart_samples, MovingPoint, NominalController, StepRecord, TrajectoryRecord,
};

/// Generates the scenario's meta tasks and trains on them.
pub fn meta_train_scenario(spec: &ScenarioSpec) -> Result<MetaOutcome> {
    spec.validate()?;
    let mut rng = Rng::with_stream(spec.meta.seed, 10);
    let tasks = generate_meta_tasks(&spec.meta_tasks, spec.meta.tasks, spec.meta.samples_per_task, &mut rng)?;
    meta_train(&spec.meta, &tasks)
}

/// One learner per obstacle.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Learner {
    Meta(MetaModel),
    Gp(GpModel),
}

impl Learner {
    fn as_model(&self) -> &dyn UncertaintyModel {
        match self {
            Learner::Meta(m) => m,
            Learner::Gp(g) => g,
        }
    }

    fn add_sample(&mut self, x: [f64; 2], y: f64, spec: &ScenarioSpec) -> Result<()> {
        match self {
            Learner::Meta(m) => {
                m.observe(&x, y)?;
                m.head
                    .finetune_prior_mean(spec.online_finetune_steps, spec.finetune_step_size)?;
            }
            Learner::Gp(g) => g.add_and_refit(x.to_vec(), y, spec.gp_refit_steps, spec.gp.learning_rate)?,
        }
        Ok(())
    }
}

fn warm_start(
    method: Method,
    spec: &ScenarioSpec,
    checkpoint: Option<&Checkpoint>,
    rng: &mut Rng,
) -> Result<Vec<Learner>> {
    let data = warmstart_samples(&spec.obstacles, &spec.plant, rng);
    match method {
        Method::Opt | Method::Rust => Ok(Vec::new()),
        Method::MapSac => {
            let ckpt = checkpoint.ok_or_else(|| {
                Error::CheckpointMissing(format!("pass one trained on {}", spec.checkpoint_source().as_str()))
            })?;
            data.iter()
                .map(|samples| {
                    let mut m = MetaModel::from_checkpoint(ckpt)?;
                    m.warm_start(samples, spec.finetune_steps, spec.finetune_step_size)?;
                    Ok(Learner::Meta(m))
                })
                .collect()
        }
        Method::Gp2 => data
            .iter()
            .enumerate()
            .map(|(i, samples)| {
                let xs: Vec<Vec<f64>> = samples.iter().map(|(x, _)| x.to_vec()).collect();
                let ys: Vec<f64> = samples.iter().map(|(_, y)| *y).collect();
                let opts = FitOptions {
                    seed: spec.gp.seed.wrapping_add(i as u64),
                    ..spec.gp
                };
                Ok(Learner::Gp(gp_fit(&xs, &ys, spec.plant.obs_noise_var, &opts)?))
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub min_h: Vec<f64>,
    pub reached: bool,
    pub steps: usize,
    pub relaxed_steps: usize,
    pub final_dist: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub record: TrajectoryRecord,
    pub summary: RunSummary,
    /// The QP had no solution even with slack; the run stopped there.
    pub aborted: bool,
}

impl RunResult {
    /// `‖x − x_T‖` at every recorded step.
    pub fn distance_trace(&self, target: [f64; 2]) -> Vec<f64> {
        self.record
            .steps
            .iter()
            .map(|s| (s.x[0] - target[0]).hypot(s.x[1] - target[1]))
            .collect()
    }
}

fn barrier_values(x: &[f64], obstacles: &[Obstacle]) -> Vec<f64> {
    obstacles.iter().map(|o| h_and_grad(x, o).0).collect()
}

/// Warm start, then the control loop. Randomness comes from independent
/// streams of `seed`, so every method sees the same warm-start data and the
/// same process noise sequence.
pub fn run_episode(
    spec: &ScenarioSpec,
    method: Method,
    checkpoint: Option<&Checkpoint>,
    seed: u64,
) -> Result<RunResult> {
    spec.validate()?;
    let plant = &spec.plant;
    let mut plant_rng = Rng::with_stream(seed, 0);
    let mut obs_rng = Rng::with_stream(seed, 1);
    let mut warm_rng = Rng::with_stream(seed, 2);
    let mut learners = warm_start(method, spec, checkpoint, &mut warm_rng)?;
    let learns = !learners.is_empty();

    let settings = CbfSettings {
        dynamics: &MovingPoint,
        alpha_gain: spec.alpha_gain,
        omega_true: plant.omega,
        robust: spec.robust,
        budget: spec.budget,
    };
    let mut nominal = NominalController::default();
    let mut record = TrajectoryRecord::default();
    let mut x = spec.start;
    let mut reached = false;
    let mut aborted = false;
    let mut relaxed_steps = 0;

    for k in 0..plant.max_steps {
        let sample_now = spec.online && learns && k % plant.sample_every == 0;
        if sample_now && spec.observation == ObservationMode::Oracle {
            for (learner, obs) in learners.iter_mut().zip(&spec.obstacles) {
                let y = observe_delta(&x, obs, plant, &mut obs_rng);
                learner.add_sample(x, y, spec)?;
            }
        }

        let u_ref = nominal.input(&x, plant);
        let models: Vec<&dyn UncertaintyModel> = learners.iter().map(Learner::as_model).collect();
        let out = control_step(method, &x, &u_ref, &spec.obstacles, &models, &settings, &spec.limits)?;
        record.push(StepRecord {
            t: k as f64 * plant.dt,
            x,
            u: [out.u[0], out.u[1]],
            h: out.constraints.iter().map(|c| c.h).collect(),
            mu: out.constraints.iter().map(|c| c.mu).collect(),
            sigma: out.constraints.iter().map(|c| c.sigma).collect(),
            status: out.status,
            sampled: sample_now,
        });
        match out.status {
            QpStatus::Optimal => {}
            QpStatus::RelaxedFeasible => relaxed_steps += 1,
            QpStatus::Infeasible => {
                aborted = true;
                break;
            }
        }

        let next = step(&x, &out.u, plant, &mut plant_rng);
        if sample_now && spec.observation == ObservationMode::FiniteDifference {
            for ((learner, obs), c) in learners.iter_mut().zip(&spec.obstacles).zip(&out.constraints) {
                let h_next = h_and_grad(&next, obs).0;
                let lg_u = c.value(&out.u) - c.b;
                let y = (h_next - c.h) / plant.dt - lg_u;
                learner.add_sample(x, y, spec)?;
            }
        }
        x = next;
        if (x[0] - plant.target[0]).hypot(x[1] - plant.target[1]) < plant.goal_tol {
            reached = true;
            break;
        }
    }

    let min_h = if record.is_empty() {
        barrier_values(&x, &spec.obstacles)
    } else {
        record.min_h()
    };
    Ok(RunResult {
        method,
        summary: RunSummary {
            min_h,
            reached,
            steps: record.len(),
            relaxed_steps,
            final_dist: (x[0] - plant.target[0]).hypot(x[1] - plant.target[1]),
        },
        record,
        aborted,
    })
}

/// `t, x1, x2, u1, u2, (h_i, mu_i, sigma_i)…, qp_status, sampled` with 17
/// significant digits.
pub fn trajectory_csv(record: &TrajectoryRecord) -> String {
    let k = record.steps.first().map_or(0, |s| s.h.len());
    let mut s = String::from("t,x1,x2,u1,u2");
    for i in 1..=k {
        let _ = write!(s, ",h_{i},mu_{i},sigma_{i}");
    }
    s.push_str(",qp_status,sampled\n");
    for r in &record.steps {
        let _ = write!(
            s,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.t, r.x[0], r.x[1], r.u[0], r.u[1]
        );
        for i in 0..k {
            let _ = write!(s, ",{:.16e},{:.16e},{:.16e}", r.h[i], r.mu[i], r.sigma[i]);
        }
        let _ = writeln!(s, ",{},{}", r.status.as_str(), u8::from(r.sampled));
    }
    s
}

pub fn summary_json(summary: &RunSummary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}

/// Writes `trajectory.csv` and `summary.json` into `dir`.
pub fn write_run(result: &RunResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("trajectory.csv"), trajectory_csv(&result.record))?;
    std::fs::write(dir.join("summary.json"), summary_json(&result.summary))?;
    Ok(())
}
