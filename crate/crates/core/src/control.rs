//! One CBF-QP control step: build a constraint per obstacle, then project the
//! nominal input onto the safe set.

use crate::error::{Error, Result};
use crate::qp::{solve_relaxed, QpProblem, QpStatus, DEFAULT_SLACK_PENALTY};
use crate::safety::{build_constraint, CbfSettings, ConstraintSpec, Method, Obstacle, UncertaintyModel};
use crate::sim::Dynamics;

/// Input box and slack penalty of the per-step QP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpLimits {
    pub input_bound: f64,
    pub slack_penalty: f64,
}

impl Default for QpLimits {
    fn default() -> Self {
        Self {
            input_bound: 5.0,
            slack_penalty: DEFAULT_SLACK_PENALTY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u: Vec<f64>,
    pub status: QpStatus,
    pub constraints: Vec<ConstraintSpec>,
    pub slacks: Vec<f64>,
}

/// `models[i]` serves obstacle `i`; it may be empty for methods without a model.
pub fn control_step<D: Dynamics + ?Sized>(
    method: Method,
    x: &[f64],
    u_ref: &[f64],
    obstacles: &[Obstacle],
    models: &[&dyn UncertaintyModel],
    settings: &CbfSettings<'_, D>,
    limits: &QpLimits,
) -> Result<ControlOutput> {
    if method.needs_model() && models.len() != obstacles.len() {
        return Err(Error::Shape(format!(
            "{} models for {} obstacles",
            models.len(),
            obstacles.len()
        )));
    }
    let constraints = obstacles
        .iter()
        .enumerate()
        .map(|(i, obs)| build_constraint(method, x, i, obs, models.get(i).copied(), settings))
        .collect::<Result<Vec<_>>>()?;
    let problem = QpProblem::with_box(
        u_ref.to_vec(),
        constraints.iter().map(ConstraintSpec::halfspace).collect(),
        limits.input_bound,
    )?;
    let sol = solve_relaxed(&problem, limits.slack_penalty);
    Ok(ControlOutput {
        u: sol.u,
        status: sol.status,
        constraints,
        slacks: sol.slacks,
    })
}
