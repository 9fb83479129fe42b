//! Experiment definitions and the `key = value` override format.

use std::str::FromStr;

use crate::control::QpLimits;
use crate::error::{Error, Result};
use crate::gp::FitOptions;
use crate::meta::{Conditioning, MetaConfig, MetaTaskSpec, ObstacleSampler};
use crate::safety::{BetaMode, Obstacle, RobustBound, SafetyBudget};
use crate::sim::PlantConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioId {
    FixedObstacle,
    UncertainObstacle,
    MultiObstacle,
    Illustrate,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 4] = [
        ScenarioId::FixedObstacle,
        ScenarioId::UncertainObstacle,
        ScenarioId::MultiObstacle,
        ScenarioId::Illustrate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::FixedObstacle => "fixed-obstacle",
            ScenarioId::UncertainObstacle => "uncertain-obstacle",
            ScenarioId::MultiObstacle => "multi-obstacle",
            ScenarioId::Illustrate => "illustrate",
        }
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    /// Accepts the names above or the numbers `1`, `2`, `3`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(ScenarioId::FixedObstacle),
            "2" => Ok(ScenarioId::UncertainObstacle),
            "3" => Ok(ScenarioId::MultiObstacle),
            _ => ScenarioId::ALL
                .into_iter()
                .find(|id| id.as_str() == s)
                .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`"))),
        }
    }
}

/// Where residual observations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationMode {
    /// True residual plus Gaussian noise.
    Oracle,
    /// `(h(x⁺) − h(x)) / dt − L_g h u` over one control step.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub obstacles: Vec<Obstacle>,
    pub start: [f64; 2],
    pub plant: PlantConfig,
    pub meta: MetaConfig,
    pub meta_tasks: MetaTaskSpec,
    pub budget: SafetyBudget,
    pub alpha_gain: f64,
    pub limits: QpLimits,
    pub robust: RobustBound,
    pub finetune_steps: usize,
    pub finetune_step_size: f64,
    /// Fine-tune iterations after each online sample.
    pub online_finetune_steps: usize,
    pub gp: FitOptions,
    /// Warm-started ascent steps after each online GP sample.
    pub gp_refit_steps: usize,
    pub online: bool,
    pub observation: ObservationMode,
}

impl ScenarioSpec {
    pub fn new(id: ScenarioId) -> Self {
        let plant = PlantConfig::default();
        let s1_obstacle = Obstacle::new([1.5, 1.5], 0.8);
        let base = Self {
            id,
            obstacles: vec![s1_obstacle],
            start: [0.0, 0.0],
            plant: plant.clone(),
            meta: MetaConfig::default(),
            meta_tasks: MetaTaskSpec {
                obstacles: ObstacleSampler::Fixed(vec![s1_obstacle]),
                // Starts along the whole lower edge so rollouts sweep both
                // sides of the single obstacle.
                start_hi: [3.5, 1.0],
                plant,
                ..MetaTaskSpec::default()
            },
            budget: SafetyBudget::default(),
            alpha_gain: 1.0,
            limits: QpLimits::default(),
            robust: RobustBound::default(),
            finetune_steps: 100,
            finetune_step_size: 1e-2,
            online_finetune_steps: 100,
            gp: FitOptions::default(),
            gp_refit_steps: 20,
            online: false,
            observation: ObservationMode::Oracle,
        };
        let uncertain = MetaConfig {
            tasks: 50,
            dim: 20,
            ..MetaConfig::default()
        };
        let random_obstacles = ObstacleSampler::Uniform {
            center: (1.0, 4.0),
            radius: (0.2, 1.0),
        };
        match id {
            ScenarioId::FixedObstacle | ScenarioId::Illustrate => base,
            ScenarioId::UncertainObstacle => Self {
                obstacles: vec![Obstacle::new([1.0, 2.5], 1.2)],
                meta: uncertain,
                meta_tasks: MetaTaskSpec {
                    obstacles: random_obstacles,
                    start_hi: MetaTaskSpec::default().start_hi,
                    ..base.meta_tasks.clone()
                },
                ..base
            },
            ScenarioId::MultiObstacle => Self {
                obstacles: vec![
                    Obstacle::new([1.0, 2.5], 1.0),
                    Obstacle::new([3.0, 2.0], 0.5),
                    Obstacle::new([2.5, 0.5], 0.8),
                ],
                meta: uncertain,
                meta_tasks: MetaTaskSpec {
                    obstacles: random_obstacles,
                    start_hi: MetaTaskSpec::default().start_hi,
                    ..base.meta_tasks.clone()
                },
                ..base
            },
        }
    }

    /// Scenario whose meta-trained model this one uses.
    pub fn checkpoint_source(&self) -> ScenarioId {
        match self.id {
            ScenarioId::MultiObstacle => ScenarioId::UncertainObstacle,
            ScenarioId::Illustrate => ScenarioId::FixedObstacle,
            id => id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obstacles.is_empty() && self.id != ScenarioId::Illustrate {
            return Err(Error::Config("scenario has no obstacles".into()));
        }
        for o in &self.obstacles {
            Obstacle::validated(o.center, o.radius)?;
        }
        if !(self.plant.dt > 0.0) || self.plant.sample_every == 0 {
            return Err(Error::Config("dt and the sampling period must be positive".into()));
        }
        if !self.plant.omega.is_finite() {
            return Err(Error::Config("ω must be finite".into()));
        }
        if !(self.limits.input_bound > 0.0) {
            return Err(Error::Config("input bound must be positive".into()));
        }
        self.budget.validate()?;
        self.meta.validate()
    }

    /// Applies a config file on top of the built-in values.
    pub fn apply_config(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.plant;
        match key {
            "start" => self.start = pair(value)?,
            "obstacles" => self.obstacles = obstacles(value)?,
            "plant.omega" => p.omega = num(value)?,
            "plant.process_noise" => p.process_noise = num(value)?,
            "plant.dt" => p.dt = num(value)?,
            "plant.sample_every" => p.sample_every = num(value)?,
            "plant.target" => p.target = pair(value)?,
            "plant.k_f" => p.k_f = num(value)?,
            "plant.k_i" => p.k_i = num(value)?,
            "plant.integral_zone" => p.integral_zone = num(value)?,
            "plant.obs_noise_var" => p.obs_noise_var = num(value)?,
            "plant.max_steps" => p.max_steps = num(value)?,
            "plant.goal_tol" => p.goal_tol = num(value)?,
            "safety.alpha" => self.alpha_gain = num(value)?,
            "safety.beta" => self.budget.beta = num(value)?,
            "safety.delta" => self.budget.delta = num(value)?,
            "safety.kappa" => self.budget.kappa = num(value)?,
            "safety.beta_mode" => {
                self.budget.mode = match value {
                    "fixed" => BetaMode::Fixed,
                    "radius" => BetaMode::ConfidenceRadius,
                    _ => return Err(Error::Config(format!("unknown β mode `{value}`"))),
                }
            }
            "safety.robust_omega_max" => self.robust = RobustBound::Structural { omega_max: num(value)? },
            "safety.robust_constant" => self.robust = RobustBound::Constant(num(value)?),
            "qp.input_bound" => self.limits.input_bound = num(value)?,
            "qp.slack_penalty" => self.limits.slack_penalty = num(value)?,
            "meta.tasks" => self.meta.tasks = num(value)?,
            "meta.samples_per_task" => self.meta.samples_per_task = num(value)?,
            "meta.dim" => self.meta.dim = num(value)?,
            "meta.epochs" => self.meta.epochs = num(value)?,
            "meta.learning_rate" => self.meta.learning_rate = num(value)?,
            "meta.beta1" => self.meta.beta1 = num(value)?,
            "meta.beta2" => self.meta.beta2 = num(value)?,
            "meta.epsilon" => self.meta.epsilon = num(value)?,
            "meta.context_ratio" => self.meta.context_ratio = num(value)?,
            "meta.conditioning" => {
                self.meta.conditioning = match value {
                    "split" => Conditioning::Split,
                    "full" => Conditioning::FullTask,
                    _ => return Err(Error::Config(format!("unknown conditioning `{value}`"))),
                }
            }
            "meta.prior_scale" => self.meta.prior_scale = num(value)?,
            "meta.noise_var" => self.meta.noise_std = num::<f64>(value)?.sqrt(),
            "meta.seed" => self.meta.seed = num(value)?,
            "meta.omega_range" => {
                let r = pair(value)?;
                self.meta_tasks.omega_range = (r[0], r[1]);
            }
            "meta.start_lo" => self.meta_tasks.start_lo = pair(value)?,
            "meta.start_hi" => self.meta_tasks.start_hi = pair(value)?,
            "finetune.steps" => self.finetune_steps = num(value)?,
            "finetune.step_size" => self.finetune_step_size = num(value)?,
            "finetune.online_steps" => self.online_finetune_steps = num(value)?,
            "gp.starts" => self.gp.starts = num(value)?,
            "gp.steps" => self.gp.steps = num(value)?,
            "gp.learning_rate" => self.gp.learning_rate = num(value)?,
            "gp.refit_steps" => self.gp_refit_steps = num(value)?,
            "run.online" => self.online = num(value)?,
            "run.observation" => {
                self.observation = match value {
                    "oracle" => ObservationMode::Oracle,
                    "finite_difference" => ObservationMode::FiniteDifference,
                    _ => return Err(Error::Config(format!("unknown observation mode `{value}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        // Source trajectories share the plant's target, gains and horizon.
        self.meta_tasks.plant = self.plant.clone();
        self.meta_tasks.alpha_gain = self.alpha_gain;
        self.meta_tasks.limits = self.limits;
        Ok(())
    }
}

fn num<T: FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("cannot parse `{s}`")))
}

fn numbers(s: &str) -> Result<Vec<f64>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(num)
        .collect()
}

fn pair(s: &str) -> Result<[f64; 2]> {
    match numbers(s)?.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::Config(format!("expected two numbers, got `{s}`"))),
    }
}

/// `x y r; x y r; …`
fn obstacles(s: &str) -> Result<Vec<Obstacle>> {
    s.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|t| match numbers(t)?.as_slice() {
            [x, y, r] => Obstacle::validated([*x, *y], *r),
            _ => Err(Error::Config(format!("obstacle needs `x y r`, got `{t}`"))),
        })
        .collect()
}
