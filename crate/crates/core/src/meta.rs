//! Meta-training of the feature network and prior mean on a family of related
//! tasks, and synthetic task generation for the moving point.
//!
//! Each task is split into a context set, on which the Bayesian head is
//! conditioned, and a target set scored by the Gaussian negative log
//! likelihood `Σ log Σ_j + r_j² / Σ_j`.

use std::fmt::Write as _;
use std::path::Path;

use crate::ablr::{BayesianHead, Checkpoint};
use crate::control::{control_step, QpLimits};
use crate::error::{Error, Result};
use crate::featurenet::{FeatureMap, InputTransform, NetGrad, NetParams};
use crate::numerics::{CholeskyFactor, Matrix, Rng, Vector};
use crate::qp::QpStatus;
use crate::safety::{delta_true, h_and_grad, CbfSettings, Method, Obstacle, RobustBound, SafetyBudget};
use crate::sim::{step, MovingPoint, NominalController, PlantConfig};

/// Samples `(state, Δ̃)` for one barrier of one task.
pub type Samples = Vec<([f64; 2], f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub omega: f64,
    pub obstacles: Vec<Obstacle>,
    /// One sample list per obstacle.
    pub samples: Vec<Samples>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Condition on a reshuffled context fraction, score the rest.
    Split,
    /// Condition on and score every sample.
    FullTask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub tasks: usize,
    pub samples_per_task: usize,
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub context_ratio: f64,
    pub conditioning: Conditioning,
    /// `K0 = c I`.
    pub prior_scale: f64,
    pub noise_std: f64,
    pub state_lo: [f64; 2],
    pub state_hi: [f64; 2],
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            tasks: 20,
            samples_per_task: 30,
            dim: 10,
            epochs: 2000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            context_ratio: 0.5,
            conditioning: Conditioning::Split,
            prior_scale: 1.0,
            noise_std: 0.1f64.sqrt(),
            state_lo: [-0.5, -0.5],
            state_hi: [4.5, 4.5],
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.context_ratio > 0.0 && self.context_ratio < 1.0) {
            return Err(Error::Config(format!(
                "context ratio {} outside (0, 1)",
                self.context_ratio
            )));
        }
        if self.tasks == 0 || self.samples_per_task == 0 || self.dim == 0 {
            return Err(Error::Config("task, sample and feature counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.prior_scale > 0.0 && self.noise_std > 0.0) {
            return Err(Error::Config(
                "step size, prior scale and noise must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One regression problem: the first `n_context` rows condition the head.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub states: Vec<[f64; 2]>,
    pub targets: Vec<f64>,
    pub n_context: usize,
    pub in_sample: bool,
}

impl TaskSplit {
    fn context(&self) -> std::ops::Range<usize> {
        if self.in_sample {
            0..self.states.len()
        } else {
            0..self.n_context
        }
    }

    fn scored(&self) -> std::ops::Range<usize> {
        if self.in_sample {
            0..self.states.len()
        } else {
            self.n_context..self.states.len()
        }
    }
}

/// Splits every barrier's samples of every task; the shuffle is drawn from `rng`.
pub fn split_tasks(tasks: &[TaskDataset], cfg: &MetaConfig, rng: &mut Rng) -> Result<Vec<TaskSplit>> {
    let mut out = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        for samples in &task.samples {
            if samples.is_empty() {
                return Err(Error::EmptyTask(i));
            }
            let mut order: Vec<usize> = (0..samples.len()).collect();
            rng.shuffle(&mut order);
            let n = samples.len();
            let n_context = ((cfg.context_ratio * n as f64).ceil() as usize).min(n - 1);
            out.push(TaskSplit {
                states: order.iter().map(|&k| samples[k].0).collect(),
                targets: order.iter().map(|&k| samples[k].1).collect(),
                n_context,
                in_sample: cfg.conditioning == Conditioning::FullTask,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Loss and gradients of the meta objective.
#[derive(Debug, Clone)]
pub struct MetaLoss {
    pub value: f64,
    pub net_grad: NetGrad,
    pub mean_grad: Vector,
}

/// `Σ_tasks Σ_targets log Σ_j + r_j² / Σ_j` after conditioning each task on
/// its context, with exact gradients in the network weights and `μ0`.
pub fn meta_nll(
    features: &FeatureMap,
    mu0: &Vector,
    k0: &Matrix,
    noise_std: f64,
    splits: &[TaskSplit],
) -> Result<MetaLoss> {
    if splits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = features.dim();
    let s2 = noise_std * noise_std;
    let k0_inv = CholeskyFactor::new(k0)?.inverse();
    let prior_term = &k0_inv * mu0;

    let inputs = features.input_matrix(splits.iter().flat_map(|s| s.states.iter().map(|x| x.as_slice())));
    let cache = features.net.forward_batch(&inputs);
    let phi = cache.output();
    let mut upstream = Matrix::zeros(phi.nrows(), d);
    let mut mean_grad = Vector::zeros(d);
    let mut value = 0.0;

    let mut offset = 0;
    for split in splits {
        let row = |j: usize| phi.row(offset + j).transpose();
        let mut precision = k0_inv.clone();
        let mut b = prior_term.clone();
        for c in split.context() {
            let p = row(c);
            precision += &p * p.transpose();
            b += &p * split.targets[c];
        }
        let k = CholeskyFactor::new(&precision)?.inverse();
        let mu = &k * &b;

        let mut g_mu = Vector::zeros(d);
        let mut g_k = Matrix::zeros(d, d);
        for j in split.scored() {
            let p = row(j);
            let kp = &k * &p;
            let s = s2 * (1.0 + p.dot(&kp));
            let r = split.targets[j] - mu.dot(&p);
            value += s.ln() + r * r / s;
            let dm = -2.0 * r / s;
            let ds = 1.0 / s - r * r / (s * s);
            g_mu += &p * dm;
            g_k += &p * p.transpose() * (ds * s2);
            let up = &mu * dm + kp * (2.0 * ds * s2);
            let mut dst = upstream.row_mut(offset + j);
            dst += up.transpose();
        }

        // μ = K b and K = (K0⁻¹ + Σ_c ψ ψᵀ)⁻¹.
        g_k += &g_mu * b.transpose();
        let v = &k * &g_mu;
        mean_grad += &k0_inv * &v;
        let g_p = -(&k * &g_k * &k);
        let sym = &g_p + g_p.transpose();
        for c in split.context() {
            let p = row(c);
            let up = &v * split.targets[c] + &sym * &p;
            let mut dst = upstream.row_mut(offset + c);
            dst += up.transpose();
        }
        offset += split.states.len();
    }

    let net_grad = features.net.backward_batch(&cache, &upstream);
    Ok(MetaLoss {
        value,
        net_grad,
        mean_grad,
    })
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub checkpoint: Checkpoint,
    /// Loss at each epoch on that epoch's split.
    pub trace: Vec<f64>,
    /// Loss on a fixed evaluation split before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// The untrained model: fresh network, `K0 = c I`, and `μ0` set to the
/// posterior mean of all pooled samples under a zero-mean prior, so the
/// prior starts at the average task instead of at zero.
pub fn initial_checkpoint(cfg: &MetaConfig, tasks: &[TaskDataset]) -> Result<Checkpoint> {
    let mut rng = Rng::new(cfg.seed);
    let features = FeatureMap {
        transform: InputTransform::from_bounds(&cfg.state_lo, &cfg.state_hi),
        net: NetParams::init(2, cfg.dim, &mut rng)?,
    };
    let prior_cov = Matrix::identity(cfg.dim, cfg.dim) * cfg.prior_scale;
    let pooled: Vec<(Vector, f64)> = tasks
        .iter()
        .flat_map(|t| t.samples.iter().flatten())
        .map(|(x, y)| (features.features(x), *y))
        .collect();
    let head = BayesianHead::new(Vector::zeros(cfg.dim), prior_cov.clone(), cfg.noise_std)?;
    let prior_mean = head.posterior_from_data(&pooled)?.posterior_mean().clone();
    Ok(Checkpoint {
        features,
        prior_mean,
        prior_cov,
        noise_std: cfg.noise_std,
    })
}

pub fn meta_train(cfg: &MetaConfig, tasks: &[TaskDataset]) -> Result<MetaOutcome> {
    cfg.validate()?;
    let mut ckpt = initial_checkpoint(cfg, tasks)?;
    let eval_splits = split_tasks(tasks, cfg, &mut Rng::with_stream(cfg.seed, 1))?;
    let loss_of =
        |c: &Checkpoint| meta_nll(&c.features, &c.prior_mean, &c.prior_cov, c.noise_std, &eval_splits).map(|l| l.value);
    let initial_loss = loss_of(&ckpt)?;

    let sizes = ckpt.features.net.layer_sizes();
    let mut params = ckpt.features.net.to_flat();
    let n_net = params.len();
    params.extend(ckpt.prior_mean.iter());
    let mut adam = Adam::new(params.len(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut rng = Rng::with_stream(cfg.seed, 2);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let splits = split_tasks(tasks, cfg, &mut rng)?;
        let loss = meta_nll(
            &ckpt.features,
            &ckpt.prior_mean,
            &ckpt.prior_cov,
            ckpt.noise_std,
            &splits,
        )?;
        if !loss.value.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: loss.value,
            });
        }
        trace.push(loss.value);
        let mut grad = loss.net_grad.to_flat();
        grad.extend(loss.mean_grad.iter());
        adam.step(&mut params, &grad);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch, loss: f64::NAN });
        }
        ckpt.features.net = NetParams::from_flat(&sizes, &params[..n_net])?;
        ckpt.prior_mean = Vector::from_column_slice(&params[n_net..]);
    }

    let final_loss = loss_of(&ckpt)?;
    Ok(MetaOutcome {
        checkpoint: ckpt,
        trace,
        initial_loss,
        final_loss,
    })
}

/// `epoch,loss` rows.
pub fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:.16e}");
    }
    s
}

pub fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    std::fs::write(path, trace_csv(trace))?;
    Ok(())
}

/// How each meta task places its obstacles.
#[derive(Debug, Clone, PartialEq)]
pub enum ObstacleSampler {
    Fixed(Vec<Obstacle>),
    /// One obstacle with centre coordinates and radius drawn uniformly.
    Uniform {
        center: (f64, f64),
        radius: (f64, f64),
    },
}

impl ObstacleSampler {
    pub fn draw(&self, rng: &mut Rng) -> Vec<Obstacle> {
        match self {
            ObstacleSampler::Fixed(obs) => obs.clone(),
            ObstacleSampler::Uniform { center, radius } => {
                let cx = rng.uniform_range(center.0, center.1);
                let cy = rng.uniform_range(center.0, center.1);
                vec![Obstacle::new([cx, cy], rng.uniform_range(radius.0, radius.1))]
            }
        }
    }
}

/// Settings for generating source trajectories with the perfect-knowledge
/// controller.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTaskSpec {
    pub obstacles: ObstacleSampler,
    pub omega_range: (f64, f64),
    pub start_lo: [f64; 2],
    pub start_hi: [f64; 2],
    /// Target, gains, noise levels and horizon; `omega` is overwritten per task
    /// and process noise is ignored.
    pub plant: PlantConfig,
    pub alpha_gain: f64,
    pub limits: QpLimits,
    pub max_attempts: usize,
}

impl Default for MetaTaskSpec {
    fn default() -> Self {
        Self {
            obstacles: ObstacleSampler::Fixed(vec![Obstacle::new([1.5, 1.5], 0.8)]),
            omega_range: (0.5, 2.5),
            start_lo: [-0.5, -0.5],
            start_hi: [1.0, 1.0],
            plant: PlantConfig::default(),
            alpha_gain: 1.0,
            limits: QpLimits::default(),
            max_attempts: 50,
        }
    }
}

/// Closed-loop states of a noise-free perfect-knowledge rollout, or `None`
/// if the barrier ever went negative or a step needed relaxation.
fn oracle_rollout(
    x0: [f64; 2],
    omega: f64,
    obstacles: &[Obstacle],
    spec: &MetaTaskSpec,
) -> Result<Option<Vec<[f64; 2]>>> {
    let plant = PlantConfig {
        omega,
        process_noise: 0.0,
        ..spec.plant.clone()
    };
    let settings = CbfSettings {
        dynamics: &MovingPoint,
        alpha_gain: spec.alpha_gain,
        omega_true: omega,
        robust: RobustBound::default(),
        budget: SafetyBudget::default(),
    };
    let mut nominal = NominalController::default();
    let mut rng = Rng::new(0);
    let mut x = x0;
    let mut states = Vec::new();
    for _ in 0..plant.max_steps {
        if obstacles.iter().any(|o| h_and_grad(&x, o).0 < 0.0) {
            return Ok(None);
        }
        states.push(x);
        let u_ref = nominal.input(&x, &plant);
        let out = control_step(Method::Opt, &x, &u_ref, obstacles, &[], &settings, &spec.limits)?;
        if out.status != QpStatus::Optimal {
            return Ok(None);
        }
        x = step(&x, &out.u, &plant, &mut rng);
        if (x[0] - plant.target[0]).hypot(x[1] - plant.target[1]) < plant.goal_tol {
            break;
        }
    }
    if obstacles.iter().any(|o| h_and_grad(&x, o).0 < 0.0) {
        return Ok(None);
    }
    Ok(Some(states))
}

/// `k` tasks with `samples_per_task` noisy residual samples per obstacle,
/// taken at random steps of a safe source trajectory.
pub fn generate_meta_tasks(
    spec: &MetaTaskSpec,
    k: usize,
    samples_per_task: usize,
    rng: &mut Rng,
) -> Result<Vec<TaskDataset>> {
    let mut tasks = Vec::with_capacity(k);
    for _ in 0..k {
        let omega = rng.uniform_range(spec.omega_range.0, spec.omega_range.1);
        let obstacles = spec.obstacles.draw(rng);
        let mut trajectory = None;
        for _ in 0..spec.max_attempts {
            let x0 = [
                rng.uniform_range(spec.start_lo[0], spec.start_hi[0]),
                rng.uniform_range(spec.start_lo[1], spec.start_hi[1]),
            ];
            if let Some(states) = oracle_rollout(x0, omega, &obstacles, spec)? {
                if states.len() >= samples_per_task {
                    trajectory = Some(states);
                    break;
                }
            }
        }
        let states = trajectory.ok_or(Error::RolloutUnsafe {
            attempts: spec.max_attempts,
        })?;
        let mut idx: Vec<usize> = (0..states.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(samples_per_task);
        idx.sort_unstable();
        let noise = spec.plant.obs_noise_var.sqrt();
        let samples = obstacles
            .iter()
            .map(|o| {
                idx.iter()
                    .map(|&i| {
                        let x = states[i];
                        (x, delta_true(&x, omega, o) + noise * rng.normal())
                    })
                    .collect()
            })
            .collect();
        tasks.push(TaskDataset {
            omega,
            obstacles,
            samples,
        });
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_map(rng: &mut Rng) -> FeatureMap {
        FeatureMap {
            transform: InputTransform::from_bounds(&[-0.5, -0.5], &[4.5, 4.5]),
            net: NetParams::init_with_sizes(&[2, 8, 8, 3], rng).unwrap(),
        }
    }

    #[test]
    fn scalar_hand_value() {
        // Zero network: φ = 0.5 everywhere, so the head is one-dimensional.
        let fm = FeatureMap {
            transform: InputTransform::identity(2),
            net: NetParams::zeros(&[2, 3, 1]),
        };
        let mu0 = Vector::from_element(1, 0.4);
        let k0 = Matrix::from_element(1, 1, 2.0);
        let split = TaskSplit {
            states: vec![[0.1, 0.2]],
            targets: vec![1.3],
            n_context: 0,
            in_sample: false,
        };
        let loss = meta_nll(&fm, &mu0, &k0, 0.5, &[split]).unwrap();
        let s: f64 = 0.25 * (1.0 + 0.25 * 2.0);
        let r: f64 = 1.3 - 0.2;
        assert!((loss.value - (s.ln() + r * r / s)).abs() < 1e-14);
    }

    #[test]
    fn perfect_model_limit() {
        let mut rng = Rng::new(3);
        let fm = tiny_map(&mut rng);
        let mu0 = Vector::from_column_slice(&[0.7, -1.2, 2.0]);
        let states: Vec<[f64; 2]> = (0..400)
            .map(|_| [rng.uniform_range(0.0, 4.0), rng.uniform_range(0.0, 4.0)])
            .collect();
        let targets = states.iter().map(|x| fm.features(x).dot(&mu0)).collect();
        let split = TaskSplit {
            states,
            targets,
            n_context: 390,
            in_sample: false,
        };
        let noise: f64 = 0.3;
        let loss = meta_nll(&fm, &mu0, &Matrix::identity(3, 3), noise, &[split]).unwrap();
        let floor = 10.0 * (noise * noise).ln();
        assert!(loss.value >= floor);
        assert!(loss.value - floor < 0.2, "{} vs {floor}", loss.value);
    }

    #[test]
    fn split_sizes() {
        let task = TaskDataset {
            omega: 1.0,
            obstacles: vec![Obstacle::new([1.5, 1.5], 0.8)],
            samples: vec![(0..7).map(|i| ([i as f64, 0.0], i as f64)).collect()],
        };
        let cfg = MetaConfig::default();
        let s = split_tasks(std::slice::from_ref(&task), &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(s[0].n_context, 4);
        let mut sorted = s[0].targets.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, (0..7).map(f64::from).collect::<Vec<_>>());

        let empty = TaskDataset {
            samples: vec![vec![]],
            ..task
        };
        assert!(matches!(
            split_tasks(&[empty], &cfg, &mut Rng::new(0)),
            Err(Error::EmptyTask(0))
        ));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut adam = Adam::new(2, 0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 4.0 * p[1]];
            adam.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2);
    }

    #[test]
    fn zero_epochs_is_initial() {
        let spec = MetaTaskSpec::default();
        let tasks = generate_meta_tasks(&spec, 2, 10, &mut Rng::new(0)).unwrap();
        let cfg = MetaConfig {
            epochs: 0,
            dim: 3,
            ..MetaConfig::default()
        };
        let out = meta_train(&cfg, &tasks).unwrap();
        let init = initial_checkpoint(&cfg, &tasks).unwrap();
        assert_eq!(out.checkpoint.to_text(), init.to_text());
        assert!(out.trace.is_empty());
        assert_eq!(out.initial_loss, out.final_loss);
    }

    #[test]
    fn generated_tasks_shape() {
        let spec = MetaTaskSpec::default();
        let a = generate_meta_tasks(&spec, 4, 30, &mut Rng::new(9)).unwrap();
        let b = generate_meta_tasks(&spec, 4, 30, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        for t in &a {
            assert!((0.5..=2.5).contains(&t.omega));
            assert_eq!(t.samples.len(), 1);
            assert_eq!(t.samples[0].len(), 30);
            for (x, _) in &t.samples[0] {
                assert!(h_and_grad(x, &t.obstacles[0]).0 >= 0.0);
            }
        }
    }

    #[test]
    fn uniform_obstacles_in_range() {
        let sampler = ObstacleSampler::Uniform {
            center: (1.0, 4.0),
            radius: (0.2, 1.0),
        };
        let mut rng = Rng::new(1);
        for _ in 0..200 {
            let o = sampler.draw(&mut rng)[0];
            assert!((1.0..4.0).contains(&o.center[0]) && (1.0..4.0).contains(&o.center[1]));
            assert!((0.2..1.0).contains(&o.radius));
        }
    }
}
