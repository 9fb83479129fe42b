//! Moving-point plant `ẋ = u − ω (cos x₁ + sin x₂) (1, 1) + ε`, its nominal
//! tracking controller, residual observations and trajectory logs.

use crate::numerics::{Matrix, Rng};
use crate::qp::QpStatus;
use crate::safety::{delta_true, Obstacle};

/// Known part of a control-affine system `ẋ = f(x) + g(x) u`.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &[f64]) -> Vec<f64>;
    /// `n × m` input matrix.
    fn input_matrix(&self, x: &[f64]) -> Matrix;
}

/// Nominal model of the moving point: `f = 0`, `g = I`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MovingPoint;

impl Dynamics for MovingPoint {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    fn input_matrix(&self, _x: &[f64]) -> Matrix {
        Matrix::identity(2, 2)
    }
}

/// The unknown drift `φ_ω(x) = −ω (cos x₁ + sin x₂) (1, 1)`.
pub fn unknown_drift(x: &[f64], omega: f64) -> [f64; 2] {
    let s = x[0].cos() + x[1].sin();
    [-omega * s, -omega * s]
}

pub fn dynamics_rhs(x: &[f64], u: &[f64], omega: f64) -> [f64; 2] {
    let d = unknown_drift(x, omega);
    [u[0] + d[0], u[1] + d[1]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    /// True environment parameter.
    pub omega: f64,
    /// Process noise intensity; each step adds `N(0, σ² dt I)`.
    pub process_noise: f64,
    pub dt: f64,
    /// Control steps between online samples.
    pub sample_every: usize,
    pub target: [f64; 2],
    /// Proportional gain of the nominal controller.
    pub k_f: f64,
    /// Integral gain, active only within `integral_zone` of the target.
    pub k_i: f64,
    pub integral_zone: f64,
    /// Variance of the residual observation noise.
    pub obs_noise_var: f64,
    pub max_steps: usize,
    pub goal_tol: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            omega: 1.5,
            process_noise: 0.01,
            dt: 0.01,
            sample_every: 10,
            target: [3.0, 4.0],
            k_f: 10.0,
            k_i: 25.0,
            integral_zone: 1.0,
            obs_noise_var: 0.1,
            max_steps: 3000,
            goal_tol: 0.05,
        }
    }
}

/// RK4 over one control period with `u` held, then additive state noise.
pub fn step(x: &[f64], u: &[f64], cfg: &PlantConfig, rng: &mut Rng) -> [f64; 2] {
    let mut next = rk4(x, u, cfg.omega, cfg.dt);
    if cfg.process_noise > 0.0 {
        let std = cfg.process_noise * cfg.dt.sqrt();
        next[0] += std * rng.normal();
        next[1] += std * rng.normal();
    }
    next
}

pub fn rk4(x: &[f64], u: &[f64], omega: f64, dt: f64) -> [f64; 2] {
    let at = |x: [f64; 2], k: [f64; 2], h: f64| [x[0] + h * k[0], x[1] + h * k[1]];
    let x0 = [x[0], x[1]];
    let k1 = dynamics_rhs(&x0, u, omega);
    let k2 = dynamics_rhs(&at(x0, k1, 0.5 * dt), u, omega);
    let k3 = dynamics_rhs(&at(x0, k2, 0.5 * dt), u, omega);
    let k4 = dynamics_rhs(&at(x0, k3, dt), u, omega);
    [
        x0[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x0[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

/// Noisy residual `Δ̃ = Δ(x) + η`, `η ~ N(0, obs_noise_var)`.
pub fn observe_delta(x: &[f64], obstacle: &Obstacle, cfg: &PlantConfig, rng: &mut Rng) -> f64 {
    delta_true(x, cfg.omega, obstacle) + cfg.obs_noise_var.sqrt() * rng.normal()
}

/// `u_ref = −k_f (x − x_T)`, unsaturated.
pub fn nominal_input(x: &[f64], cfg: &PlantConfig) -> [f64; 2] {
    [-cfg.k_f * (x[0] - cfg.target[0]), -cfg.k_f * (x[1] - cfg.target[1])]
}

/// Proportional tracking plus an integral term that only runs near the
/// target, where the unknown drift would otherwise leave a steady offset.
#[derive(Debug, Clone, Default)]
pub struct NominalController {
    integral: [f64; 2],
}

impl NominalController {
    pub fn input(&mut self, x: &[f64], cfg: &PlantConfig) -> [f64; 2] {
        let e = [x[0] - cfg.target[0], x[1] - cfg.target[1]];
        if cfg.k_i > 0.0 && e[0].hypot(e[1]) < cfg.integral_zone {
            let cap = 5.0 / cfg.k_i;
            for (acc, err) in self.integral.iter_mut().zip(e) {
                *acc = (*acc + err * cfg.dt).clamp(-cap, cap);
            }
        }
        let p = nominal_input(x, cfg);
        [p[0] - cfg.k_i * self.integral[0], p[1] - cfg.k_i * self.integral[1]]
    }
}

/// Point on the known safe conic `x₂ = 1.2 (x₁ − 1.5)² + 0.3`.
pub fn conic_point(x1: f64) -> [f64; 2] {
    [x1, 1.2 * (x1 - 1.5).powi(2) + 0.3]
}

/// Warm-start states: `n` conic points with `x₁ ~ U(0.3, 1.5)`.
pub fn warmstart_states(n: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
    (0..n).map(|_| conic_point(rng.uniform_range(0.3, 1.5))).collect()
}

/// Number of warm-start samples in every scenario.
pub const WARMSTART_COUNT: usize = 20;

/// Warm-start data, one `(state, Δ̃)` list per obstacle over shared states.
pub fn warmstart_samples(obstacles: &[Obstacle], cfg: &PlantConfig, rng: &mut Rng) -> Vec<Vec<([f64; 2], f64)>> {
    let states = warmstart_states(WARMSTART_COUNT, rng);
    obstacles
        .iter()
        .map(|obs| states.iter().map(|x| (*x, observe_delta(x, obs, cfg, rng))).collect())
        .collect()
}

/// One control step of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub x: [f64; 2],
    pub u: [f64; 2],
    pub h: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub status: QpStatus,
    pub sampled: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub steps: Vec<StepRecord>,
}

impl TrajectoryRecord {
    pub fn push(&mut self, rec: StepRecord) {
        debug_assert!(self.steps.last().is_none_or(|p| p.t < rec.t));
        self.steps.push(rec);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Minimum of `h_i` over time for each constraint.
    pub fn min_h(&self) -> Vec<f64> {
        let k = self.steps.first().map_or(0, |s| s.h.len());
        (0..k)
            .map(|i| self.steps.iter().map(|s| s.h[i]).fold(f64::INFINITY, f64::min))
            .collect()
    }
}
