//! Monte-Carlo coverage of the weight-space confidence ellipsoid.

use serde::Serialize;

use crate::ablr::BayesianHead;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Vector};
use crate::safety::gamma_t;

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Config {
    pub dim: usize,
    pub delta_tilde: f64,
    pub trials: usize,
    pub horizon: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub prior_scale: f64,
    /// Multiplies the observation noise; `0` gives noiseless data.
    pub noise_scale: f64,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            dim: 10,
            delta_tilde: 0.05,
            trials: 500,
            horizon: 200,
            seed: 0,
            noise_std: 0.1f64.sqrt(),
            prior_scale: 1.0,
            noise_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop1Report {
    pub dim: usize,
    pub delta_tilde: f64,
    pub trials: usize,
    pub horizon: usize,
    /// Fraction of all checked steps where `w*` left the ellipsoid.
    pub step_violation_rate: f64,
    /// Fraction of trials with at least one such step.
    pub ever_violated_rate: f64,
    pub mean_final_gamma: f64,
}

/// Draws `w* ~ N(μ0, σ0² K0)`, streams features uniform on `[0, 1]^D` with
/// noisy targets, and checks `‖w* − μ_t‖_{K_t⁻¹} ≤ σ0 Γ_t` before the first
/// and after every update.
pub fn validate_prop1(cfg: &Prop1Config) -> Result<Prop1Report> {
    if cfg.trials == 0 || cfg.dim == 0 {
        return Err(Error::Config("trials and dimension must be positive".into()));
    }
    let d = cfg.dim;
    let mut rng = Rng::new(cfg.seed);
    let prior = BayesianHead::isotropic(Vector::zeros(d), cfg.prior_scale, cfg.noise_std)?;
    let mut violations = 0usize;
    let mut ever = 0usize;
    let mut gamma_sum = 0.0;
    for trial in 0..cfg.trials {
        let mut trial_rng = rng.fork(trial as u64);
        let w_star = Vector::from_fn(d, |_, _| cfg.noise_std * cfg.prior_scale.sqrt() * trial_rng.normal());
        let mut head = prior.cleared();
        let mut violated = false;
        let mut gamma = 0.0;
        for t in 0..=cfg.horizon {
            if t > 0 {
                let phi = Vector::from_fn(d, |_, _| trial_rng.uniform());
                let y = phi.dot(&w_star) + cfg.noise_scale * cfg.noise_std * trial_rng.normal();
                head.observe(phi, y)?;
            }
            gamma = gamma_t(head.prior_cov(), head.posterior_cov(), cfg.delta_tilde)?;
            let e = &w_star - head.posterior_mean();
            let precision = head.prior_precision() + head.gram();
            let dist = e.dot(&(&precision * &e)).sqrt();
            if dist > cfg.noise_std * gamma {
                violations += 1;
                violated = true;
            }
        }
        gamma_sum += gamma;
        ever += usize::from(violated);
    }
    let checks = cfg.trials * (cfg.horizon + 1);
    Ok(Prop1Report {
        dim: d,
        delta_tilde: cfg.delta_tilde,
        trials: cfg.trials,
        horizon: cfg.horizon,
        step_violation_rate: violations as f64 / checks as f64,
        ever_violated_rate: ever as f64 / cfg.trials as f64,
        mean_final_gamma: gamma_sum / cfg.trials as f64,
    })
}
