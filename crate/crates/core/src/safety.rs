//! Circular-obstacle barrier functions, the four CBF constraint builders and
//! the self-normalized confidence radius `Γ_t`.

use crate::ablr::Prediction;
use crate::error::{Error, Result};
use crate::numerics::{chi2_quantile, eig_extrema_psd, logdet_psd, Matrix};
use crate::qp::Halfspace;
use crate::sim::{unknown_drift, Dynamics};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    pub fn new(center: [f64; 2], radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn validated(center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite() && center.iter().all(|c| c.is_finite())) {
            return Err(Error::Domain(format!(
                "obstacle needs a finite centre and positive radius, got {center:?}, {radius}"
            )));
        }
        Ok(Self::new(center, radius))
    }
}

/// `h(x) = ‖x − c‖² − r²` and `∇h = 2 (x − c)`.
pub fn h_and_grad(x: &[f64], obs: &Obstacle) -> (f64, [f64; 2]) {
    let d = [x[0] - obs.center[0], x[1] - obs.center[1]];
    (
        d[0] * d[0] + d[1] * d[1] - obs.radius * obs.radius,
        [2.0 * d[0], 2.0 * d[1]],
    )
}

/// `(L_f h, L_g h)` for the nominal dynamics.
pub fn lie_terms<D: Dynamics + ?Sized>(x: &[f64], obs: &Obstacle, dynamics: &D) -> (f64, Vec<f64>) {
    let (_, grad) = h_and_grad(x, obs);
    let f = dynamics.drift(x);
    let g = dynamics.input_matrix(x);
    let lf = grad[0] * f[0] + grad[1] * f[1];
    let lg = (0..g.ncols())
        .map(|j| grad[0] * g[(0, j)] + grad[1] * g[(1, j)])
        .collect();
    (lf, lg)
}

/// `Δ(x) = ∇h(x)ᵀ φ_ω(x)`, the true residual of the barrier derivative.
pub fn delta_true(x: &[f64], omega: f64, obs: &Obstacle) -> f64 {
    let (_, grad) = h_and_grad(x, obs);
    let phi = unknown_drift(x, omega);
    grad[0] * phi[0] + grad[1] * phi[1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Opt,
    Rust,
    Gp2,
    MapSac,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Opt, Method::Rust, Method::Gp2, Method::MapSac];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Opt => "opt",
            Method::Rust => "rust",
            Method::Gp2 => "gp2",
            Method::MapSac => "mapsac",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::Gp2 | Method::MapSac)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Worst-case residual used by the robust baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustBound {
    /// `ω_max |cos x₁ + sin x₂| (|∂₁h| + |∂₂h|)`.
    Structural { omega_max: f64 },
    /// A constant `|Δ| ≤ B` everywhere.
    Constant(f64),
}

impl Default for RobustBound {
    fn default() -> Self {
        RobustBound::Structural { omega_max: 2.5 }
    }
}

impl RobustBound {
    pub fn at(&self, x: &[f64], obs: &Obstacle) -> f64 {
        match *self {
            RobustBound::Structural { omega_max } => {
                let (_, g) = h_and_grad(x, obs);
                omega_max * (x[0].cos() + x[1].sin()).abs() * (g[0].abs() + g[1].abs())
            }
            RobustBound::Constant(b) => b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaMode {
    Fixed,
    /// `β = max(β_fixed, Γ_t)`.
    ConfidenceRadius,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyBudget {
    pub delta: f64,
    pub kappa: f64,
    pub beta: f64,
    pub mode: BetaMode,
}

impl Default for SafetyBudget {
    fn default() -> Self {
        Self {
            delta: 0.05,
            kappa: 1.0,
            beta: 1.96,
            mode: BetaMode::Fixed,
        }
    }
}

impl SafetyBudget {
    pub fn delta_tilde(&self) -> f64 {
        self.delta / self.kappa
    }

    pub fn validate(&self) -> Result<()> {
        let dt = self.delta_tilde();
        if !(self.kappa > 0.0 && dt > 0.0 && dt < 1.0) {
            return Err(Error::Domain(format!("δ/κ must lie in (0, 1), got {dt}")));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Domain(format!("β must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

pub fn beta_for(budget: &SafetyBudget, gamma: f64) -> f64 {
    match budget.mode {
        BetaMode::Fixed => budget.beta,
        BetaMode::ConfidenceRadius => budget.beta.max(gamma),
    }
}

/// `Γ_t = √(2 log(det K_t^{-1/2} det K_0^{1/2} / δ̃)) + √(λ_max(K_t)/λ_min(K_0) χ²_D(1 − δ̃))`.
pub fn gamma_t(k0: &Matrix, kt: &Matrix, delta_tilde: f64) -> Result<f64> {
    if !(delta_tilde > 0.0 && delta_tilde < 1.0) {
        return Err(Error::Domain(format!("δ̃ must lie in (0, 1), got {delta_tilde}")));
    }
    let d = k0.nrows();
    let log_ratio = 0.5 * (logdet_psd(k0)? - logdet_psd(kt)?) - delta_tilde.ln();
    let (_, kt_max) = eig_extrema_psd(kt)?;
    let (k0_min, _) = eig_extrema_psd(k0)?;
    let chi = chi2_quantile(d, 1.0 - delta_tilde)?;
    Ok((2.0 * log_ratio.max(0.0)).sqrt() + (kt_max / k0_min * chi).sqrt())
}

/// A learned estimate of the barrier residual `Δ`.
pub trait UncertaintyModel {
    fn predict_delta(&self, x: &[f64]) -> Prediction;

    /// `Γ_t` for models that carry a weight-space confidence set.
    fn confidence_radius(&self, _delta_tilde: f64) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Everything the constraint builders need besides the model.
#[derive(Debug, Clone, Copy)]
pub struct CbfSettings<'a, D: Dynamics + ?Sized> {
    pub dynamics: &'a D,
    pub alpha_gain: f64,
    /// True environment parameter, read only by the oracle method.
    pub omega_true: f64,
    pub robust: RobustBound,
    pub budget: SafetyBudget,
}

/// `a·u + b ≥ 0` plus what went into it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub a: Vec<f64>,
    pub b: f64,
    pub method: Method,
    pub obstacle: usize,
    pub h: f64,
    /// Residual estimate: `Δ` for the oracle, `−B(x)` for the robust bound,
    /// the predictive mean for learned models.
    pub mu: f64,
    pub sigma: f64,
    /// `β σ`.
    pub margin: f64,
}

impl ConstraintSpec {
    pub fn value(&self, u: &[f64]) -> f64 {
        self.a.iter().zip(u).map(|(a, u)| a * u).sum::<f64>() + self.b
    }

    pub fn halfspace(&self) -> Halfspace {
        Halfspace {
            a: self.a.clone(),
            b: self.b,
        }
    }
}

/// `a = L_g h`, `b = L_f h + α h + T` with `T` chosen by the method.
pub fn build_constraint<D: Dynamics + ?Sized>(
    method: Method,
    x: &[f64],
    obstacle_index: usize,
    obs: &Obstacle,
    model: Option<&dyn UncertaintyModel>,
    settings: &CbfSettings<'_, D>,
) -> Result<ConstraintSpec> {
    let (h, _) = h_and_grad(x, obs);
    let (lf, lg) = lie_terms(x, obs, settings.dynamics);
    let (mu, sigma, margin) = match method {
        Method::Opt => (delta_true(x, settings.omega_true, obs), 0.0, 0.0),
        Method::Rust => (-settings.robust.at(x, obs), 0.0, 0.0),
        Method::Gp2 | Method::MapSac => {
            let model = model.ok_or(Error::ModelMissing(method.as_str()))?;
            let p = model.predict_delta(x);
            let gamma = match settings.budget.mode {
                BetaMode::Fixed => 0.0,
                BetaMode::ConfidenceRadius => model.confidence_radius(settings.budget.delta_tilde())?.unwrap_or(0.0),
            };
            let sigma = p.std();
            (p.mean, sigma, beta_for(&settings.budget, gamma) * sigma)
        }
    };
    Ok(ConstraintSpec {
        a: lg,
        b: lf + settings.alpha_gain * h + mu - margin,
        method,
        obstacle: obstacle_index,
        h,
        mu,
        sigma,
        margin,
    })
}
