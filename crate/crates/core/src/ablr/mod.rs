//! Bayesian linear output layer over learned features.
//!
//! Weights follow `w ~ N(μ0, σ0² K0)` and observations `y = φ(x)ᵀ w + η` with
//! `η ~ N(0, σ0²)`. The head keeps the running sums `Σ φ φᵀ` and `Σ φ y`, so the
//! posterior precision `K0⁻¹ + Φ Φᵀ` is always exact and refactored from
//! scratch after each change.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::featurenet::FeatureMap;
use crate::numerics::{CholeskyFactor, Matrix, Vector};
use crate::safety::{gamma_t, UncertaintyModel};

/// Gaussian predictive distribution of one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct BayesianHead {
    prior_mean: Vector,
    prior_cov: Matrix,
    prior_precision: Matrix,
    noise_std: f64,
    gram: Matrix,
    moment: Vector,
    features: Vec<Vector>,
    targets: Vec<f64>,
    post_cov: Matrix,
    post_mean: Vector,
    precision_factor: CholeskyFactor,
}

impl BayesianHead {
    pub fn new(prior_mean: Vector, prior_cov: Matrix, noise_std: f64) -> Result<Self> {
        let d = prior_mean.len();
        if prior_cov.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "prior mean of length {d} with a {:?} covariance",
                prior_cov.shape()
            )));
        }
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(Error::Domain(format!("noise scale {noise_std}")));
        }
        let prior_precision = CholeskyFactor::new(&prior_cov)?.inverse();
        let precision_factor = CholeskyFactor::new(&prior_precision)?;
        Ok(Self {
            post_mean: prior_mean.clone(),
            post_cov: prior_cov.clone(),
            prior_mean,
            prior_cov,
            prior_precision,
            noise_std,
            gram: Matrix::zeros(d, d),
            moment: Vector::zeros(d),
            features: Vec::new(),
            targets: Vec::new(),
            precision_factor,
        })
    }

    /// Prior `N(μ0, σ0² c I)`.
    pub fn isotropic(prior_mean: Vector, cov_scale: f64, noise_std: f64) -> Result<Self> {
        let d = prior_mean.len();
        Self::new(prior_mean, Matrix::identity(d, d) * cov_scale, noise_std)
    }

    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn n_obs(&self) -> usize {
        self.targets.len()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn prior_mean(&self) -> &Vector {
        &self.prior_mean
    }

    pub fn prior_cov(&self) -> &Matrix {
        &self.prior_cov
    }

    pub fn prior_precision(&self) -> &Matrix {
        &self.prior_precision
    }

    pub fn posterior_mean(&self) -> &Vector {
        &self.post_mean
    }

    /// `K_t = (K0⁻¹ + Φ Φᵀ)⁻¹`, without the `σ0²` factor.
    pub fn posterior_cov(&self) -> &Matrix {
        &self.post_cov
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    pub fn moment(&self) -> &Vector {
        &self.moment
    }

    pub fn observations(&self) -> impl Iterator<Item = (&Vector, f64)> {
        self.features.iter().zip(self.targets.iter().copied())
    }

    fn refresh(&mut self) -> Result<()> {
        let precision = &self.prior_precision + &self.gram;
        self.precision_factor = CholeskyFactor::new(&precision)?;
        if self.targets.is_empty() {
            self.post_cov = self.prior_cov.clone();
            self.post_mean = self.prior_mean.clone();
            return Ok(());
        }
        self.post_cov = self.precision_factor.inverse();
        let rhs = &self.moment + &self.prior_precision * &self.prior_mean;
        self.post_mean = self.precision_factor.solve_vec(&rhs);
        Ok(())
    }

    fn push(&mut self, phi: Vector, y: f64) -> Result<()> {
        if phi.len() != self.dim() {
            return Err(Error::Shape(format!(
                "feature of length {} for a head of dimension {}",
                phi.len(),
                self.dim()
            )));
        }
        self.gram += &phi * phi.transpose();
        self.moment += &phi * y;
        self.features.push(phi);
        self.targets.push(y);
        Ok(())
    }

    /// Posterior given exactly `data` (any previous observations are dropped).
    pub fn posterior_from_data(&self, data: &[(Vector, f64)]) -> Result<Self> {
        let mut head = self.cleared();
        for (phi, y) in data {
            head.push(phi.clone(), *y)?;
        }
        head.refresh()?;
        Ok(head)
    }

    /// The same prior with no observations.
    pub fn cleared(&self) -> Self {
        let d = self.dim();
        Self {
            gram: Matrix::zeros(d, d),
            moment: Vector::zeros(d),
            features: Vec::new(),
            targets: Vec::new(),
            post_mean: self.prior_mean.clone(),
            post_cov: self.prior_cov.clone(),
            precision_factor: CholeskyFactor::new(&self.prior_precision)
                .expect("prior precision was factored at construction"),
            ..self.clone()
        }
    }

    /// Adds one observation in feature space.
    pub fn observe(&mut self, phi: Vector, y: f64) -> Result<()> {
        self.push(phi, y)?;
        self.refresh()
    }

    /// Adds one observation of the state `x`.
    pub fn update_online(&mut self, x: &[f64], y: f64, features: &FeatureMap) -> Result<()> {
        self.observe(features.features(x), y)
    }

    pub fn set_prior_mean(&mut self, mu0: Vector) -> Result<()> {
        if mu0.len() != self.dim() {
            return Err(Error::Shape("prior mean length".into()));
        }
        self.prior_mean = mu0;
        self.refresh()
    }

    pub fn predict_features(&self, phi: &Vector) -> Prediction {
        let mean = self.post_mean.dot(phi);
        let quad = self.precision_factor.whiten(phi).norm_squared();
        Prediction {
            mean,
            variance: self.noise_std * self.noise_std * (1.0 + quad),
        }
    }

    pub fn predict(&self, x: &[f64], features: &FeatureMap) -> Prediction {
        self.predict_features(&features.features(x))
    }

    /// `Σ_j r_j² / Σ_j` over the stored observations, with `r_j` the in-sample
    /// residual and `Σ_j` its predictive variance.
    pub fn finetune_loss(&self) -> f64 {
        self.observations()
            .map(|(phi, y)| {
                let p = self.predict_features(phi);
                (y - p.mean).powi(2) / p.variance
            })
            .sum()
    }

    /// Gradient of [`Self::finetune_loss`] with respect to `μ0`.
    ///
    /// `μ_t` depends on `μ0` through `K_t K0⁻¹`, and `Σ_j` not at all.
    pub fn finetune_gradient(&self) -> Vector {
        let mut g = Vector::zeros(self.dim());
        for (phi, y) in self.observations() {
            let p = self.predict_features(phi);
            g -= phi * (2.0 * (y - p.mean) / p.variance);
        }
        &self.prior_precision * (&self.post_cov * g)
    }

    /// Gradient descent on `μ0` with backtracking; returns the loss trace of
    /// accepted steps (first entry is the starting loss).
    pub fn finetune_prior_mean(&mut self, steps: usize, step_size: f64) -> Result<Vec<f64>> {
        if self.n_obs() == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut loss = self.finetune_loss();
        let mut trace = vec![loss];
        let mut eta = step_size;
        for _ in 0..steps {
            let g = self.finetune_gradient();
            if g.norm() == 0.0 {
                break;
            }
            let start = self.prior_mean.clone();
            let mut accepted = false;
            for _ in 0..40 {
                self.set_prior_mean(&start - &g * eta)?;
                let trial = self.finetune_loss();
                if trial <= loss {
                    loss = trial;
                    accepted = true;
                    break;
                }
                eta *= 0.5;
            }
            if !accepted {
                self.set_prior_mean(start)?;
                break;
            }
            trace.push(loss);
        }
        Ok(trace)
    }
}

/// Conditions `head` on `data`, then fine-tunes `μ0` against the same data.
pub fn finetune_prior_mean(
    head: &BayesianHead,
    data: &[(Vector, f64)],
    steps: usize,
    step_size: f64,
) -> Result<BayesianHead> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut head = head.posterior_from_data(data)?;
    head.finetune_prior_mean(steps, step_size)?;
    Ok(head)
}

/// A Bayesian head paired with the feature map it reads.
#[derive(Debug, Clone)]
pub struct MetaModel {
    pub features: FeatureMap,
    pub head: BayesianHead,
}

impl MetaModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            features: ckpt.features.clone(),
            head: ckpt.head()?,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Prediction {
        self.head.predict(x, &self.features)
    }

    pub fn observe(&mut self, x: &[f64], y: f64) -> Result<()> {
        self.head.update_online(x, y, &self.features)
    }

    /// Conditions on `data` and fine-tunes `μ0` for `steps` iterations.
    pub fn warm_start(&mut self, data: &[([f64; 2], f64)], steps: usize, step_size: f64) -> Result<()> {
        let pairs: Vec<(Vector, f64)> = data.iter().map(|(x, y)| (self.features.features(x), *y)).collect();
        self.head = finetune_prior_mean(&self.head, &pairs, steps, step_size)?;
        Ok(())
    }
}

impl UncertaintyModel for MetaModel {
    fn predict_delta(&self, x: &[f64]) -> Prediction {
        self.predict(x)
    }

    fn confidence_radius(&self, delta_tilde: f64) -> Result<Option<f64>> {
        gamma_t(self.head.prior_cov(), self.head.posterior_cov(), delta_tilde).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{eig_extrema_psd, Rng};
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn scalar_head() -> BayesianHead {
        BayesianHead::isotropic(v(&[0.0]), 1.0, 1.0).unwrap()
    }

    fn random_head(d: usize, rng: &mut Rng) -> BayesianHead {
        let b = Matrix::from_fn(d, d, |_, _| rng.normal());
        let k0 = &b * b.transpose() / d as f64 + Matrix::identity(d, d) * 0.3;
        let mu0 = Vector::from_fn(d, |_, _| rng.normal());
        BayesianHead::new(mu0, k0, 0.4).unwrap()
    }

    fn random_data(n: usize, d: usize, rng: &mut Rng) -> Vec<(Vector, f64)> {
        (0..n)
            .map(|_| (Vector::from_fn(d, |_, _| rng.uniform()), rng.gaussian(0.0, 2.0)))
            .collect()
    }

    #[test]
    fn empty_data_is_prior() {
        let mut rng = Rng::new(1);
        let head = random_head(4, &mut rng);
        let post = head.posterior_from_data(&[]).unwrap();
        assert_eq!(post.posterior_mean(), head.prior_mean());
        assert!((post.posterior_cov() - head.prior_cov()).amax() < 1e-12);
    }

    #[test]
    fn scalar_posterior_closed_form() {
        let post = scalar_head().posterior_from_data(&[(v(&[1.0]), 2.0)]).unwrap();
        assert!((post.posterior_cov()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((post.posterior_mean()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn posterior_shrinks_covariance() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let head = random_head(5, &mut rng);
            let data = random_data(12, 5, &mut rng);
            let post = head.posterior_from_data(&data).unwrap();
            let (_, prior_max) = eig_extrema_psd(head.prior_cov()).unwrap();
            let (_, post_max) = eig_extrema_psd(post.posterior_cov()).unwrap();
            assert!(post_max <= prior_max + 1e-12);
            // Loewner order: K0 - K_t is PSD.
            let (diff_min, _) = eig_extrema_psd(&(head.prior_cov() - post.posterior_cov())).unwrap();
            assert!(diff_min >= -1e-12);
        }
    }

    #[test]
    fn posterior_is_idempotent() {
        let mut rng = Rng::new(3);
        let head = random_head(3, &mut rng);
        let data = random_data(6, 3, &mut rng);
        let a = head.posterior_from_data(&data).unwrap();
        let b = a.posterior_from_data(&data).unwrap();
        assert_eq!(a.posterior_mean(), b.posterior_mean());
        assert_eq!(a.posterior_cov(), b.posterior_cov());
    }

    #[test]
    fn repeated_observation_shrinks_variance() {
        let mut head = scalar_head();
        let phi = v(&[0.8]);
        let mut last = head.predict_features(&phi).variance;
        for _ in 0..50 {
            head.observe(phi.clone(), 1.0).unwrap();
            let var = head.predict_features(&phi).variance;
            assert!(var < last);
            assert!(var >= 1.0);
            last = var;
        }
        assert!(last - 1.0 < 0.05);
    }

    #[test]
    fn zero_feature_leaves_posterior() {
        let mut rng = Rng::new(4);
        let mut head = random_head(3, &mut rng);
        head.observe(v(&[0.2, 0.5, 0.1]), 1.0).unwrap();
        let before = head.clone();
        head.observe(Vector::zeros(3), 7.0).unwrap();
        assert!((head.posterior_mean() - before.posterior_mean()).amax() < 1e-12);
        assert!((head.posterior_cov() - before.posterior_cov()).amax() < 1e-12);
    }

    #[test]
    fn predictive_examples() {
        let head = scalar_head();
        let p = head.predict_features(&v(&[1.0]));
        assert!((p.variance - 2.0).abs() < 1e-15);
        let mut head = scalar_head();
        head.set_prior_mean(v(&[1.0])).unwrap();
        assert!((head.predict_features(&v(&[0.7])).mean - 0.7).abs() < 1e-15);
    }

    #[test]
    fn finetune_requires_data() {
        let mut head = scalar_head();
        assert!(matches!(head.finetune_prior_mean(5, 0.1), Err(Error::EmptyDataset)));
        assert!(matches!(
            finetune_prior_mean(&scalar_head(), &[], 5, 0.1),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn finetune_at_stationary_point() {
        // Noise-free data generated by the prior mean itself.
        let mut rng = Rng::new(5);
        let head = random_head(4, &mut rng);
        let data: Vec<(Vector, f64)> = (0..10)
            .map(|_| {
                let phi = Vector::from_fn(4, |_, _| rng.uniform());
                let y = head.prior_mean().dot(&phi);
                (phi, y)
            })
            .collect();
        let tuned = finetune_prior_mean(&head, &data, 50, 0.1).unwrap();
        assert!((tuned.prior_mean() - head.prior_mean()).amax() < 1e-8);
    }

    #[test]
    fn finetune_scalar_reaches_closed_form() {
        // L(μ0) is minimized exactly at μ0 = y / φ.
        let (phi, y) = (0.6, 1.5);
        let head = scalar_head();
        let tuned = finetune_prior_mean(&head, &[(v(&[phi]), y)], 2000, 0.5).unwrap();
        assert!((tuned.prior_mean()[0] - y / phi).abs() < 1e-6);
    }

    #[test]
    fn finetune_gradient_matches_finite_differences() {
        let mut rng = Rng::new(6);
        for _ in 0..10 {
            let head = random_head(4, &mut rng);
            let data = random_data(8, 4, &mut rng);
            let head = head.posterior_from_data(&data).unwrap();
            let g = head.finetune_gradient();
            let h = 1e-5;
            for k in 0..4 {
                let mut plus = head.clone();
                let mut mu = head.prior_mean().clone();
                mu[k] += h;
                plus.set_prior_mean(mu.clone()).unwrap();
                let mut minus = head.clone();
                mu[k] -= 2.0 * h;
                minus.set_prior_mean(mu).unwrap();
                let fd = (plus.finetune_loss() - minus.finetune_loss()) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-4 * g[k].abs().max(1e-2), "{fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn finetune_trace_non_increasing() {
        let mut rng = Rng::new(7);
        let head = random_head(5, &mut rng);
        let data = random_data(20, 5, &mut rng);
        let mut head = head.posterior_from_data(&data).unwrap();
        let trace = head.finetune_prior_mean(100, 1.0).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(trace.last().unwrap() < &trace[0]);
    }

    proptest! {
        #[test]
        fn batch_equals_incremental(seed in any::<u64>(), n in 1usize..60, d in 1usize..8) {
            let mut rng = Rng::new(seed);
            let head = random_head(d, &mut rng);
            let data = random_data(n, d, &mut rng);
            let batch = head.posterior_from_data(&data).unwrap();
            let mut inc = head.clone();
            for (phi, y) in &data {
                inc.observe(phi.clone(), *y).unwrap();
            }
            prop_assert!((batch.posterior_mean() - inc.posterior_mean()).amax() < 1e-10);
            prop_assert!((batch.posterior_cov() - inc.posterior_cov()).amax() < 1e-10);
        }

        #[test]
        fn variance_at_least_noise(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let head = random_head(4, &mut rng);
            let head = head.posterior_from_data(&random_data(5, 4, &mut rng)).unwrap();
            let phi = Vector::from_fn(4, |_, _| rng.uniform());
            prop_assert!(head.predict_features(&phi).variance >= 0.4 * 0.4);
        }
    }
}
