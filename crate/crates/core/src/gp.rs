//! Exact Gaussian-process regression with a Matérn 5/2 kernel, constant mean
//! and fixed Gaussian noise, plus a kernel-generic posterior.

use crate::ablr::Prediction;
use crate::error::{Error, Result};
use crate::numerics::{CholeskyFactor, Matrix, Rng, Vector};
use crate::safety::UncertaintyModel;

const SQRT5: f64 = 2.236_067_977_499_79;
const JITTERS: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

pub const LOG_LENGTHSCALE_BOUNDS: (f64, f64) = (-4.605_170_185_988_091, 4.605_170_185_988_091);
pub const LOG_VARIANCE_BOUNDS: (f64, f64) = (-9.210_340_371_976_182, 9.210_340_371_976_182);
pub const MEAN_BOUNDS: (f64, f64) = (-10.0, 10.0);

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `s² (1 + √5 r/ℓ + 5 r²/(3ℓ²)) exp(−√5 r/ℓ)`.
pub fn matern52(x: &[f64], x2: &[f64], lengthscale: f64, variance: f64) -> f64 {
    let z = SQRT5 * dist(x, x2) / lengthscale;
    variance * (1.0 + z + z * z / 3.0) * (-z).exp()
}

/// `∂k/∂log ℓ = s² (z²/3)(1 + z) exp(−z)`.
fn matern52_dlog_lengthscale(r: f64, lengthscale: f64, variance: f64) -> f64 {
    let z = SQRT5 * r / lengthscale;
    variance * z * z / 3.0 * (1.0 + z) * (-z).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpHyper {
    pub lengthscale: f64,
    pub variance: f64,
    pub mean: f64,
}

impl GpHyper {
    fn to_log(self) -> [f64; 3] {
        [self.lengthscale.ln(), self.variance.ln(), self.mean]
    }

    fn from_log(t: [f64; 3]) -> Self {
        Self {
            lengthscale: t[0].exp(),
            variance: t[1].exp(),
            mean: t[2],
        }
    }

    fn clamp_log(t: &mut [f64; 3]) {
        t[0] = t[0].clamp(LOG_LENGTHSCALE_BOUNDS.0, LOG_LENGTHSCALE_BOUNDS.1);
        t[1] = t[1].clamp(LOG_VARIANCE_BOUNDS.0, LOG_VARIANCE_BOUNDS.1);
        t[2] = t[2].clamp(MEAN_BOUNDS.0, MEAN_BOUNDS.1);
    }
}

/// Multi-start Adam settings for the marginal-likelihood fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub starts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            steps: 200,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    hyper: GpHyper,
    noise_var: f64,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    factor: CholeskyFactor,
    alpha: Vector,
}

fn kernel_matrix(xs: &[Vec<f64>], hyper: &GpHyper) -> Matrix {
    let n = xs.len();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.variance;
        for j in 0..i {
            let v = matern52(&xs[i], &xs[j], hyper.lengthscale, hyper.variance);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn factor_with_jitter(mut k: Matrix, noise_var: f64) -> Result<CholeskyFactor> {
    let n = k.nrows();
    for i in 0..n {
        k[(i, i)] += noise_var;
    }
    let mut last = None;
    for jitter in JITTERS {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        match CholeskyFactor::new(&kj) {
            Ok(f) => return Ok(f),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one jitter level"))
}

/// Log marginal likelihood and its gradient in `(log ℓ, log s², c)`.
pub fn log_marginal(xs: &[Vec<f64>], ys: &[f64], noise_var: f64, hyper: &GpHyper) -> Result<(f64, [f64; 3])> {
    let n = xs.len();
    let factor = factor_with_jitter(kernel_matrix(xs, hyper), noise_var)?;
    let r = Vector::from_iterator(n, ys.iter().map(|y| y - hyper.mean));
    let alpha = factor.solve_vec(&r);
    let value = -0.5 * r.dot(&alpha) - 0.5 * factor.logdet() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // ∂/∂θ = ½ tr((ααᵀ − K⁻¹) ∂K/∂θ)
    let kinv = factor.inverse();
    let mut g_ell = 0.0;
    let mut g_var = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let r = dist(&xs[i], &xs[j]);
            g_ell += w * matern52_dlog_lengthscale(r, hyper.lengthscale, hyper.variance);
            g_var += w * matern52(&xs[i], &xs[j], hyper.lengthscale, hyper.variance);
        }
    }
    Ok((value, [0.5 * g_ell, 0.5 * g_var, alpha.sum()]))
}

fn adam_ascent(
    xs: &[Vec<f64>],
    ys: &[f64],
    noise_var: f64,
    start: GpHyper,
    steps: usize,
    lr: f64,
) -> Result<(GpHyper, f64)> {
    let mut t = start.to_log();
    GpHyper::clamp_log(&mut t);
    let (mut best_val, _) = log_marginal(xs, ys, noise_var, &GpHyper::from_log(t))?;
    let mut best = t;
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for k in 1..=steps {
        let (val, g) = log_marginal(xs, ys, noise_var, &GpHyper::from_log(t))?;
        if val > best_val {
            best_val = val;
            best = t;
        }
        for i in 0..3 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(k as i32));
            let vh = v[i] / (1.0 - b2.powi(k as i32));
            t[i] += lr * mh / (vh.sqrt() + eps);
        }
        GpHyper::clamp_log(&mut t);
    }
    let (val, _) = log_marginal(xs, ys, noise_var, &GpHyper::from_log(t))?;
    if val > best_val {
        best_val = val;
        best = t;
    }
    Ok((GpHyper::from_log(best), best_val))
}

/// Fits `(s², ℓ, c)` by multi-start gradient ascent on the log marginal
/// likelihood. The first start is data-driven, the rest are seeded draws.
pub fn gp_fit(xs: &[Vec<f64>], ys: &[f64], noise_var: f64, opts: &FitOptions) -> Result<GpModel> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::EmptyDataset);
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let spread = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).max(1e-2);
    let mut rng = Rng::new(opts.seed);
    let mut best: Option<(GpHyper, f64)> = None;
    for s in 0..opts.starts.max(1) {
        let start = if s == 0 {
            GpHyper {
                lengthscale: 1.0,
                variance: spread,
                mean: mean.clamp(MEAN_BOUNDS.0, MEAN_BOUNDS.1),
            }
        } else {
            GpHyper {
                lengthscale: 10f64.powf(rng.uniform_range(-1.0, 1.0)),
                variance: spread * 10f64.powf(rng.uniform_range(-1.0, 1.0)),
                mean: mean + spread.sqrt() * rng.normal(),
            }
        };
        let candidate = adam_ascent(xs, ys, noise_var, start, opts.steps, opts.learning_rate)?;
        if best.is_none_or(|(_, v)| candidate.1 > v) {
            best = Some(candidate);
        }
    }
    let (hyper, _) = best.expect("at least one start");
    GpModel::new(xs.to_vec(), ys.to_vec(), hyper, noise_var)
}

impl GpModel {
    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<f64>, hyper: GpHyper, noise_var: f64) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Shape(format!("{} inputs and {} targets", xs.len(), ys.len())));
        }
        let factor = factor_with_jitter(kernel_matrix(&xs, &hyper), noise_var)?;
        let r = Vector::from_iterator(ys.len(), ys.iter().map(|y| y - hyper.mean));
        let alpha = factor.solve_vec(&r);
        Ok(Self {
            hyper,
            noise_var,
            xs,
            ys,
            factor,
            alpha,
        })
    }

    pub fn hyper(&self) -> GpHyper {
        self.hyper
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn n_obs(&self) -> usize {
        self.ys.len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn targets(&self) -> &[f64] {
        &self.ys
    }

    pub fn log_marginal(&self) -> Result<f64> {
        Ok(log_marginal(&self.xs, &self.ys, self.noise_var, &self.hyper)?.0)
    }

    /// Posterior of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> Prediction {
        let h = &self.hyper;
        let kx = Vector::from_iterator(
            self.xs.len(),
            self.xs.iter().map(|xi| matern52(x, xi, h.lengthscale, h.variance)),
        );
        let v = self.factor.whiten(&kx);
        Prediction {
            mean: h.mean + kx.dot(&self.alpha),
            variance: (h.variance - v.norm_squared()).max(0.0),
        }
    }

    /// Posterior of a noisy observation at `x`.
    pub fn predict_observation(&self, x: &[f64]) -> Prediction {
        let p = self.predict(x);
        Prediction {
            mean: p.mean,
            variance: p.variance + self.noise_var,
        }
    }

    /// Adds a sample and refits, warm-starting from the current
    /// hyperparameters with a short single-start ascent.
    pub fn add_and_refit(&mut self, x: Vec<f64>, y: f64, steps: usize, lr: f64) -> Result<()> {
        self.xs.push(x);
        self.ys.push(y);
        let (hyper, _) = adam_ascent(&self.xs, &self.ys, self.noise_var, self.hyper, steps, lr)?;
        *self = GpModel::new(
            std::mem::take(&mut self.xs),
            std::mem::take(&mut self.ys),
            hyper,
            self.noise_var,
        )?;
        Ok(())
    }
}

/// Uses the noisy-observation predictive, like the Bayesian head does.
impl UncertaintyModel for GpModel {
    fn predict_delta(&self, x: &[f64]) -> Prediction {
        self.predict_observation(x)
    }
}

/// Exact GP posterior under an arbitrary kernel and mean function.
pub struct KernelGp<K, M> {
    kernel: K,
    mean: M,
    xs: Vec<Vec<f64>>,
    factor: CholeskyFactor,
    alpha: Vector,
}

impl<K, M> KernelGp<K, M>
where
    K: Fn(&[f64], &[f64]) -> f64,
    M: Fn(&[f64]) -> f64,
{
    pub fn fit(kernel: K, mean: M, xs: Vec<Vec<f64>>, ys: &[f64], noise_var: f64) -> Result<Self> {
        let n = xs.len();
        let mut k = Matrix::from_fn(n, n, |i, j| kernel(&xs[i], &xs[j]));
        for i in 0..n {
            k[(i, i)] += noise_var;
        }
        let factor = CholeskyFactor::new(&k)?;
        let r = Vector::from_iterator(n, ys.iter().zip(&xs).map(|(y, x)| y - mean(x)));
        let alpha = factor.solve_vec(&r);
        Ok(Self {
            kernel,
            mean,
            xs,
            factor,
            alpha,
        })
    }

    /// Latent posterior at `x`.
    pub fn predict(&self, x: &[f64]) -> Prediction {
        let kx = Vector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| (self.kernel)(x, xi)));
        let v = self.factor.whiten(&kx);
        Prediction {
            mean: (self.mean)(x) + kx.dot(&self.alpha),
            variance: (self.kernel)(x, x) - v.norm_squared(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_data(rng: &mut Rng, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.uniform_range(0.0, 3.0), rng.uniform_range(0.0, 3.0)])
            .collect();
        let ys = xs
            .iter()
            .map(|x| (x[0]).sin() + 0.5 * x[1] + 0.05 * rng.normal())
            .collect();
        (xs, ys)
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(matern52(&[0.3, 0.1], &[0.3, 0.1], 0.7, 2.5), 2.5);
        assert!(matern52(&[0.0, 0.0], &[1e3, 0.0], 1.0, 1.0) < 1e-300);
        let expected = (1.0 + SQRT5 + 5.0 / 3.0) * (-SQRT5).exp();
        assert!((matern52(&[0.0, 0.0], &[1.0, 0.0], 1.0, 1.0) - expected).abs() < 1e-15);
        assert!((expected - 0.5240).abs() < 1e-4);
    }

    #[test]
    fn lengthscale_derivative() {
        for r in [0.0, 0.1, 0.7, 2.0] {
            let ell: f64 = 0.8;
            let h = 1e-6;
            let f = |l: f64| matern52(&[0.0], &[r], l, 1.3);
            let fd = (f((ell.ln() + h).exp()) - f((ell.ln() - h).exp())) / (2.0 * h);
            assert!((fd - matern52_dlog_lengthscale(r, ell, 1.3)).abs() < 1e-8);
        }
    }

    #[test]
    fn marginal_gradient_matches_differences() {
        let (xs, ys) = grid_data(&mut Rng::new(3), 12);
        let hyper = GpHyper {
            lengthscale: 0.9,
            variance: 1.7,
            mean: 0.4,
        };
        let (_, g) = log_marginal(&xs, &ys, 0.1, &hyper).unwrap();
        let t = hyper.to_log();
        for i in 0..3 {
            let h = 1e-5;
            let (mut tp, mut tm) = (t, t);
            tp[i] += h;
            tm[i] -= h;
            let fp = log_marginal(&xs, &ys, 0.1, &GpHyper::from_log(tp)).unwrap().0;
            let fm = log_marginal(&xs, &ys, 0.1, &GpHyper::from_log(tm)).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn constant_data_recovers_mean() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.3, 0.0]).collect();
        let ys = vec![2.5; 10];
        let gp = gp_fit(&xs, &ys, 1e-6, &FitOptions::default()).unwrap();
        assert!((gp.predict(&[0.45, 0.0]).mean - 2.5).abs() < 1e-3);
    }

    #[test]
    fn single_sample_fit() {
        let gp = gp_fit(&[vec![0.5, 0.5]], &[1.0], 0.1, &FitOptions::default()).unwrap();
        assert!(gp.predict(&[0.5, 0.5]).mean.is_finite());
    }

    #[test]
    fn refit_beats_generating_hyperparameters() {
        let mut rng = Rng::new(11);
        let truth = GpHyper {
            lengthscale: 0.8,
            variance: 1.5,
            mean: 0.3,
        };
        let xs: Vec<Vec<f64>> = (0..25)
            .map(|_| vec![rng.uniform_range(0.0, 3.0), rng.uniform_range(0.0, 3.0)])
            .collect();
        let mut k = kernel_matrix(&xs, &truth);
        for i in 0..xs.len() {
            k[(i, i)] += 0.1;
        }
        let l = CholeskyFactor::new(&k).unwrap();
        let z = Vector::from_fn(xs.len(), |_, _| rng.normal());
        let ys: Vec<f64> = (l.l() * z).iter().map(|v| v + truth.mean).collect();
        let fit = gp_fit(&xs, &ys, 0.1, &FitOptions::default()).unwrap();
        let at_truth = log_marginal(&xs, &ys, 0.1, &truth).unwrap().0;
        assert!(fit.log_marginal().unwrap() >= at_truth - 1e-3);
    }

    #[test]
    fn interpolation_and_reversion() {
        let (xs, ys) = grid_data(&mut Rng::new(4), 8);
        let hyper = GpHyper {
            lengthscale: 0.5,
            variance: 2.0,
            mean: -0.7,
        };
        let gp = GpModel::new(xs.clone(), ys.clone(), hyper, 1e-10).unwrap();
        assert!((gp.predict(&xs[3]).mean - ys[3]).abs() < 1e-4);
        let far = gp.predict(&[100.0, 100.0]);
        assert!((far.mean + 0.7).abs() < 1e-12);
        assert!((far.variance - 2.0).abs() < 1e-12);
    }

    #[test]
    fn variance_bounded_and_monotone() {
        let (xs, ys) = grid_data(&mut Rng::new(5), 15);
        let hyper = GpHyper {
            lengthscale: 0.6,
            variance: 1.2,
            mean: 0.0,
        };
        let grid: Vec<[f64; 2]> = (0..21)
            .flat_map(|i| (0..21).map(move |j| [i as f64 * 0.15, j as f64 * 0.15]))
            .collect();
        let mut prev: Option<Vec<f64>> = None;
        for n in 1..=xs.len() {
            let gp = GpModel::new(xs[..n].to_vec(), ys[..n].to_vec(), hyper, 0.1).unwrap();
            let vars: Vec<f64> = grid.iter().map(|x| gp.predict(x).variance).collect();
            assert!(vars.iter().all(|v| (0.0..=1.2 + 1e-12).contains(v)));
            if let Some(p) = &prev {
                assert!(vars.iter().zip(p).all(|(a, b)| *a <= b + 1e-12));
            }
            prev = Some(vars);
        }
    }

    #[test]
    fn kernel_gp_matches_matern_model() {
        let (xs, ys) = grid_data(&mut Rng::new(6), 10);
        let hyper = GpHyper {
            lengthscale: 0.9,
            variance: 1.1,
            mean: 0.2,
        };
        let a = GpModel::new(xs.clone(), ys.clone(), hyper, 0.1).unwrap();
        let b = KernelGp::fit(
            |p: &[f64], q: &[f64]| matern52(p, q, 0.9, 1.1),
            |_: &[f64]| 0.2,
            xs,
            &ys,
            0.1,
        )
        .unwrap();
        for x in [[0.1, 0.2], [1.5, 2.5], [4.0, -1.0]] {
            let (pa, pb) = (a.predict(&x), b.predict(&x));
            assert!((pa.mean - pb.mean).abs() < 1e-12);
            assert!((pa.variance - pb.variance).abs() < 1e-12);
        }
    }

    #[test]
    fn add_and_refit_grows() {
        let (xs, ys) = grid_data(&mut Rng::new(7), 6);
        let mut gp = gp_fit(&xs, &ys, 0.1, &FitOptions::default()).unwrap();
        gp.add_and_refit(vec![1.0, 1.0], 1.3, 10, 0.05).unwrap();
        assert_eq!(gp.n_obs(), 7);
    }
}
