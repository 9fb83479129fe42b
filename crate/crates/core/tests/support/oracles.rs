//! Independent oracles shared by the core test suite and the acceptance run.

#![allow(dead_code)]

use mapsac_core::ablr::BayesianHead;
use mapsac_core::gp::KernelGp;
use mapsac_core::numerics::{chi2_quantile, cholesky, eig_extrema_psd, Matrix, Rng, Vector};
use mapsac_core::qp::{solve, Halfspace, QpProblem, QpStatus};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_pd(n: usize, rng: &mut Rng) -> Matrix {
    let b = Matrix::from_fn(n, n, |_, _| rng.normal());
    &b * b.transpose() / n as f64 + Matrix::identity(n, n) * 0.3
}

fn random_vec(n: usize, rng: &mut Rng) -> Vector {
    Vector::from_fn(n, |_, _| rng.normal())
}

/// Largest deviation between a BLR head and an exact GP whose kernel is the
/// one the head induces, `σ0² φᵀ K0 φ′` with mean `μ0ᵀ φ`.
pub fn kernel_equivalence(datasets: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..datasets {
        let d = 1 + rng.below(8);
        let n = 1 + rng.below(25);
        let noise_std = rng.uniform_range(0.1, 1.0);
        let k0 = random_pd(d, &mut rng);
        let mu0 = random_vec(d, &mut rng);
        let w = random_vec(d, &mut rng);
        let phis: Vec<Vector> = (0..n).map(|_| random_vec(d, &mut rng)).collect();
        let ys: Vec<f64> = phis.iter().map(|p| w.dot(p) + noise_std * rng.normal()).collect();

        let head = BayesianHead::new(mu0.clone(), k0.clone(), noise_std).unwrap();
        let data: Vec<(Vector, f64)> = phis.iter().cloned().zip(ys.iter().copied()).collect();
        let head = head.posterior_from_data(&data).unwrap();

        let s2 = noise_std * noise_std;
        let kk = k0.clone();
        let m0 = mu0.clone();
        let xs: Vec<Vec<f64>> = phis.iter().map(|p| p.iter().copied().collect()).collect();
        let gp = KernelGp::fit(
            move |p: &[f64], q: &[f64]| {
                s2 * (Vector::from_column_slice(p).transpose() * &kk * Vector::from_column_slice(q))[0]
            },
            move |p: &[f64]| m0.dot(&Vector::from_column_slice(p)),
            xs,
            &ys,
            s2,
        )
        .unwrap();

        for _ in 0..10 {
            let phi = random_vec(d, &mut rng);
            let a = head.predict_features(&phi);
            let b = gp.predict(phi.as_slice());
            let scale = 1.0 + a.mean.abs().max(a.variance);
            worst = worst
                .max((a.mean - b.mean).abs() / scale)
                .max((a.variance - (b.variance + s2)).abs() / scale);
        }
    }
    worst
}

/// Largest deviation between one-shot and sequential posteriors.
pub fn batch_vs_incremental(points: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let d = 6;
    let prior = BayesianHead::new(random_vec(d, &mut rng), random_pd(d, &mut rng), 0.3).unwrap();
    let data: Vec<(Vector, f64)> = (0..points).map(|_| (random_vec(d, &mut rng), rng.normal())).collect();
    let batch = prior.posterior_from_data(&data).unwrap();
    let mut inc = prior.clone();
    for (phi, y) in &data {
        inc.observe(phi.clone(), *y).unwrap();
    }
    let dm = (batch.posterior_mean() - inc.posterior_mean()).amax();
    let dc = (batch.posterior_cov() - inc.posterior_cov()).amax();

    // Dense closed form through LU inverses.
    let k0_inv = prior.prior_cov().clone().try_inverse().unwrap();
    let phi = Matrix::from_fn(points, d, |i, j| data[i].0[j]);
    let y = Vector::from_iterator(points, data.iter().map(|(_, y)| *y));
    let cov = (&k0_inv + phi.transpose() * &phi).try_inverse().unwrap();
    let mean = &cov * (phi.transpose() * y + &k0_inv * prior.prior_mean());
    let em = (&mean - batch.posterior_mean()).amax();
    let ec = (&cov - batch.posterior_cov()).amax();
    dm.max(dc).max(em).max(ec)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct QpGridReport {
    pub problems: usize,
    pub feasible: usize,
    /// Problems where the solver and the grid disagree on feasibility, or the
    /// solver's point is worse than a feasible grid point.
    pub failures: usize,
    /// Largest `solver − grid` objective gap (negative means the solver won).
    pub worst_gap: f64,
    pub worst_violation: f64,
}

/// Active-set solutions against exhaustive search on a 2-D input grid.
pub fn qp_vs_grid(problems: usize, seed: u64) -> QpGridReport {
    const BOUND: f64 = 5.0;
    const N: usize = 401;
    let step = 2.0 * BOUND / (N - 1) as f64;
    let mut rng = Rng::new(seed);
    let mut rep = QpGridReport {
        problems,
        worst_gap: f64::NEG_INFINITY,
        ..Default::default()
    };
    for _ in 0..problems {
        let u_ref = vec![rng.uniform_range(-7.0, 7.0), rng.uniform_range(-7.0, 7.0)];
        let m = rng.below(4);
        let rows: Vec<Halfspace> = (0..m)
            .map(|_| {
                let t = rng.uniform_range(0.0, std::f64::consts::TAU);
                Halfspace::new(vec![t.cos(), t.sin()], rng.uniform_range(-4.0, 6.0))
            })
            .collect();
        let p = QpProblem::with_box(u_ref, rows, BOUND).unwrap();
        let sol = solve(&p);

        // The grid lies inside the box, so only the barrier rows matter.
        let mut best = f64::INFINITY;
        for i in 0..N {
            for j in 0..N {
                let u = [-BOUND + i as f64 * step, -BOUND + j as f64 * step];
                if p.constraints.iter().all(|r| r.value(&u) >= 0.0) {
                    best = best.min(p.objective(&u));
                }
            }
        }
        match sol.status {
            QpStatus::Optimal => {
                let viol = p
                    .all_rows()
                    .iter()
                    .map(|r| (-r.value(&sol.u)).max(0.0))
                    .fold(0.0, f64::max);
                rep.worst_violation = rep.worst_violation.max(viol);
                if best.is_finite() {
                    rep.feasible += 1;
                    let gap = p.objective(&sol.u) - best;
                    rep.worst_gap = rep.worst_gap.max(gap);
                    if gap > 1e-9 || viol > 1e-9 {
                        rep.failures += 1;
                    }
                } else if viol > 1e-9 {
                    rep.failures += 1;
                }
            }
            _ => {
                if best.is_finite() {
                    rep.failures += 1;
                }
            }
        }
    }
    rep
}

/// Largest relative error of the χ² quantile against `statrs`, plus the
/// reconstruction errors of Cholesky and the extreme eigenvalues.
#[derive(Debug, Clone, Copy)]
pub struct NumericsReport {
    pub chi2: f64,
    pub cholesky: f64,
    pub eigen: f64,
}

pub fn numerics(seed: u64) -> NumericsReport {
    let mut chi2 = 0.0f64;
    for dof in [1usize, 2, 3, 5, 10, 20, 50, 100] {
        let dist = ChiSquared::new(dof as f64).unwrap();
        for p in [0.01, 0.05, 0.5, 0.9, 0.95, 0.99, 0.999] {
            let q = chi2_quantile(dof, p).unwrap();
            chi2 = chi2.max((q - dist.inverse_cdf(p)).abs() / q.max(1.0));
        }
    }
    let mut rng = Rng::new(seed);
    let (mut chol, mut eigen) = (0.0f64, 0.0f64);
    for n in 1..=12 {
        let a = random_pd(n, &mut rng);
        let l = cholesky(&a).unwrap();
        chol = chol.max((&l * l.transpose() - &a).amax() / a.amax());

        let q = random_pd(n, &mut rng).qr().q();
        let diag: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 10.0)).collect();
        let m = &q * Matrix::from_diagonal(&Vector::from_vec(diag.clone())) * q.transpose();
        let m = (&m + m.transpose()) * 0.5;
        let (lo, hi) = eig_extrema_psd(&m).unwrap();
        let tlo = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let thi = diag.iter().copied().fold(0.0, f64::max);
        eigen = eigen.max(((lo - tlo) / tlo).abs()).max(((hi - thi) / thi).abs());
    }
    NumericsReport {
        chi2,
        cholesky: chol,
        eigen,
    }
}
