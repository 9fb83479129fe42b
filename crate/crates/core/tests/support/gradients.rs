//! Analytic gradients against central finite differences along random
//! directions in parameter space. Each check returns its worst relative error.

#![allow(dead_code)]

use mapsac_core::ablr::BayesianHead;
use mapsac_core::featurenet::{FeatureMap, InputTransform, NetParams};
use mapsac_core::meta::{generate_meta_tasks, meta_nll, split_tasks, MetaConfig, MetaTaskSpec};
use mapsac_core::numerics::{Matrix, Rng, Vector};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_direction(n: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn shifted(p: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    p.iter().zip(v).map(|(a, b)| a + h * b).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn network_backward(probes: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut net = NetParams::init(2, 10, &mut rng).unwrap();
    for l in &mut net.layers {
        l.bias.apply(|b| *b = 0.3 * rng.normal());
    }
    let sizes = net.layer_sizes();
    let flat = net.to_flat();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
        let upstream: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let f = |p: &[f64]| {
            let n = NetParams::from_flat(&sizes, p).unwrap();
            dot(n.forward(&x).as_slice(), &upstream)
        };
        let g = net.backward(&x, &upstream).to_flat();
        let v = random_direction(flat.len(), &mut rng);
        let h = 1e-5;
        let fd = (f(&shifted(&flat, &v, h)) - f(&shifted(&flat, &v, -h))) / (2.0 * h);
        worst = worst.max(rel_err(fd, dot(&g, &v)));
    }
    worst
}

/// Largest gap between a batch gradient and the sum of per-row gradients.
pub fn batch_vs_rows(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let net = NetParams::init_with_sizes(&[2, 16, 16, 4], &mut rng).unwrap();
    let xs = Matrix::from_fn(5, 2, |_, _| rng.uniform_range(-1.0, 1.0));
    let up = Matrix::from_fn(5, 4, |_, _| rng.normal());
    let batch = net.backward_batch(&net.forward_batch(&xs), &up).to_flat();
    let mut sum = vec![0.0; batch.len()];
    for r in 0..5 {
        let x = [xs[(r, 0)], xs[(r, 1)]];
        let u: Vec<f64> = up.row(r).iter().copied().collect();
        for (s, g) in sum.iter_mut().zip(net.backward(&x, &u).to_flat()) {
            *s += g;
        }
    }
    batch
        .iter()
        .zip(&sum)
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max)
}

pub fn meta_loss(probes: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let tasks = generate_meta_tasks(&MetaTaskSpec::default(), 3, 12, &mut rng).unwrap();
    let cfg = MetaConfig::default();
    let splits = split_tasks(&tasks, &cfg, &mut rng).unwrap();
    let d = 5;
    let mut net = NetParams::init(2, d, &mut rng).unwrap();
    for l in &mut net.layers {
        l.bias.apply(|b| *b = 0.2 * rng.normal());
    }
    let transform = InputTransform::from_bounds(&[-0.5, -0.5], &[4.5, 4.5]);
    let sizes = net.layer_sizes();
    let k0 = Matrix::identity(d, d) * 1.3;
    let noise = 0.1f64.sqrt();
    let mut params = net.to_flat();
    let n_net = params.len();
    params.extend((0..d).map(|_| rng.normal()));

    let eval = |p: &[f64]| {
        let fm = FeatureMap {
            transform: transform.clone(),
            net: NetParams::from_flat(&sizes, &p[..n_net]).unwrap(),
        };
        meta_nll(&fm, &Vector::from_column_slice(&p[n_net..]), &k0, noise, &splits).unwrap()
    };
    let base = eval(&params);
    let mut grad = base.net_grad.to_flat();
    grad.extend(base.mean_grad.iter());

    let mut worst: f64 = 0.0;
    for probe in 0..probes {
        let v = if probe < 5 {
            // Prior-mean coordinates alone.
            let mut e = vec![0.0; params.len()];
            e[n_net + probe] = 1.0;
            e
        } else {
            random_direction(params.len(), &mut rng)
        };
        let h = 1e-5;
        let fd = (eval(&shifted(&params, &v, h)).value - eval(&shifted(&params, &v, -h)).value) / (2.0 * h);
        worst = worst.max(rel_err(fd, dot(&grad, &v)));
    }
    worst
}

pub fn finetune(probes: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let d = 1 + rng.below(6);
        let head = BayesianHead::isotropic(Vector::from_fn(d, |_, _| rng.normal()), 0.5 + rng.uniform(), 0.3).unwrap();
        let data: Vec<(Vector, f64)> = (0..8)
            .map(|_| (Vector::from_fn(d, |_, _| rng.uniform()), 2.0 * rng.normal()))
            .collect();
        let head = head.posterior_from_data(&data).unwrap();
        let g = head.finetune_gradient();
        let v = Vector::from_column_slice(&random_direction(d, &mut rng));
        let at = |s: f64| {
            let mut h = head.clone();
            h.set_prior_mean(head.prior_mean() + &v * s).unwrap();
            h.finetune_loss()
        };
        let step = 1e-5;
        let fd = (at(step) - at(-step)) / (2.0 * step);
        worst = worst.max(rel_err(fd, g.dot(&v)));
    }
    worst
}
