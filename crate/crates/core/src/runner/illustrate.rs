//! Pessimistic barrier fields on a grid: `h(x) + Δ̂(x)` with `Δ̂` the true
//! residual or a model's lower confidence bound `μ − βσ`. Cells where the
//! field is negative cannot be entered, so their area measures how
//! conservative each estimate is.

use std::fmt::Write as _;

use serde::Serialize;

use crate::ablr::{Checkpoint, MetaModel};
use crate::error::{Error, Result};
use crate::gp::gp_fit;
use crate::numerics::{Matrix, Rng};
use crate::safety::{delta_true, h_and_grad, UncertaintyModel};
use crate::sim::warmstart_samples;

use super::ScenarioSpec;

pub const ILLUSTRATE_GRID: usize = 201;
pub const ILLUSTRATE_LO: f64 = -0.5;
pub const ILLUSTRATE_HI: f64 = 3.5;

const SAMPLE_COUNTS: [usize; 2] = [10, 20];
const FEATURE_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IllustrationAreas {
    pub cell_area: f64,
    pub true_delta: f64,
    pub gp_10: f64,
    pub ablr_10: f64,
    pub gp_20: f64,
    pub ablr_20: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Illustration {
    /// Grid coordinates, shared by both axes.
    pub axis: Vec<f64>,
    /// `(name, values)` with values row-major, `x₁` fastest.
    pub fields: Vec<(String, Vec<f64>)>,
    pub areas: IllustrationAreas,
}

impl Illustration {
    pub fn field(&self, name: &str) -> Option<&[f64]> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn grid_csv(&self) -> String {
        let mut s = String::from("x1,x2");
        for (name, _) in &self.fields {
            let _ = write!(s, ",{name}");
        }
        s.push('\n');
        let n = self.axis.len();
        for j in 0..n {
            for i in 0..n {
                let _ = write!(s, "{:.16e},{:.16e}", self.axis[i], self.axis[j]);
                for (_, v) in &self.fields {
                    let _ = write!(s, ",{:.16e}", v[j * n + i]);
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn areas_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.areas).expect("areas serialize");
        s.push('\n');
        s
    }
}

fn unreachable_area(values: &[f64], cell_area: f64) -> f64 {
    values.iter().filter(|v| **v < 0.0).count() as f64 * cell_area
}

/// Fields for the first obstacle of `spec` after 10 and 20 warm-start samples.
pub fn illustrate(spec: &ScenarioSpec, checkpoint: Option<&Checkpoint>, seed: u64) -> Result<Illustration> {
    let ckpt = checkpoint.ok_or_else(|| {
        Error::CheckpointMissing(format!("pass one trained on {}", spec.checkpoint_source().as_str()))
    })?;
    let obs = *spec
        .obstacles
        .first()
        .ok_or_else(|| Error::Config("illustration needs an obstacle".into()))?;
    let beta = spec.budget.beta;
    let n = ILLUSTRATE_GRID;
    let step = (ILLUSTRATE_HI - ILLUSTRATE_LO) / (n - 1) as f64;
    let axis: Vec<f64> = (0..n).map(|i| ILLUSTRATE_LO + i as f64 * step).collect();
    let points: Vec<[f64; 2]> = (0..n * n).map(|k| [axis[k % n], axis[k / n]]).collect();
    let h: Vec<f64> = points.iter().map(|x| h_and_grad(x, &obs).0).collect();

    let samples = warmstart_samples(&[obs], &spec.plant, &mut Rng::with_stream(seed, 2)).remove(0);

    let base = MetaModel::from_checkpoint(ckpt)?;
    let mut phi = Matrix::zeros(points.len(), base.features.dim());
    for (c, chunk) in points.chunks(FEATURE_CHUNK).enumerate() {
        let block = base.features.features_batch(chunk.iter().map(|x| x.as_slice()));
        phi.rows_mut(c * FEATURE_CHUNK, chunk.len()).copy_from(&block);
    }

    let mut fields = vec![(
        "true".to_string(),
        points
            .iter()
            .zip(&h)
            .map(|(x, h)| h + delta_true(x, spec.plant.omega, &obs))
            .collect::<Vec<_>>(),
    )];
    let mut areas = Vec::new();
    for &count in &SAMPLE_COUNTS {
        let data = &samples[..count.min(samples.len())];
        let xs: Vec<Vec<f64>> = data.iter().map(|(x, _)| x.to_vec()).collect();
        let ys: Vec<f64> = data.iter().map(|(_, y)| *y).collect();
        let gp = gp_fit(&xs, &ys, spec.plant.obs_noise_var, &spec.gp)?;
        let gp_field: Vec<f64> = points
            .iter()
            .zip(&h)
            .map(|(x, h)| {
                let p = gp.predict_delta(x);
                h + p.mean - beta * p.std()
            })
            .collect();

        let mut model = base.clone();
        model.warm_start(data, spec.finetune_steps, spec.finetune_step_size)?;
        let (mut mean_field, mut ablr_field) = (Vec::with_capacity(h.len()), Vec::with_capacity(h.len()));
        for (k, hk) in h.iter().enumerate() {
            let p = model.head.predict_features(&phi.row(k).transpose());
            mean_field.push(hk + p.mean);
            ablr_field.push(hk + p.mean - beta * p.std());
        }
        areas.push((gp_field.clone(), ablr_field.clone()));
        fields.push((format!("gp_{count}"), gp_field));
        fields.push((format!("ablr_{count}"), ablr_field));
        fields.push((format!("ablr_mean_{count}"), mean_field));
    }

    let cell_area = step * step;
    let area = |v: &[f64]| unreachable_area(v, cell_area);
    Ok(Illustration {
        areas: IllustrationAreas {
            cell_area,
            true_delta: area(&fields[0].1),
            gp_10: area(&areas[0].0),
            ablr_10: area(&areas[0].1),
            gp_20: area(&areas[1].0),
            ablr_20: area(&areas[1].1),
        },
        axis,
        fields,
    })
}
