//! Plain-text checkpoint of a trained model.
//!
//! ```text
//! mapsac-checkpoint
//! version 1
//! layers <count> <n_in> <hidden...> <D>
//! noise_std <value>
//! input_center <n> <values...>
//! input_half_width <n> <values...>
//! prior_mean <D> <values...>
//! prior_cov <D> <D> <row-major values...>
//! weights <layer> <rows> <cols> <column-major values...>
//! bias <layer> <len> <values...>
//! end
//! ```
//!
//! Every array sits on one line. Floats use Rust's shortest round-trip
//! formatting, so a save/load cycle is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::BayesianHead;
use crate::error::{Error, Result};
use crate::featurenet::{FeatureMap, InputTransform, NetParams};
use crate::numerics::{Matrix, Vector};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "mapsac-checkpoint";

/// Everything needed to rebuild a meta-trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub features: FeatureMap,
    pub prior_mean: Vector,
    pub prior_cov: Matrix,
    pub noise_std: f64,
}

impl Checkpoint {
    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    /// A fresh head carrying the stored prior.
    pub fn head(&self) -> Result<BayesianHead> {
        BayesianHead::new(self.prior_mean.clone(), self.prior_cov.clone(), self.noise_std)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let net = &self.features.net;
        let sizes = net.layer_sizes();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "version {CHECKPOINT_VERSION}").unwrap();
        writeln!(out, "layers {} {}", sizes.len(), join_usize(&sizes)).unwrap();
        writeln!(out, "noise_std {:e}", self.noise_std).unwrap();
        let t = &self.features.transform;
        writeln!(out, "input_center {} {}", t.center.len(), join(&t.center)).unwrap();
        writeln!(out, "input_half_width {} {}", t.half_width.len(), join(&t.half_width)).unwrap();
        let d = self.dim();
        writeln!(out, "prior_mean {d} {}", join(self.prior_mean.as_slice())).unwrap();
        let cov: Vec<f64> = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| self.prior_cov[(i, j)])
            .collect();
        writeln!(out, "prior_cov {d} {d} {}", join(&cov)).unwrap();
        for (i, l) in net.layers.iter().enumerate() {
            let (r, c) = l.weights.shape();
            writeln!(out, "weights {i} {r} {c} {}", join(l.weights.as_slice())).unwrap();
            writeln!(out, "bias {i} {} {}", l.bias.len(), join(l.bias.as_slice())).unwrap();
        }
        writeln!(out, "end").unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| -> Result<Vec<&str>> {
            lines
                .next()
                .map(|l| l.split_ascii_whitespace().collect())
                .ok_or_else(|| corrupt(format!("missing {what}")))
        };
        if next("header")?.first() != Some(&MAGIC) {
            return Err(corrupt("bad magic line"));
        }
        let version = next("version")?;
        expect_key(&version, "version")?;
        let found: u32 = parse_tok(&version, 1)?;
        if found != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let layers = next("layers")?;
        expect_key(&layers, "layers")?;
        let count: usize = parse_tok(&layers, 1)?;
        let sizes: Vec<usize> = parse_list(&layers, 2, count)?;
        if sizes.len() < 2 {
            return Err(corrupt("need at least two layer sizes"));
        }
        let noise = next("noise_std")?;
        expect_key(&noise, "noise_std")?;
        let noise_std: f64 = parse_tok(&noise, 1)?;

        let center = counted(&next("input_center")?, "input_center")?;
        let half_width = counted(&next("input_half_width")?, "input_half_width")?;
        let prior_mean = counted(&next("prior_mean")?, "prior_mean")?;
        let d = prior_mean.len();
        if d != *sizes.last().unwrap() || center.len() != sizes[0] || half_width.len() != sizes[0] {
            return Err(corrupt("inconsistent dimensions"));
        }
        let cov_line = next("prior_cov")?;
        expect_key(&cov_line, "prior_cov")?;
        let (r, c): (usize, usize) = (parse_tok(&cov_line, 1)?, parse_tok(&cov_line, 2)?);
        if (r, c) != (d, d) {
            return Err(corrupt("prior_cov shape"));
        }
        let cov: Vec<f64> = parse_list(&cov_line, 3, d * d)?;
        let prior_cov = Matrix::from_row_slice(d, d, &cov);

        let mut net = NetParams::zeros(&sizes);
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let w = next("weights")?;
            expect_key(&w, "weights")?;
            let (idx, r, c): (usize, usize, usize) = (parse_tok(&w, 1)?, parse_tok(&w, 2)?, parse_tok(&w, 3)?);
            if idx != i || (r, c) != layer.weights.shape() {
                return Err(corrupt(format!("weights header for layer {i}")));
            }
            let vals: Vec<f64> = parse_list(&w, 4, r * c)?;
            layer.weights.as_mut_slice().copy_from_slice(&vals);
            let b = next("bias")?;
            expect_key(&b, "bias")?;
            let (idx, n): (usize, usize) = (parse_tok(&b, 1)?, parse_tok(&b, 2)?);
            if idx != i || n != layer.bias.len() {
                return Err(corrupt(format!("bias header for layer {i}")));
            }
            let vals: Vec<f64> = parse_list(&b, 3, n)?;
            layer.bias.as_mut_slice().copy_from_slice(&vals);
        }
        if next("end")?.first() != Some(&"end") {
            return Err(corrupt("missing end marker"));
        }
        Ok(Self {
            features: FeatureMap {
                transform: InputTransform { center, half_width },
                net,
            },
            prior_mean: Vector::from_vec(prior_mean),
            prior_cov,
            noise_std,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_text())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    Checkpoint::from_text(&text)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn join(xs: &[f64]) -> String {
    let mut s = String::with_capacity(xs.len() * 24);
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x:e}").unwrap();
    }
    s
}

fn join_usize(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn expect_key(toks: &[&str], key: &str) -> Result<()> {
    if toks.first() == Some(&key) {
        Ok(())
    } else {
        Err(corrupt(format!("expected `{key}`, found {:?}", toks.first())))
    }
}

fn parse_tok<T: std::str::FromStr>(toks: &[&str], at: usize) -> Result<T> {
    toks.get(at)
        .ok_or_else(|| corrupt(format!("line `{}` is too short", toks.first().unwrap_or(&""))))?
        .parse()
        .map_err(|_| corrupt(format!("unparsable token {:?}", toks[at])))
}

fn parse_list<T: std::str::FromStr>(toks: &[&str], from: usize, n: usize) -> Result<Vec<T>> {
    if toks.len() != from + n {
        return Err(corrupt(format!(
            "`{}` expects {n} values, found {}",
            toks.first().unwrap_or(&""),
            toks.len().saturating_sub(from)
        )));
    }
    (from..from + n).map(|i| parse_tok(toks, i)).collect()
}

fn counted(toks: &[&str], key: &str) -> Result<Vec<f64>> {
    expect_key(toks, key)?;
    let n: usize = parse_tok(toks, 1)?;
    parse_list(toks, 2, n)
}
