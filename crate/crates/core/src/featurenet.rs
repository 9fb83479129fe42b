//! The trainable feature map: an MLP with `tanh` hidden layers and a sigmoid
//! output layer, with hand-written reverse-mode gradients.
//!
//! Batches are row-major in the sense that each row of an input matrix is one
//! state; every layer computes `A_next = act(A W + 1 bᵀ)` with `W` of shape
//! `fan_in × fan_out`.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Vector};

/// Hidden width used by the standard architecture.
pub const HIDDEN_WIDTH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weights: Matrix,
    pub bias: Vector,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }
}

/// Network weights. Hidden layers use `tanh`, the last layer a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<Layer>,
}

/// Gradient with the same shapes as [`NetParams`].
pub type NetGrad = NetParams;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl NetParams {
    /// `[n_in, 256, 256, d]` with weights uniform of standard deviation
    /// `1/√fan_in` and zero biases.
    pub fn init(n_in: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        Self::init_with_sizes(&[n_in, HIDDEN_WIDTH, HIDDEN_WIDTH, d], rng)
    }

    pub fn init_with_sizes(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (3.0 / w[0] as f64).sqrt();
                Layer {
                    weights: Matrix::from_fn(w[0], w[1], |_, _| rng.uniform_range(-bound, bound)),
                    bias: Vector::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes
                .windows(2)
                .map(|w| Layer {
                    weights: Matrix::zeros(w[0], w[1]),
                    bias: Vector::zeros(w[1]),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.layer_sizes())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].fan_in()];
        sizes.extend(self.layers.iter().map(Layer::fan_out));
        sizes
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(Layer::fan_out).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat view: per layer, weights (column-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn from_flat(sizes: &[usize], flat: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(sizes);
        if flat.len() != net.n_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                net.n_params()
            )));
        }
        let mut at = 0;
        for l in &mut net.layers {
            let n = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(net)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Features of one state.
    pub fn forward(&self, x: &[f64]) -> Vector {
        let input = Matrix::from_row_slice(1, x.len(), x);
        let out = self.forward_batch(&input).output().clone();
        Vector::from_iterator(out.ncols(), out.iter().copied())
    }

    /// Forward pass over a batch (one state per row), keeping activations.
    pub fn forward_batch(&self, inputs: &Matrix) -> ForwardCache {
        assert_eq!(inputs.ncols(), self.n_in(), "input width");
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.clone());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = acts[i].clone() * &l.weights;
            for mut row in z.row_iter_mut() {
                row += l.bias.transpose();
            }
            if i == last {
                z.apply(|v| *v = sigmoid(*v));
            } else {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        ForwardCache { acts }
    }

    /// Gradient of `upstream · φ(x)` with respect to every parameter.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> NetGrad {
        let input = Matrix::from_row_slice(1, x.len(), x);
        let cache = self.forward_batch(&input);
        let up = Matrix::from_row_slice(1, upstream.len(), upstream);
        self.backward_batch(&cache, &up)
    }

    /// Gradient of `Σ_rows upstream_r · φ(x_r)` given a cached forward pass.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: &Matrix) -> NetGrad {
        let out = cache.output();
        assert_eq!(upstream.shape(), out.shape(), "upstream shape");
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        // dL/dz at the output: sigmoid' = s (1 - s).
        let mut delta = upstream.zip_map(out, |g, s| g * s * (1.0 - s));
        for i in (0..self.layers.len()).rev() {
            let a_prev = &cache.acts[i];
            let weights = a_prev.transpose() * &delta;
            let bias = Vector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            grads.push(Layer { weights, bias });
            if i > 0 {
                let back = &delta * self.layers[i].weights.transpose();
                delta = back.zip_map(a_prev, |g, a| g * (1.0 - a * a));
            }
        }
        grads.reverse();
        NetParams { layers: grads }
    }
}

/// Activations of every layer for one batch; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Matrix>,
}

impl ForwardCache {
    /// `n × D` feature matrix.
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("non-empty cache")
    }
}

/// Affine map of raw states into the network's input box.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTransform {
    pub center: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl InputTransform {
    pub fn identity(n: usize) -> Self {
        Self {
            center: vec![0.0; n],
            half_width: vec![1.0; n],
        }
    }

    /// Maps the box `[lo, hi]` onto `[-1, 1]` per coordinate.
    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Self {
        Self {
            center: lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect(),
            half_width: lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).collect(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .zip(&self.half_width)
            .map(|((v, c), w)| (v - c) / w)
            .collect()
    }
}

/// Network plus its input standardization: `x ↦ φ(T(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub transform: InputTransform,
    pub net: NetParams,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.net.n_out()
    }

    pub fn features(&self, x: &[f64]) -> Vector {
        self.net.forward(&self.transform.apply(x))
    }

    /// Standardized inputs, one state per row.
    pub fn input_matrix<'a, I>(&self, states: I) -> Matrix
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<Vec<f64>> = states.into_iter().map(|s| self.transform.apply(s)).collect();
        let n_in = self.net.n_in();
        Matrix::from_fn(rows.len(), n_in, |r, c| rows[r][c])
    }

    /// `n × D` features for a batch of states.
    pub fn features_batch<'a, I>(&self, states: I) -> Matrix
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let inputs = self.input_matrix(states);
        self.net.forward_batch(&inputs).output().clone()
    }
}
