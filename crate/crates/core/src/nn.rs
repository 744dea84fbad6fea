//! Small dense building blocks with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    pub fn derivative(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    if std == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// Visits named parameter tensors in a fixed order.
///
/// The same visiting order is used for gradient structs of the same type,
/// which is what optimizers and checkpoints rely on.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, v| {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, scale: f64, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut(&mut |_, v| {
            let n = v.len();
            for (x, g) in v.iter_mut().zip(&flat[off..off + n]) {
                *x += scale * g;
            }
            off += n;
        });
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, v| v.fill(value));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

pub(crate) fn visit2(
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
    name: &str,
    a: &Array2<f64>,
) {
    f(name, a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit1(
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
    name: &str,
    a: &Array1<f64>,
) {
    f(name, a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit2_mut(f: &mut dyn FnMut(&str, &mut [f64]), name: &str, a: &mut Array2<f64>) {
    f(name, a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn visit1_mut(f: &mut dyn FnMut(&str, &mut [f64]), name: &str, a: &mut Array1<f64>) {
    f(name, a.as_slice_mut().expect("standard layout"));
}

/// Row-wise two-layer perceptron: `y = act(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize, activation: Activation) -> Self {
        Self {
            w1: Array2::zeros((input, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, output)),
            b2: Array1::zeros(output),
            activation,
        }
    }

    /// Gaussian weights with the given per-layer standard deviations, zero biases.
    pub fn random(
        rng: &mut impl Rng,
        dims: (usize, usize, usize),
        stds: (f64, f64),
        activation: Activation,
    ) -> Self {
        let (input, hidden, output) = dims;
        Self {
            w1: random_matrix(rng, input, hidden, stds.0),
            b1: Array1::zeros(hidden),
            w2: random_matrix(rng, hidden, output, stds.1),
            b2: Array1::zeros(output),
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.input_dim(),
            self.hidden_dim(),
            self.output_dim(),
            self.activation,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn consistent(&self) -> bool {
        self.b1.len() == self.w1.ncols()
            && self.w2.nrows() == self.w1.ncols()
            && self.b2.len() == self.w2.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        debug_assert_eq!(x.ncols(), self.input_dim());
        let act = self.activation;
        let hidden = (x.dot(&self.w1) + &self.b1).mapv(|v| act.apply(v));
        let out = hidden.dot(&self.w2) + &self.b2;
        (
            out,
            MlpCache {
                input: x.to_owned(),
                hidden,
            },
        )
    }

    /// Returns parameter gradients and the gradient w.r.t. the input rows.
    pub fn backward(&self, cache: &MlpCache, dy: ArrayView2<f64>) -> (Mlp, Array2<f64>) {
        let act = self.activation;
        let dhidden = dy.dot(&self.w2.t());
        let dpre = &dhidden * &cache.hidden.mapv(|h| act.derivative(h));
        let grads = Mlp {
            w1: cache.input.t().dot(&dpre),
            b1: dpre.sum_axis(Axis(0)),
            w2: cache.hidden.t().dot(&dy),
            b2: dy.sum_axis(Axis(0)),
            activation: act,
        };
        let dx = dpre.dot(&self.w1.t());
        (grads, dx)
    }
}

impl Params for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(f, "w1", &self.w1);
        visit1(f, "b1", &self.b1);
        visit2(f, "w2", &self.w2);
        visit1(f, "b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit2_mut(f, "w1", &mut self.w1);
        visit1_mut(f, "b1", &mut self.b1);
        visit2_mut(f, "w2", &mut self.w2);
        visit1_mut(f, "b2", &mut self.b2);
    }
}

/// Prefixes names produced by a nested parameter struct.
pub(crate) fn nested<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, &[usize], &[f64]),
) -> impl FnMut(&str, &[usize], &[f64]) + 'a {
    move |name, shape, v| f(&format!("{prefix}.{name}"), shape, v)
}

pub(crate) fn nested_mut<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, &mut [f64]),
) -> impl FnMut(&str, &mut [f64]) + 'a {
    move |name, v| f(&format!("{prefix}.{name}"), v)
}
