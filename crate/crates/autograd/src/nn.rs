//! Parameterized layers. A layer holds only parameter names and geometry;
//! values live in a [`ParamStore`] so the same layer description can run
//! against raw, EMA, or cast copies of the weights.

use rand::Rng;

use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::store::ParamStore;
use crate::tensor::Tensor;

/// Weight initialisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn,
    Zeros,
    Constant(f64),
}

fn make<F: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<F> {
    match init {
        Init::FanIn => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Tensor::uniform(shape, -bound, bound, rng)
        }
        Init::Zeros => Tensor::zeros(shape),
        Init::Constant(c) => Tensor::full(shape, F::of(c)),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self::with_init(store, rng, name, in_dim, out_dim, Init::FanIn, Init::FanIn)
    }

    pub fn with_init<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Init,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, make(&[out_dim, in_dim], in_dim, weight_init, rng));
        store.insert(&bias, make(&[out_dim], in_dim, bias_init, rng));
        Self { weight, bias: Some(bias), in_dim, out_dim }
    }

    /// Layer description for parameters that already exist in a store.
    pub fn describe(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self { weight: format!("{name}.weight"), bias: Some(format!("{name}.bias")), in_dim, out_dim }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = g.param(store, &self.weight);
        let b = self.bias.as_ref().map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        let fan_in = in_ch * kernel * kernel;
        store.insert(&weight, make(&[out_ch, in_ch, kernel, kernel], fan_in, init, rng));
        let bias_init = if init == Init::FanIn { Init::FanIn } else { Init::Zeros };
        store.insert(&bias, make(&[out_ch], fan_in, bias_init, rng));
        Self { weight, bias, in_ch, out_ch, kernel, stride, pad: kernel / 2 }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = g.param(store, &self.weight);
        let b = g.param(store, &self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Group normalization with a learned per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: String,
    pub beta: String,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, groups: usize, channels: usize) -> Self {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.insert(&gamma, Tensor::full(&[channels], F::one()));
        store.insert(&beta, Tensor::zeros(&[channels]));
        Self { gamma, beta, groups: groups.min(channels), channels, eps: 1e-5 }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let n = g.group_norm(x, self.groups, self.eps);
        let gm = g.param(store, &self.gamma);
        let bt = g.param(store, &self.beta);
        g.modulate(n, Some(gm), Some(bt))
    }
}

/// Sinusoidal features of integer timesteps, `[len(t), dim]`, with the
/// first half cosines and second half sines at geometric frequencies.
pub fn timestep_features<F: Float>(t: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = vec![F::zero(); t.len() * dim];
    for (row, &ti) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = ti as f64 * freq;
            data[row * dim + i] = F::of(arg.cos());
            data[row * dim + half + i] = F::of(arg.sin());
        }
    }
    Tensor::from_vec(&[t.len(), dim], data).expect("timestep features")
}

/// One-hot rows, `[len(labels), classes]`.
pub fn one_hot<F: Float>(labels: &[usize], classes: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = F::one();
    }
    Tensor::from_vec(&[labels.len(), classes], data).expect("one-hot")
}
