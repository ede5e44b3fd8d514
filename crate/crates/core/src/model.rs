//! Trained-model bundles and the prediction interfaces the samplers and
//! evaluators run against. All interfaces speak `f64`; networks cast to their
//! own precision internally.

use pdae_autograd::nn::one_hot;
use pdae_autograd::{Float, Graph, ParamStore, Tensor};

use crate::error::{invalid, Result};
use crate::networks::{Encoder, EncoderSpec, EpsNet, Fwd, GradientEstimator, LatentDenoiser, UNetSpec};
use crate::oracle::MixtureOracle;

/// Noise prediction `eps(x_t, t)` with one timestep per item.
pub trait EpsModel {
    fn eps(&self, xt: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f64>>;
}

/// Noise prediction plus, on request, a guidance gradient for the current
/// step. Guidance is requested only when it will actually be applied, so an
/// unguided run never evaluates it.
pub trait Denoiser {
    fn predict(&self, xt: &Tensor<f64>, t: usize, guided: bool) -> Result<(Tensor<f64>, Option<Tensor<f64>>)>;
}

/// Uniform timestep slice for a batch.
pub fn same_t(t: usize, batch: usize) -> Vec<usize> {
    vec![t; batch]
}

/// A pretrained noise predictor.
#[derive(Clone, Debug)]
pub struct EpsBundle {
    pub net: EpsNet,
    pub params: ParamStore<f32>,
}

impl EpsBundle {
    pub fn new(spec: &UNetSpec, params: ParamStore<f32>) -> Result<Self> {
        let net = EpsNet::describe(spec)?;
        let mut fresh = ParamStore::<f32>::new();
        EpsNet::new(spec, &mut fresh, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        if !fresh.same_topology(&params.subset(crate::networks::EPS_PREFIX)) {
            return invalid("parameters do not match the network specification");
        }
        Ok(Self { net, params })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.net.spec
    }

    /// Prediction for a label-conditioned network.
    pub fn eps_labeled(&self, xt: &Tensor<f64>, t: &[usize], labels: &[usize]) -> Result<Tensor<f64>> {
        self.net.check_input(xt.shape())?;
        if self.net.spec.num_classes == 0 {
            return invalid("network is not label-conditioned");
        }
        Ok(self.net.predict(&self.params, &xt.cast(), t, Some(labels)).cast())
    }
}

impl EpsModel for EpsBundle {
    fn eps(&self, xt: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f64>> {
        self.net.check_input(xt.shape())?;
        if self.net.spec.num_classes > 0 {
            return invalid("label-conditioned network needs labels");
        }
        Ok(self.net.predict(&self.params, &xt.cast(), t, None).cast())
    }
}

impl EpsModel for MixtureOracle {
    fn eps(&self, xt: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f64>> {
        let mut parts = Vec::with_capacity(xt.batch());
        for (b, &tb) in t.iter().enumerate() {
            parts.push(self.optimal_eps(&xt.narrow(b, 1), tb)?);
        }
        Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>())?)
    }
}

/// What the gradient estimator is conditioned on.
#[derive(Clone, Debug)]
pub enum Conditioner {
    /// Semantic codes from a trained encoder.
    Encoder(Encoder),
    /// One-hot class labels.
    Labels { classes: usize },
}

impl Conditioner {
    pub fn dim(&self) -> usize {
        match self {
            Conditioner::Encoder(e) => e.spec.z_dim,
            Conditioner::Labels { classes } => *classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConditionerSpec {
    Encoder(EncoderSpec),
    Labels { classes: usize },
}

/// Frozen pretrained noise predictor plus the trained conditioner and
/// gradient estimator, all parameters in one store.
#[derive(Clone, Debug)]
pub struct PdaeBundle {
    pub eps: EpsNet,
    pub cond: Conditioner,
    pub grad: GradientEstimator,
    pub params: ParamStore<f32>,
}

impl PdaeBundle {
    pub fn spec(&self) -> &UNetSpec {
        &self.eps.spec
    }

    /// Semantic codes `z = E(x0)`.
    pub fn encode(&self, x0: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.eps.check_input(x0.shape())?;
        match &self.cond {
            Conditioner::Encoder(e) => Ok(e.encode(&self.params, &x0.cast()).cast()),
            Conditioner::Labels { .. } => invalid("label-conditioned bundle has no encoder"),
        }
    }

    /// One-hot conditions for a label-conditioned bundle.
    pub fn label_condition(&self, labels: &[usize]) -> Result<Tensor<f64>> {
        match self.cond {
            Conditioner::Labels { classes } => {
                if let Some(y) = labels.iter().find(|&&y| y >= classes) {
                    return invalid(format!("unknown label {y} (classes 0..{classes})"));
                }
                Ok(one_hot(labels, classes))
            }
            Conditioner::Encoder(_) => invalid("bundle is conditioned on codes, not labels"),
        }
    }

    /// `eps_theta(x_t, t)` and `G(x_t, c, t)` for each condition in `conds`,
    /// sharing one pass through the frozen encoder half.
    pub fn eps_and_grads(&self, xt: &Tensor<f64>, t: &[usize], conds: &[&Tensor<f64>]) -> Result<(Tensor<f64>, Vec<Tensor<f64>>)> {
        self.eps.check_input(xt.shape())?;
        for c in conds {
            if c.shape() != [xt.batch(), self.grad.cond_dim] {
                return invalid(format!("condition {:?} for batch {} and size {}", c.shape(), xt.batch(), self.grad.cond_dim));
            }
        }
        let mut g = Graph::<f32>::new();
        let mut f = Fwd::new(&mut g, &self.params);
        let x = f.g.input(xt.cast());
        let feats = self.eps.features(&mut f, x, t, None);
        let e = self.eps.head(&mut f, &feats);
        let mut outs = Vec::with_capacity(conds.len());
        for c in conds {
            let cv = f.g.input(c.cast());
            outs.push(self.grad.forward(&mut f, &feats, cv));
        }
        Ok((g.value(e).cast(), outs.into_iter().map(|o| g.value(o).cast()).collect()))
    }

    /// Noise predictor only, computed exactly as inside
    /// [`eps_and_grads`](Self::eps_and_grads).
    pub fn eps_only(&self, xt: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f64>> {
        Ok(self.eps_and_grads(xt, t, &[])?.0)
    }
}

impl EpsModel for PdaeBundle {
    fn eps(&self, xt: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f64>> {
        self.eps_only(xt, t)
    }
}

/// Unguided sampling with any noise predictor.
pub struct Unguided<'a, M: ?Sized>(pub &'a M);

impl<M: EpsModel + ?Sized> Denoiser for Unguided<'_, M> {
    fn predict(&self, xt: &Tensor<f64>, t: usize, _: bool) -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
        Ok((self.0.eps(xt, &same_t(t, xt.batch()))?, None))
    }
}

/// PDAE decoding guided by `G(x_t, c, t)` for fixed per-item conditions.
pub struct Conditioned<'a> {
    pub bundle: &'a PdaeBundle,
    pub cond: Tensor<f64>,
}

impl Denoiser for Conditioned<'_> {
    fn predict(&self, xt: &Tensor<f64>, t: usize, guided: bool) -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
        let ts = same_t(t, xt.batch());
        if !guided {
            return Ok((self.bundle.eps_only(xt, &ts)?, None));
        }
        let (e, mut g) = self.bundle.eps_and_grads(xt, &ts, &[&self.cond])?;
        Ok((e, g.pop()))
    }
}

/// Guidance `Lerp(G(x_t, c_a, t), G(x_t, c_b, t); lambda)`.
pub struct DirectionLerp<'a> {
    pub bundle: &'a PdaeBundle,
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
    pub lambda: f64,
}

impl Denoiser for DirectionLerp<'_> {
    fn predict(&self, xt: &Tensor<f64>, t: usize, guided: bool) -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
        let ts = same_t(t, xt.batch());
        if !guided {
            return Ok((self.bundle.eps_only(xt, &ts)?, None));
        }
        let (e, g) = self.bundle.eps_and_grads(xt, &ts, &[&self.a, &self.b])?;
        let mix = g[0].scale(1.0 - self.lambda).axpy(self.lambda, &g[1]);
        Ok((e, Some(mix)))
    }
}

/// Any noise predictor guided by the exact Bayes class gradient of a
/// labelled mixture oracle.
pub struct OracleClassGuided<'a, M: ?Sized> {
    pub eps: &'a M,
    pub oracle: &'a MixtureOracle,
    pub labels: Vec<usize>,
}

impl<M: EpsModel + ?Sized> Denoiser for OracleClassGuided<'_, M> {
    fn predict(&self, xt: &Tensor<f64>, t: usize, guided: bool) -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
        let e = self.eps.eps(xt, &same_t(t, xt.batch()))?;
        if !guided {
            return Ok((e, None));
        }
        Ok((e, Some(self.oracle.class_gradient(xt, t, &self.labels)?)))
    }
}

/// A trained latent denoiser with the statistics used to normalize codes.
#[derive(Clone, Debug)]
pub struct LatentBundle {
    pub net: LatentDenoiser,
    pub params: ParamStore<f32>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentBundle {
    pub fn normalize(&self, z: &Tensor<f64>) -> Tensor<f64> {
        let d = self.mean.len();
        Tensor::from_fn(z.shape(), |i| (z.data()[i] - self.mean[i % d]) / self.std[i % d])
    }

    pub fn denormalize(&self, z: &Tensor<f64>) -> Tensor<f64> {
        let d = self.mean.len();
        Tensor::from_fn(z.shape(), |i| z.data()[i] * self.std[i % d] + self.mean[i % d])
    }
}

impl EpsModel for LatentBundle {
    fn eps(&self, zt: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f64>> {
        if zt.rank() != 2 || zt.dim(1) != self.net.spec.z_dim {
            return invalid(format!("latent denoiser expects [B, {}], got {:?}", self.net.spec.z_dim, zt.shape()));
        }
        Ok(self.net.predict(&self.params, &zt.cast(), t).cast())
    }
}

/// Casting helper for tests and tools that hold `f32` stores.
pub fn cast_store<F: Float>(store: &ParamStore<f32>) -> ParamStore<F> {
    store.cast()
}
