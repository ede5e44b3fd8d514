//! Stateless diffusion operations on image batches.
//!
//! Every function takes its randomness as an explicit tensor. Timesteps may be
//! a single `usize` shared by the batch or a slice with one entry per item.
//! Scalar coefficients are evaluated in `f64` and applied in the tensor's own
//! precision.

use pdae_autograd::{Float, Tensor};

use crate::error::{invalid, Result};
use crate::schedule::{NoiseSchedule, WeightScheme};

/// Timestep assignment for a batch.
pub trait Timesteps {
    fn at(&self, item: usize) -> usize;
    fn validate(&self, batch: usize, s: &NoiseSchedule) -> Result<()>;
}

impl Timesteps for usize {
    fn at(&self, _: usize) -> usize {
        *self
    }

    fn validate(&self, _: usize, s: &NoiseSchedule) -> Result<()> {
        s.check(*self)
    }
}

impl Timesteps for [usize] {
    fn at(&self, item: usize) -> usize {
        self[item]
    }

    fn validate(&self, batch: usize, s: &NoiseSchedule) -> Result<()> {
        if self.len() != batch {
            return invalid(format!("{} timesteps for a batch of {batch}", self.len()));
        }
        self.iter().try_for_each(|&t| s.check(t))
    }
}

impl Timesteps for Vec<usize> {
    fn at(&self, item: usize) -> usize {
        self[item]
    }

    fn validate(&self, batch: usize, s: &NoiseSchedule) -> Result<()> {
        self.as_slice().validate(batch, s)
    }
}

impl<T: Timesteps + ?Sized> Timesteps for &T {
    fn at(&self, item: usize) -> usize {
        (**self).at(item)
    }

    fn validate(&self, batch: usize, s: &NoiseSchedule) -> Result<()> {
        (**self).validate(batch, s)
    }
}

/// `out[b] = ca(t_b) * a[b] + cb(t_b) * b[b]`, item by item.
fn combine<F: Float, T: Timesteps>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    t: &T,
    coefs: impl Fn(usize) -> (f64, f64),
) -> Result<Tensor<F>> {
    a.same_shape(b)?;
    let mut out = a.clone();
    for i in 0..a.batch() {
        let (ca, cb) = coefs(t.at(i));
        let (ca, cb) = (F::of(ca), F::of(cb));
        for (o, &y) in out.item_mut(i).iter_mut().zip(b.item(i)) {
            *o = ca * *o + cb * y;
        }
    }
    Ok(out)
}

/// Mean shift `sigma_t^2 * scale * grad` or its DDIM counterpart. A scale of
/// zero, or no gradient at all, leaves every guided operation bit-identical
/// to the unguided one.
#[derive(Clone, Debug)]
pub struct GuidanceShift<F> {
    pub grad: Option<Tensor<F>>,
    pub scale: f64,
}

impl<F: Float> GuidanceShift<F> {
    pub fn none() -> Self {
        Self { grad: None, scale: 0.0 }
    }

    pub fn new(grad: Tensor<F>, scale: f64) -> Self {
        Self { grad: Some(grad), scale }
    }

    pub fn is_active(&self) -> bool {
        self.grad.is_some() && self.scale != 0.0
    }

    /// `base + coef * scale * grad`, or `base` untouched when inactive.
    pub fn apply(&self, base: Tensor<F>, coef: f64) -> Result<Tensor<F>> {
        match &self.grad {
            Some(g) if self.scale != 0.0 => {
                base.same_shape(g)?;
                Ok(base.axpy(F::of(coef * self.scale), g))
            }
            _ => Ok(base),
        }
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<F: Float, T: Timesteps>(
    s: &NoiseSchedule,
    x0: &Tensor<F>,
    t: T,
    eps: &Tensor<F>,
) -> Result<Tensor<F>> {
    t.validate(x0.batch(), s)?;
    combine(x0, eps, &t, |t| {
        let ab = s.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    })
}

/// Forward-process posterior mean `coef_x0 x0 + coef_xt xt`.
pub fn true_posterior_mean<F: Float, T: Timesteps>(
    s: &NoiseSchedule,
    x0: &Tensor<F>,
    xt: &Tensor<F>,
    t: T,
) -> Result<Tensor<F>> {
    t.validate(x0.batch(), s)?;
    combine(x0, xt, &t, |t| {
        let c = s.posterior_coefficients(t).expect("validated");
        (c.coef_x0, c.coef_xt)
    })
}

/// `(xt - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)`.
pub fn predicted_mean<F: Float, T: Timesteps>(
    s: &NoiseSchedule,
    xt: &Tensor<F>,
    t: T,
    eps_hat: &Tensor<F>,
) -> Result<Tensor<F>> {
    t.validate(xt.batch(), s)?;
    combine(xt, eps_hat, &t, |t| {
        let ra = 1.0 / s.alpha(t).sqrt();
        (ra, -ra * s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt())
    })
}

/// One ancestral step: `mu_theta + sigma_t^2 scale grad + sigma_t noise`.
/// The final step (`t = 1`) must be noiseless.
pub fn ddpm_step<F: Float>(
    s: &NoiseSchedule,
    xt: &Tensor<F>,
    t: usize,
    eps_hat: &Tensor<F>,
    shift: &GuidanceShift<F>,
    noise: &Tensor<F>,
) -> Result<Tensor<F>> {
    if t == 1 && noise.data().iter().any(|v| *v != F::zero()) {
        return invalid("the final DDPM step must use zero noise");
    }
    noise.same_shape(xt)?;
    let var = s.posterior_var(t.max(1));
    let mean = predicted_mean(s, xt, t, eps_hat)?;
    let mean = shift.apply(mean, var)?;
    if t == 1 {
        return Ok(mean);
    }
    Ok(mean.axpy(F::of(var.sqrt()), noise))
}

/// `x0` predicted in one step: `(xt - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn one_step_x0<F: Float, T: Timesteps>(
    s: &NoiseSchedule,
    xt: &Tensor<F>,
    t: T,
    eps_hat: &Tensor<F>,
) -> Result<Tensor<F>> {
    t.validate(xt.batch(), s)?;
    combine(xt, eps_hat, &t, |t| {
        let ab = s.alpha_bar(t);
        (1.0 / ab.sqrt(), -(1.0 - ab).sqrt() / ab.sqrt())
    })
}

fn x0_from_eps<F: Float>(s: &NoiseSchedule, xt: &Tensor<F>, t: usize, eps: &Tensor<F>) -> Tensor<F> {
    let ab = s.alpha_bar(t);
    let (a, b) = (F::of(1.0 / ab.sqrt()), F::of((1.0 - ab).sqrt() / ab.sqrt()));
    xt.zip_map(eps, |x, e| a * x - b * e)
}

/// Largest admissible DDIM `sigma` for a step landing on `t_to`.
pub fn ddim_sigma_max(s: &NoiseSchedule, t_to: usize) -> f64 {
    (1.0 - s.alpha_bar(t_to)).sqrt()
}

/// The `eta`-parameterized DDIM noise level for a `t_from -> t_to` step;
/// `eta = 1` matches the ancestral sampler's variance on single strides.
pub fn ddim_sigma(s: &NoiseSchedule, t_from: usize, t_to: usize, eta: f64) -> f64 {
    let (a_from, a_to) = (s.alpha_bar(t_from), s.alpha_bar(t_to));
    eta * ((1.0 - a_to) / (1.0 - a_from)).sqrt() * (1.0 - a_from / a_to).max(0.0).sqrt()
}

/// Generalized deterministic/stochastic step from `t_from` down to `t_to`.
/// `noise` is required when `sigma > 0`.
pub fn ddim_step<F: Float>(
    s: &NoiseSchedule,
    xt: &Tensor<F>,
    t_from: usize,
    t_to: usize,
    eps_mod: &Tensor<F>,
    sigma: f64,
    noise: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    s.check(t_from)?;
    if t_to > t_from {
        return invalid(format!("DDIM step must not increase t ({t_from} -> {t_to})"));
    }
    if !(0.0..=ddim_sigma_max(s, t_to)).contains(&sigma) {
        return invalid(format!("sigma {sigma} outside [0, sqrt(1 - abar_{t_to})]"));
    }
    xt.same_shape(eps_mod)?;
    let x0 = x0_from_eps(s, xt, t_from, eps_mod);
    let a_to = s.alpha_bar(t_to);
    let dir = (1.0 - a_to - sigma * sigma).max(0.0).sqrt();
    let mut out = x0.scale(F::of(a_to.sqrt())).axpy(F::of(dir), eps_mod);
    if sigma > 0.0 {
        let Some(n) = noise else {
            return invalid("sigma > 0 needs a noise tensor");
        };
        n.same_shape(xt)?;
        out = out.axpy(F::of(sigma), n);
    }
    Ok(out)
}

/// `eps_hat - sqrt(1 - abar_t) scale grad`.
pub fn guided_eps<F: Float>(
    s: &NoiseSchedule,
    eps_hat: &Tensor<F>,
    t: usize,
    shift: &GuidanceShift<F>,
) -> Result<Tensor<F>> {
    s.check(t)?;
    shift.apply(eps_hat.clone(), -(1.0 - s.alpha_bar(t)).sqrt())
}

/// Deterministic DDIM run backwards from `t_from` up to `t_to`.
/// `t_from` may be 0.
pub fn ddim_invert_step<F: Float>(
    s: &NoiseSchedule,
    xt: &Tensor<F>,
    t_from: usize,
    t_to: usize,
    eps_mod: &Tensor<F>,
) -> Result<Tensor<F>> {
    s.check(t_to)?;
    if t_to <= t_from {
        return invalid(format!("inversion must increase t ({t_from} -> {t_to})"));
    }
    xt.same_shape(eps_mod)?;
    let x0 = x0_from_eps(s, xt, t_from, eps_mod);
    let a_to = s.alpha_bar(t_to);
    Ok(x0.scale(F::of(a_to.sqrt())).axpy(F::of((1.0 - a_to).sqrt()), eps_mod))
}

/// Mean squared error over all elements.
pub fn simple_loss<F: Float>(eps: &Tensor<F>, eps_hat: &Tensor<F>) -> Result<f64> {
    eps.same_shape(eps_hat)?;
    let n = eps.numel().max(1) as f64;
    Ok(eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / n)
}

/// Residual of the gap-filling objective,
/// `eps - eps_hat + sqrt(alpha_t) sqrt(1 - abar_t) / beta_t * sigma_t^2 * g`.
pub fn pdae_residual<F: Float, T: Timesteps>(
    s: &NoiseSchedule,
    eps: &Tensor<F>,
    eps_hat: &Tensor<F>,
    g: &Tensor<F>,
    t: T,
) -> Result<Tensor<F>> {
    t.validate(eps.batch(), s)?;
    eps.same_shape(g)?;
    let diff = eps.sub(eps_hat);
    combine(&diff, g, &t, |t| (1.0, s.shift_factor(t) * s.posterior_var(t)))
}

/// Weighted gap-filling loss: per item the weight times the mean squared
/// residual over its elements, then averaged over the batch.
pub fn pdae_loss<F: Float, T: Timesteps>(
    s: &NoiseSchedule,
    w: WeightScheme,
    eps: &Tensor<F>,
    eps_hat: &Tensor<F>,
    g: &Tensor<F>,
    t: T,
) -> Result<f64> {
    let r = pdae_residual(s, eps, eps_hat, g, &t)?;
    let per = r.item_len().max(1) as f64;
    let mut total = 0.0;
    for i in 0..r.batch() {
        let ms: f64 = r.item(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / per;
        total += w.weight(s, t.at(i))? * ms;
    }
    Ok(total / r.batch().max(1) as f64)
}
