//! Generative pipelines: autoencoding, inversion, interpolation,
//! manipulation, truncation scaling, mixed-stage guidance, improved
//! unconditional sampling and few-shot conditional generation.

use pdae_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{ddim_invert_step, ddim_sigma, ddim_step, ddpm_step, guided_eps, GuidanceShift};
use crate::error::{invalid, Error, Result};
use crate::model::{same_t, Conditioned, Denoiser, DirectionLerp, EpsModel, LatentBundle, PdaeBundle, Unguided};
use crate::schedule::NoiseSchedule;
use crate::training::LinearClassifier;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ddpm,
    Ddim,
}

/// How `guided_fraction` selects the guided steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FractionMode {
    /// The first fraction of the executed sampling steps.
    Steps,
    /// Steps whose timestep lies in the upper fraction of `1..=T`.
    TRange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerPlan {
    pub method: Method,
    /// Number of DDIM steps; DDPM always runs all `T`.
    pub steps: usize,
    /// DDIM stochasticity; 0 is deterministic.
    pub eta: f64,
    pub guidance_scale: f64,
    /// Portion of the run that is guided, starting from `T`.
    pub guided_fraction: f64,
    pub fraction_mode: FractionMode,
    pub seed: u64,
}

impl Default for SamplerPlan {
    fn default() -> Self {
        Self {
            method: Method::Ddim,
            steps: 100,
            eta: 0.0,
            guidance_scale: 1.0,
            guided_fraction: 1.0,
            fraction_mode: FractionMode::Steps,
            seed: 0,
        }
    }
}

impl SamplerPlan {
    pub fn ddim(steps: usize, seed: u64) -> Self {
        Self { steps, seed, ..Default::default() }
    }

    pub fn ddpm(seed: u64) -> Self {
        Self { method: Method::Ddpm, seed, ..Default::default() }
    }

    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.method == Method::Ddim && (self.steps == 0 || self.steps > s.steps()) {
            return invalid(format!("DDIM step count {} outside 1..={}", self.steps, s.steps()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return invalid(format!("eta {} outside [0, 1]", self.eta));
        }
        if !(0.0..=1.0).contains(&self.guided_fraction) {
            return invalid(format!("guided fraction {} outside [0, 1]", self.guided_fraction));
        }
        if !self.guidance_scale.is_finite() {
            return invalid("guidance scale must be finite");
        }
        Ok(())
    }

    /// `0 = t_0 < t_1 < ... < t_S = T`.
    pub fn timesteps(&self, s: &NoiseSchedule) -> Result<Vec<usize>> {
        self.validate(s)?;
        let t = s.steps();
        let n = match self.method {
            Method::Ddpm => t,
            Method::Ddim => self.steps,
        };
        Ok((0..=n).map(|i| ((i as f64) * t as f64 / n as f64).round() as usize).collect())
    }

    /// Whether the `k`-th executed step (0-based, from `T` down), which
    /// denoises `x_t`, uses guidance.
    fn fraction_guides(&self, k: usize, n: usize, t: usize, total: usize) -> bool {
        match self.fraction_mode {
            FractionMode::Steps => (k as f64) < (self.guided_fraction * n as f64).round(),
            FractionMode::TRange => t as f64 > (1.0 - self.guided_fraction) * total as f64,
        }
    }
}

/// Guidance active only for `t1 < t <= t2`. `t1 == t2` is the empty stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StageSplit {
    pub t1: usize,
    pub t2: usize,
}

impl StageSplit {
    pub fn new(t1: usize, t2: usize, s: &NoiseSchedule) -> Result<Self> {
        if t1 > t2 || t2 > s.steps() {
            return invalid(format!("stage ({t1}, {t2}] not within 0..={}", s.steps()));
        }
        Ok(Self { t1, t2 })
    }

    pub fn contains(&self, t: usize) -> bool {
        self.t1 < t && t <= self.t2
    }

    pub fn len(&self) -> usize {
        self.t2 - self.t1
    }

    pub fn is_empty(&self) -> bool {
        self.t1 == self.t2
    }
}

/// Which steps are guided.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Guide {
    /// Per the plan's guided fraction.
    Plan,
    Stage(StageSplit),
    /// Outside the stage: `t <= t1` or `t > t2`.
    Complement(StageSplit),
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Runs the reverse process from `x_T`. Step noise comes from `rng` in an
/// order that depends only on the plan, so guided and unguided runs with the
/// same seed see identical noise.
pub fn sample_from(
    den: &dyn Denoiser,
    s: &NoiseSchedule,
    plan: &SamplerPlan,
    guide: Guide,
    x_t: Tensor<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f64>> {
    let seq = plan.timesteps(s)?;
    let n = seq.len() - 1;
    let total = s.steps();
    let mut x = x_t;
    for (k, i) in (1..=n).rev().enumerate() {
        let (t, to) = (seq[i], seq[i - 1]);
        let active = plan.guidance_scale != 0.0
            && match guide {
                Guide::Plan => plan.fraction_guides(k, n, t, total),
                Guide::Stage(sp) => sp.contains(t),
                Guide::Complement(sp) => !sp.contains(t),
            };
        let (eps, g) = den.predict(&x, t, active)?;
        let shift = match (active, g) {
            (true, Some(g)) => GuidanceShift::new(g, plan.guidance_scale),
            _ => GuidanceShift::none(),
        };
        x = match plan.method {
            Method::Ddpm => {
                let noise = if t > 1 { Tensor::randn(x.shape(), rng) } else { Tensor::zeros(x.shape()) };
                ddpm_step(s, &x, t, &eps, &shift, &noise)?
            }
            Method::Ddim => {
                let e = guided_eps(s, &eps, t, &shift)?;
                let sigma = ddim_sigma(s, t, to, plan.eta);
                if sigma > 0.0 {
                    let noise = Tensor::randn(x.shape(), rng);
                    ddim_step(s, &x, t, to, &e, sigma, Some(&noise))?
                } else {
                    ddim_step(s, &x, t, to, &e, 0.0, None)?
                }
            }
        };
    }
    Ok(x)
}

/// Samples `count` items of `item_shape` starting from seeded Gaussian noise.
pub fn sample(den: &dyn Denoiser, s: &NoiseSchedule, plan: &SamplerPlan, guide: Guide, item_shape: &[usize], count: usize) -> Result<Tensor<f64>> {
    let mut rng = rng_for(plan.seed);
    let shape: Vec<usize> = std::iter::once(count).chain(item_shape.iter().copied()).collect();
    let x_t = Tensor::randn(&shape, &mut rng);
    sample_from(den, s, plan, guide, x_t, &mut rng)
}

/// Deterministic DDIM run in reverse from `x0` to `x_T`. The noise
/// prediction for a step starting at `t` is evaluated at `max(t, 1)`.
pub fn invert(den: &dyn Denoiser, s: &NoiseSchedule, plan: &SamplerPlan, x0: &Tensor<f64>) -> Result<Tensor<f64>> {
    if plan.method != Method::Ddim {
        return invalid("inversion needs a DDIM plan");
    }
    let seq = plan.timesteps(s)?;
    let n = seq.len() - 1;
    let total = s.steps();
    let mut x = x0.clone();
    for i in 0..n {
        let (from, to) = (seq[i], seq[i + 1]);
        let te = from.max(1);
        let k = n - 1 - i;
        let active = plan.guidance_scale != 0.0 && plan.fraction_guides(k, n, te, total);
        let (eps, g) = den.predict(&x, te, active)?;
        let shift = match (active, g) {
            (true, Some(g)) => GuidanceShift::new(g, plan.guidance_scale),
            _ => GuidanceShift::none(),
        };
        let e = guided_eps(s, &eps, te, &shift)?;
        x = ddim_invert_step(s, &x, from, to, &e)?;
    }
    Ok(x)
}

/// Stochastic latent code `x_T` of `x0` under its own semantic code.
#[allow(non_snake_case)]
pub fn infer_xT(bundle: &PdaeBundle, s: &NoiseSchedule, plan: &SamplerPlan, x0: &Tensor<f64>) -> Result<Tensor<f64>> {
    let z = bundle.encode(x0)?;
    invert(&Conditioned { bundle, cond: z }, s, plan, x0)
}

/// Reconstruction of `x0` from its semantic code, starting from either
/// seeded noise or the inferred `x_T`.
pub fn autoencode(bundle: &PdaeBundle, s: &NoiseSchedule, plan: &SamplerPlan, x0: &Tensor<f64>, inferred: bool) -> Result<Tensor<f64>> {
    let z = bundle.encode(x0)?;
    decode(bundle, s, plan, &z, if inferred { Some(x0) } else { None })
}

/// Decodes codes `z`. With `invert_from`, `x_T` is inferred from those
/// images under the same codes; otherwise it is seeded noise.
pub fn decode(bundle: &PdaeBundle, s: &NoiseSchedule, plan: &SamplerPlan, z: &Tensor<f64>, invert_from: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
    let den = Conditioned { bundle, cond: z.clone() };
    let mut rng = rng_for(plan.seed);
    let shape: Vec<usize> = std::iter::once(z.batch()).chain(bundle.spec().item_shape()).collect();
    let x_t = match invert_from {
        Some(x0) => {
            if plan.method != Method::Ddim {
                return invalid("an inferred x_T needs a DDIM plan");
            }
            invert(&den, s, plan, x0)?
        }
        None => Tensor::randn(&shape, &mut rng),
    };
    sample_from(&den, s, plan, Guide::Plan, x_t, &mut rng)
}

pub fn lerp(a: &Tensor<f64>, b: &Tensor<f64>, lambda: f64) -> Tensor<f64> {
    a.scale(1.0 - lambda).axpy(lambda, b)
}

/// Per-item spherical interpolation; falls back to `lerp` for parallel
/// pairs.
pub fn slerp(a: &Tensor<f64>, b: &Tensor<f64>, lambda: f64) -> Result<Tensor<f64>> {
    a.same_shape(b)?;
    let mut out = Tensor::zeros(a.shape());
    for i in 0..a.batch() {
        let (u, v) = (a.item(i), b.item(i));
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = if nu > 0.0 && nv > 0.0 { (u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() / (nu * nv)).clamp(-1.0, 1.0) } else { 1.0 };
        let theta = cos.acos();
        let (wa, wb) = if theta.sin().abs() < 1e-12 {
            (1.0 - lambda, lambda)
        } else {
            (((1.0 - lambda) * theta).sin() / theta.sin(), (lambda * theta).sin() / theta.sin())
        };
        for (o, (x, y)) in out.item_mut(i).iter_mut().zip(u.iter().zip(v)) {
            *o = wa * x + wb * y;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMode {
    /// Guide with `G(x_t, Lerp(z_a, z_b), t)`.
    LatentLerp,
    /// Guide with `Lerp(G(x_t, z_a, t), G(x_t, z_b, t))`.
    DirectionLerp,
}

/// Interpolates between `xa` and `xb` starting from the Slerp of their
/// inferred `x_T`.
pub fn interpolate(
    bundle: &PdaeBundle,
    s: &NoiseSchedule,
    plan: &SamplerPlan,
    xa: &Tensor<f64>,
    xb: &Tensor<f64>,
    lambda: f64,
    mode: InterpMode,
) -> Result<Tensor<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return invalid(format!("interpolation weight {lambda} outside [0, 1]"));
    }
    xa.same_shape(xb)?;
    let za = bundle.encode(xa)?;
    let zb = bundle.encode(xb)?;
    let ta = invert(&Conditioned { bundle, cond: za.clone() }, s, plan, xa)?;
    let tb = invert(&Conditioned { bundle, cond: zb.clone() }, s, plan, xb)?;
    let x_t = slerp(&ta, &tb, lambda)?;
    let mut rng = rng_for(plan.seed);
    match mode {
        InterpMode::LatentLerp => {
            let den = Conditioned { bundle, cond: lerp(&za, &zb, lambda) };
            sample_from(&den, s, plan, Guide::Plan, x_t, &mut rng)
        }
        InterpMode::DirectionLerp => {
            let den = DirectionLerp { bundle, a: za, b: zb, lambda };
            sample_from(&den, s, plan, Guide::Plan, x_t, &mut rng)
        }
    }
}

/// Code statistics used to normalize before a latent edit.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CodeStats {
    pub fn normalize(&self, z: &Tensor<f64>) -> Tensor<f64> {
        let d = self.mean.len();
        Tensor::from_fn(z.shape(), |i| (z.data()[i] - self.mean[i % d]) / self.std[i % d])
    }

    pub fn denormalize(&self, z: &Tensor<f64>) -> Tensor<f64> {
        let d = self.mean.len();
        Tensor::from_fn(z.shape(), |i| z.data()[i] * self.std[i % d] + self.mean[i % d])
    }
}

/// Moves normalized codes along `direction` by `scale`.
pub fn shift_codes(z: &Tensor<f64>, stats: &CodeStats, direction: &[f64], scale: f64) -> Result<Tensor<f64>> {
    if z.rank() != 2 || z.dim(1) != direction.len() || stats.mean.len() != direction.len() {
        return invalid(format!("direction of {} dims for codes {:?}", direction.len(), z.shape()));
    }
    let mut n = stats.normalize(z);
    for i in 0..n.batch() {
        for (v, d) in n.item_mut(i).iter_mut().zip(direction) {
            *v += scale * d;
        }
    }
    Ok(stats.denormalize(&n))
}

/// Decodes `x0` after moving its code along `direction`, optionally from
/// its inferred `x_T`.
#[allow(clippy::too_many_arguments)]
pub fn manipulate(
    bundle: &PdaeBundle,
    s: &NoiseSchedule,
    plan: &SamplerPlan,
    x0: &Tensor<f64>,
    stats: &CodeStats,
    direction: &[f64],
    scale: f64,
    inferred: bool,
) -> Result<Tensor<f64>> {
    let z = bundle.encode(x0)?;
    let moved = shift_codes(&z, stats, direction, scale)?;
    if !inferred {
        return decode(bundle, s, plan, &moved, None);
    }
    let x_t = invert(&Conditioned { bundle, cond: z }, s, plan, x0)?;
    let mut rng = rng_for(plan.seed);
    sample_from(&Conditioned { bundle, cond: moved }, s, plan, Guide::Plan, x_t, &mut rng)
}

/// Samples guided by `scale * G(x_t, y, t)` from a label-conditioned bundle.
pub fn truncation_sample(bundle: &PdaeBundle, s: &NoiseSchedule, plan: &SamplerPlan, label: usize, scale: f64, count: usize) -> Result<Tensor<f64>> {
    let cond = bundle.label_condition(&vec![label; count])?;
    let p = SamplerPlan { guidance_scale: scale, ..plan.clone() };
    sample(&Conditioned { bundle, cond }, s, &p, Guide::Plan, &bundle.spec().item_shape(), count)
}

/// Unconditional steps outside `split`, guided steps inside.
pub fn mixed_stage_sample(den: &dyn Denoiser, s: &NoiseSchedule, plan: &SamplerPlan, split: StageSplit, item_shape: &[usize], count: usize) -> Result<Tensor<f64>> {
    StageSplit::new(split.t1, split.t2, s)?;
    sample(den, s, plan, Guide::Stage(split), item_shape, count)
}

/// Normalized latent samples from the latent denoiser, denormalized on
/// return.
pub fn sample_latents(latent: &LatentBundle, s: &NoiseSchedule, plan: &SamplerPlan, count: usize) -> Result<Tensor<f64>> {
    let p = SamplerPlan { guidance_scale: 0.0, ..plan.clone() };
    let z = sample(&Unguided(latent), s, &p, Guide::Plan, &[latent.net.spec.z_dim], count)?;
    Ok(latent.denormalize(&z))
}

/// Codes from the latent denoiser decoded with guidance for the plan's
/// guided fraction and the pretrained model alone afterwards.
pub fn improved_unconditional(
    bundle: &PdaeBundle,
    latent: &LatentBundle,
    s: &NoiseSchedule,
    latent_schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    latent_plan: &SamplerPlan,
    count: usize,
) -> Result<Tensor<f64>> {
    if latent.net.spec.z_dim != bundle.grad.cond_dim {
        return invalid("latent denoiser and gradient estimator disagree on the code size");
    }
    let z = sample_latents(latent, latent_schedule, latent_plan, count)?;
    decode(bundle, s, plan, &z, None)
}

/// Few-shot acceptance: reject below 0.5, otherwise accept with
/// probability `p` (`u` uniform on `[0, 1)`).
pub fn accept(p: f64, u: f64) -> bool {
    p >= 0.5 && u < p
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotStats {
    pub proposals: usize,
    pub accepted: usize,
}

impl FewShotStats {
    pub fn rate(&self) -> f64 {
        self.accepted as f64 / self.proposals.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotConfig {
    pub class: usize,
    pub count: usize,
    /// Codes proposed per latent sampling call.
    pub proposal_batch: usize,
    /// Abort once at least `10 / floor` codes were proposed and the rate is
    /// below the floor.
    pub floor: f64,
}

/// Rejection-sampled codes of class `class` under `clf` (which reads
/// normalized codes), decoded to images.
#[allow(clippy::too_many_arguments)]
pub fn fewshot_conditional(
    bundle: &PdaeBundle,
    latent: &LatentBundle,
    clf: &LinearClassifier,
    s: &NoiseSchedule,
    latent_schedule: &NoiseSchedule,
    plan: &SamplerPlan,
    latent_plan: &SamplerPlan,
    cfg: &FewShotConfig,
) -> Result<(Tensor<f64>, FewShotStats)> {
    if cfg.class >= clf.classes() || clf.dim() != latent.net.spec.z_dim {
        return invalid("classifier does not match the class or code size");
    }
    if !(cfg.floor > 0.0 && cfg.floor < 1.0) || cfg.count == 0 || cfg.proposal_batch == 0 {
        return invalid("few-shot sampling needs a count, a batch and a floor in (0, 1)");
    }
    let mut rng = rng_for(plan.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut stats = FewShotStats { proposals: 0, accepted: 0 };
    let mut kept: Vec<Tensor<f64>> = Vec::new();
    let min_proposals = (10.0 / cfg.floor).ceil() as usize;
    let mut round = 0u64;
    while stats.accepted < cfg.count {
        let lp = SamplerPlan { seed: latent_plan.seed.wrapping_add(round), ..latent_plan.clone() };
        round += 1;
        let z = sample_latents(latent, latent_schedule, &lp, cfg.proposal_batch)?;
        let zn = latent.normalize(&z);
        for i in 0..z.batch() {
            stats.proposals += 1;
            let p = clf.probs_one(zn.item(i))[cfg.class];
            if accept(p, rng.random::<f64>()) && stats.accepted < cfg.count {
                stats.accepted += 1;
                kept.push(z.narrow(i, 1));
            }
        }
        if stats.accepted < cfg.count && stats.proposals >= min_proposals && stats.rate() < cfg.floor {
            return Err(Error::AcceptanceFloor { rate: stats.rate(), floor: cfg.floor, proposals: stats.proposals, accepted: stats.accepted });
        }
    }
    let z = Tensor::concat(&kept.iter().collect::<Vec<_>>())?;
    Ok((decode(bundle, s, plan, &z, None)?, stats))
}

/// Noise prediction of any model for a batch at one timestep.
pub fn eps_at(model: &dyn EpsModel, xt: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
    model.eps(xt, &same_t(t, xt.batch()))
}
