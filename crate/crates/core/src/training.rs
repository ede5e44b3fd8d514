//! Training loops: denoiser pretraining, gap-filling training of the encoder
//! and gradient estimator on a frozen denoiser, the latent denoiser, and the
//! linear latent classifier.
//!
//! Losses are reduced in `f64` outside the graph and fed back as analytic
//! seeds on the network outputs, so the graph only holds the networks.

use std::collections::BTreeMap;
use std::io::Write;

use pdae_autograd::optim::{clip_global_norm, Adam};
use pdae_autograd::{Float, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::diffusion::q_sample;
use crate::error::{invalid, Error, Result};
use crate::model::{Conditioner, ConditionerSpec, EpsBundle, LatentBundle, PdaeBundle};
use crate::networks::{Encoder, EpsNet, Fwd, GradientEstimator, LatentDenoiser, LatentSpec, UNetSpec, EPS_PREFIX};
use crate::schedule::{NoiseSchedule, WeightScheme};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Training budget in images; the step count is rounded up.
    pub images: usize,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Log every this many steps; 0 logs only the last step.
    pub log_every: usize,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-4,
            images: 100_000,
            ema_decay: 0.9999,
            grad_clip: 1.0,
            seed: 0,
            log_every: 100,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn steps(&self) -> usize {
        self.images.div_ceil(self.batch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.images == 0 {
            return invalid("batch size and image budget must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return invalid(format!("EMA decay {} outside [0, 1)", self.ema_decay));
        }
        if !(self.grad_clip > 0.0) {
            return invalid("gradient clip must be positive");
        }
        Ok(())
    }

    fn should_log(&self, step: usize) -> bool {
        step == self.steps() || (self.log_every > 0 && step % self.log_every == 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub images: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,images,loss,grad_norm")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:.8e},{:.6e}", r.step, r.images, r.loss, r.grad_norm)?;
        }
        Ok(())
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// Called at every logged step with the row and the current EMA weights.
pub type Hook<'a> = &'a mut dyn FnMut(&LogRow, &ParamStore<f32>) -> Result<()>;

/// `ema <- decay * ema + (1 - decay) * raw` for every trainable parameter of
/// `raw`.
pub fn ema_update(ema: &mut ParamStore<f32>, raw: &ParamStore<f32>, decay: f64) -> Result<()> {
    let d = decay as f32;
    for name in raw.trainable_names() {
        let src = raw.expect(&name);
        let Some(dst) = ema.get_mut(&name) else {
            return invalid(format!("EMA store lacks `{name}`"));
        };
        if dst.shape() != src.shape() {
            return invalid(format!("EMA shape mismatch for `{name}`"));
        }
        for (e, r) in dst.data_mut().iter_mut().zip(src.data()) {
            *e = d * *e + (1.0 - d) * r;
        }
    }
    Ok(())
}

/// SHA-256 over the names and little-endian values of every frozen
/// parameter, in name order.
pub fn frozen_digest(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        if store.is_trainable(name) {
            continue;
        }
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    opt: Adam<f32>,
    acc: f64,
    acc_n: usize,
    norm: f64,
    log: TrainLog,
    what: &'static str,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a TrainConfig, what: &'static str) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, opt: Adam::new(cfg.lr), acc: 0.0, acc_n: 0, norm: 0.0, log: TrainLog::default(), what })
    }

    fn update(
        &mut self,
        step: usize,
        loss: f64,
        mut grads: BTreeMap<String, Tensor<f32>>,
        raw: &mut ParamStore<f32>,
        ema: &mut ParamStore<f32>,
        hook: &mut Option<Hook>,
    ) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("{} loss diverged at step {step}", self.what)));
        }
        let norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
        self.opt.step(raw, &grads);
        ema_update(ema, raw, self.cfg.ema_decay)?;
        self.acc += loss;
        self.acc_n += 1;
        self.norm = norm;
        if self.cfg.should_log(step) {
            let row = LogRow {
                step,
                images: (step * self.cfg.batch_size).min(self.cfg.images),
                loss: self.acc / self.acc_n as f64,
                grad_norm: self.norm,
            };
            if self.cfg.verbose {
                eprintln!("{} step {:>6}/{} loss {:.5} |g| {:.3}", self.what, step, self.cfg.steps(), row.loss, row.grad_norm);
            }
            if let Some(h) = hook.as_mut() {
                h(&row, ema)?;
            }
            self.log.rows.push(row);
            self.acc = 0.0;
            self.acc_n = 0;
        }
        Ok(())
    }
}

fn draw_batch<R: Rng>(n: usize, b: usize, rng: &mut R) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

fn draw_t<R: Rng>(s: &NoiseSchedule, b: usize, rng: &mut R) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(1..=s.steps())).collect()
}

/// Unweighted noise prediction loss of one batch and its parameter
/// gradients. Dropout is active when `dropout_rng` is given.
pub fn simple_loss_grads<F: Float>(
    net: &EpsNet,
    store: &ParamStore<F>,
    xt: Tensor<F>,
    t: &[usize],
    eps: &Tensor<F>,
    labels: Option<&[usize]>,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, BTreeMap<String, Tensor<F>>)> {
    let training = dropout_rng.is_some();
    let mut g = if training { Graph::training() } else { Graph::new() };
    let mut f = match dropout_rng {
        Some(r) => Fwd::with_rng(&mut g, store, r),
        None => Fwd::new(&mut g, store),
    };
    let x = f.g.input(xt);
    let out = net.forward(&mut f, x, t, labels);
    let pred = g.value(out);
    let n = F::of(pred.numel() as f64);
    let loss = crate::diffusion::simple_loss(eps, pred)?;
    let seed = pred.zip_map(eps, |p, e| F::of(2.0) * (p - e) / n);
    Ok((loss, g.backward(&[(out, seed)]).into_params()))
}

/// Weighted gap-filling loss of one batch and its gradients with respect to
/// the encoder (or nothing, for labels) and the gradient estimator. The
/// frozen denoiser only supplies features and `eps_hat`. `weights[t - 1]`
/// is the weight of step `t`.
#[allow(clippy::too_many_arguments)]
pub fn pdae_loss_grads<F: Float>(
    bundle: &PdaeBundle,
    s: &NoiseSchedule,
    store: &ParamStore<F>,
    x0: Tensor<F>,
    labels: Option<&[usize]>,
    xt: Tensor<F>,
    t: &[usize],
    eps: &Tensor<F>,
    weights: &[f64],
) -> Result<(f64, BTreeMap<String, Tensor<F>>)> {
    let s_len = s.steps().min(weights.len());
    let mut g = Graph::new();
    let mut f = Fwd::new(&mut g, store);
    let c = match &bundle.cond {
        Conditioner::Encoder(e) => {
            let x = f.g.input(x0);
            e.forward(&mut f, x)
        }
        Conditioner::Labels { classes } => {
            let y = labels.ok_or_else(|| Error::Invalid("label conditioning needs labels".into()))?;
            f.g.input(pdae_autograd::nn::one_hot(y, *classes))
        }
    };
    let x = f.g.input(xt);
    let feats = bundle.eps.features(&mut f, x, t, None);
    let eh = bundle.eps.head(&mut f, &feats);
    let gv = bundle.grad.forward(&mut f, &feats, c);
    let (eps_hat, grad) = (g.value(eh), g.value(gv));
    let b = t.len();
    let d = eps.item_len();
    let mut seed = Tensor::<F>::zeros(grad.shape());
    let mut loss = 0.0;
    for i in 0..b {
        let ti = t[i];
        if ti == 0 || ti > s_len {
            return invalid(format!("timestep {ti} outside 1..={s_len}"));
        }
        let k = s.shift_factor(ti) * s.posterior_var(ti);
        let lam = weights[ti - 1];
        let mut ss = 0.0;
        let sd = seed.item_mut(i);
        for j in 0..d {
            let r = (eps.item(i)[j] - eps_hat.item(i)[j]).as_f64() + k * grad.item(i)[j].as_f64();
            ss += r * r;
            sd[j] = F::of(lam * 2.0 * k * r / (b * d) as f64);
        }
        loss += lam * ss / d as f64;
    }
    loss /= b as f64;
    Ok((loss, g.backward(&[(gv, seed)]).into_params()))
}

/// Output of a training run: the EMA weights in a usable bundle, the raw
/// weights and the loss log.
#[derive(Clone, Debug)]
pub struct Trained<B> {
    pub model: B,
    pub raw: ParamStore<f32>,
    pub log: TrainLog,
}

/// Trains a noise predictor with the unweighted loss. A spec with
/// `num_classes > 0` trains a label-conditioned network and needs labels.
pub fn pretrain_ddpm(data: &Dataset, spec: &UNetSpec, s: &NoiseSchedule, cfg: &TrainConfig, mut hook: Option<Hook>) -> Result<Trained<EpsBundle>> {
    let labels = match (spec.num_classes, data.labels()) {
        (0, _) => None,
        (k, Some(l)) if data.num_classes() <= k => Some(l),
        (_, Some(_)) => return invalid("dataset has more classes than the network"),
        (_, None) => return invalid("label-conditioned pretraining needs labels"),
    };
    if data.is_empty() {
        return invalid("empty dataset");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut raw = ParamStore::new();
    let net = EpsNet::new(spec, &mut raw, &mut rng)?;
    net.check_input(&[1].iter().chain(data.image_shape()).copied().collect::<Vec<_>>())?;
    let mut ema = raw.clone();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut lp = Loop::new(cfg, "pretrain")?;
    for step in 1..=cfg.steps() {
        let idx = draw_batch(data.len(), cfg.batch_size, &mut rng);
        let x0 = data.batch(&idx);
        let t = draw_t(s, idx.len(), &mut rng);
        let eps = Tensor::<f32>::randn(x0.shape(), &mut rng);
        let xt = q_sample(s, &x0, &t[..], &eps)?;
        let y = labels.map(|l| idx.iter().map(|&i| l[i]).collect::<Vec<_>>());
        let (loss, grads) = simple_loss_grads(&net, &raw, xt, &t, &eps, y.as_deref(), Some(&mut drop_rng))?;
        lp.update(step, loss, grads, &mut raw, &mut ema, &mut hook)?;
    }
    Ok(Trained { model: EpsBundle { net, params: ema }, raw, log: lp.log })
}

/// Builds an untrained bundle around a frozen pretrained denoiser.
pub fn init_pdae(pretrained: &EpsBundle, cond: &ConditionerSpec, seed: u64) -> Result<PdaeBundle> {
    if pretrained.spec().num_classes > 0 {
        return invalid("the frozen denoiser must be unconditional");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = pretrained.params.subset(EPS_PREFIX);
    params.freeze_all();
    let spec = pretrained.spec();
    let conditioner = match cond {
        ConditionerSpec::Encoder(e) => Conditioner::Encoder(Encoder::new(e, spec.in_channels, spec.image_size, &mut params, &mut rng)?),
        ConditionerSpec::Labels { classes } => Conditioner::Labels { classes: *classes },
    };
    let grad = GradientEstimator::new(&pretrained.net, conditioner.dim(), &mut params, &mut rng)?;
    Ok(PdaeBundle { eps: pretrained.net.clone(), cond: conditioner, grad, params })
}

/// Trains the encoder (or label conditioner) and gradient estimator with the
/// weighted gap-filling loss. The pretrained parameters are frozen; any
/// change to them is reported as [`Error::FrozenDrift`].
pub fn train_pdae(
    data: &Dataset,
    pretrained: &EpsBundle,
    cond: &ConditionerSpec,
    s: &NoiseSchedule,
    weight: WeightScheme,
    cfg: &TrainConfig,
    mut hook: Option<Hook>,
) -> Result<Trained<PdaeBundle>> {
    weight.validate()?;
    if data.is_empty() {
        return invalid("empty dataset");
    }
    if let ConditionerSpec::Labels { classes } = cond {
        match data.labels() {
            Some(_) if data.num_classes() <= *classes => {}
            _ => return invalid("label conditioning needs labels within range"),
        }
    }
    let mut bundle = init_pdae(pretrained, cond, cfg.seed)?;
    bundle.eps.check_input(&[1].iter().chain(data.image_shape()).copied().collect::<Vec<_>>())?;
    let frozen_before = frozen_digest(&bundle.params);
    let frozen_copy = bundle.params.subset(EPS_PREFIX);
    let mut raw = bundle.params.clone();
    let mut ema = raw.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut lp = Loop::new(cfg, "pdae")?;
    let weights: Vec<f64> = (1..=s.steps()).map(|t| weight.weight(s, t)).collect::<Result<_>>()?;
    for step in 1..=cfg.steps() {
        let idx = draw_batch(data.len(), cfg.batch_size, &mut rng);
        let x0 = data.batch(&idx);
        let t = draw_t(s, idx.len(), &mut rng);
        let eps = Tensor::<f32>::randn(x0.shape(), &mut rng);
        let xt = q_sample(s, &x0, &t[..], &eps)?;
        let y: Option<Vec<usize>> = data.labels().map(|l| idx.iter().map(|&i| l[i]).collect());
        let (loss, grads) = pdae_loss_grads(&bundle, s, &raw, x0, y.as_deref(), xt, &t, &eps, &weights)?;
        lp.update(step, loss, grads, &mut raw, &mut ema, &mut hook)?;
    }
    if frozen_digest(&raw) != frozen_before {
        let name = frozen_copy
            .iter()
            .find(|(n, v)| raw.get(n) != Some(*v))
            .map(|(n, _)| n.clone())
            .unwrap_or_else(|| "<unknown>".into());
        return Err(Error::FrozenDrift(name));
    }
    bundle.params = ema;
    Ok(Trained { model: bundle, raw, log: lp.log })
}

/// Per-dimension mean and standard deviation of codes `[N, D]`. Standard
/// deviations are floored at `1e-6` so constant dimensions stay finite.
pub fn code_stats(z: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.rank() != 2 || z.dim(0) == 0 {
        return invalid(format!("codes must be a non-empty [N, D] tensor, got {:?}", z.shape()));
    }
    let (n, d) = z.dims2();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += z.item(i)[j] / n as f64;
        }
    }
    for i in 0..n {
        for (j, v) in var.iter_mut().enumerate() {
            *v += (z.item(i)[j] - mean[j]).powi(2) / n as f64;
        }
    }
    Ok((mean, var.into_iter().map(|v| v.sqrt().max(1e-6)).collect()))
}

/// Trains the latent denoiser on normalized codes with the L1 noise loss.
pub fn train_latent_dpm(codes: &Tensor<f64>, spec: &LatentSpec, s: &NoiseSchedule, cfg: &TrainConfig, mut hook: Option<Hook>) -> Result<Trained<LatentBundle>> {
    let (mean, std) = code_stats(codes)?;
    if codes.dim(1) != spec.z_dim {
        return invalid(format!("codes have {} dims, latent spec {}", codes.dim(1), spec.z_dim));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut raw = ParamStore::new();
    let net = LatentDenoiser::new(spec, &mut raw, &mut rng)?;
    let mut bundle = LatentBundle { net, params: ParamStore::new(), mean, std };
    let data: Tensor<f32> = bundle.normalize(codes).cast();
    let mut ema = raw.clone();
    let mut lp = Loop::new(cfg, "latent")?;
    for step in 1..=cfg.steps() {
        let idx = draw_batch(data.batch(), cfg.batch_size, &mut rng);
        let z0 = data.select(&idx);
        let t = draw_t(s, idx.len(), &mut rng);
        let eps = Tensor::<f32>::randn(z0.shape(), &mut rng);
        let zt = q_sample(s, &z0, &t[..], &eps)?;
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &raw);
        let z = f.g.input(zt);
        let out = bundle.net.forward(&mut f, z, &t);
        let pred = g.value(out);
        let n = pred.numel() as f32;
        let loss = pred.data().iter().zip(eps.data()).map(|(p, e)| (p - e).abs() as f64).sum::<f64>() / n as f64;
        let seed = pred.zip_map(&eps, |p, e| {
            if p > e {
                1.0 / n
            } else if p < e {
                -1.0 / n
            } else {
                0.0
            }
        });
        let grads = g.backward(&[(out, seed)]).into_params();
        lp.update(step, loss, grads, &mut raw, &mut ema, &mut hook)?;
    }
    bundle.params = ema;
    Ok(Trained { model: bundle, raw, log: lp.log })
}

/// Batch indices with the same number of draws (with replacement) from
/// every class present in `labels`, so rare classes are oversampled.
pub fn balanced_batch<R: Rng + ?Sized>(labels: &[usize], batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let present: Vec<&Vec<usize>> = by_class.iter().filter(|v| !v.is_empty()).collect();
    if present.is_empty() || batch < present.len() {
        return invalid(format!("cannot balance a batch of {batch} over {} classes", present.len()));
    }
    let per = batch / present.len();
    let mut out = Vec::with_capacity(per * present.len());
    for members in present {
        for _ in 0..per {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    /// Draw class-balanced batches; used when one class is a small labelled
    /// positive set and the rest is unlabelled.
    pub balanced: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 64, lr: 0.05, l2: 1e-4, balanced: false, seed: 0 }
    }
}

/// Softmax linear classifier over codes.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `[classes][dim]`.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl LinearClassifier {
    pub fn classes(&self) -> usize {
        self.b.len()
    }

    pub fn dim(&self) -> usize {
        self.w.first().map_or(0, |r| r.len())
    }

    pub fn probs_one(&self, z: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self.w.iter().zip(&self.b).map(|(w, b)| w.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + b).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn probs(&self, z: &Tensor<f64>) -> Vec<Vec<f64>> {
        (0..z.batch()).map(|i| self.probs_one(z.item(i))).collect()
    }

    pub fn predict(&self, z: &Tensor<f64>) -> Vec<usize> {
        self.probs(z)
            .into_iter()
            .map(|p| p.iter().enumerate().fold(0, |best, (k, v)| if *v > p[best] { k } else { best }))
            .collect()
    }

    pub fn accuracy(&self, z: &Tensor<f64>, labels: &[usize]) -> f64 {
        let p = self.predict(z);
        p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
    }

    /// Unit-norm direction that raises the logit of `to` relative to `from`.
    pub fn direction(&self, from: usize, to: usize) -> Result<Vec<f64>> {
        if from >= self.classes() || to >= self.classes() || from == to {
            return invalid(format!("bad class pair ({from}, {to}) for {} classes", self.classes()));
        }
        let d: Vec<f64> = self.w[to].iter().zip(&self.w[from]).map(|(a, b)| a - b).collect();
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return invalid("classifier weights do not separate the classes");
        }
        Ok(d.into_iter().map(|v| v / n).collect())
    }
}

/// Minibatch gradient descent on softmax cross-entropy with L2 decay.
pub fn train_linear_classifier(z: &Tensor<f64>, labels: &[usize], cfg: &ClassifierConfig) -> Result<LinearClassifier> {
    if z.rank() != 2 || z.batch() != labels.len() || labels.is_empty() {
        return invalid("classifier needs [N, D] codes and N labels");
    }
    let classes = labels.iter().max().unwrap() + 1;
    if classes < 2 {
        return invalid("classifier needs at least two classes");
    }
    let d = z.dim(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut c = LinearClassifier { w: vec![vec![0.0; d]; classes], b: vec![0.0; classes] };
    let n = labels.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size.max(1));
    for _ in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let idx = if cfg.balanced {
                balanced_batch(labels, cfg.batch_size.max(classes), &mut rng)?
            } else {
                draw_batch(n, cfg.batch_size.max(1), &mut rng)
            };
            let mut gw = vec![vec![0.0; d]; classes];
            let mut gb = vec![0.0; classes];
            for &i in &idx {
                let x = z.item(i);
                let p = c.probs_one(x);
                for k in 0..classes {
                    let r = p[k] - if labels[i] == k { 1.0 } else { 0.0 };
                    gb[k] += r;
                    for (g, xv) in gw[k].iter_mut().zip(x) {
                        *g += r * xv;
                    }
                }
            }
            let m = idx.len() as f64;
            for k in 0..classes {
                c.b[k] -= cfg.lr * gb[k] / m;
                for j in 0..d {
                    c.w[k][j] -= cfg.lr * (gw[k][j] / m + cfg.l2 * c.w[k][j]);
                }
            }
        }
    }
    Ok(c)
}
