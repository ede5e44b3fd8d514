//! Compact U-Net noise predictor, convolutional encoder, gradient estimator
//! over the frozen U-Net encoder half, and the MLP latent denoiser.
//!
//! Layers only record parameter names; values live in a [`ParamStore`]. A
//! PDAE bundle keeps the pretrained `eps.*` parameters frozen in the same
//! store as the trainable `enc.*` and `grad.*` parameters.

use pdae_autograd::nn::{self, Conv2d, GroupNorm, Init, Linear};
use pdae_autograd::{Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// One forward pass: the tape, the parameters, and an optional dropout
/// stream (dropout is active only on training graphs with a stream).
pub struct Fwd<'a, F: Float> {
    pub g: &'a mut Graph<F>,
    pub store: &'a ParamStore<F>,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, F: Float> Fwd<'a, F> {
    pub fn new(g: &'a mut Graph<F>, store: &'a ParamStore<F>) -> Self {
        Self { g, store, rng: None }
    }

    pub fn with_rng(g: &'a mut Graph<F>, store: &'a ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { g, store, rng: Some(rng) }
    }

    fn linear(&mut self, l: &Linear, x: Var) -> Var {
        l.forward(self.g, self.store, x)
    }

    fn conv(&mut self, c: &Conv2d, x: Var) -> Var {
        c.forward(self.g, self.store, x)
    }

    fn norm(&mut self, n: &GroupNorm, x: Var) -> Var {
        n.forward(self.g, self.store, x)
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) => self.g.dropout(x, rate, rng),
            None => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
    /// Label classes fed through the time embedding; 0 for an unconditional
    /// network.
    pub num_classes: usize,
    pub dropout: f64,
}

impl UNetSpec {
    /// `[C, H, W]` of one image.
    pub fn item_shape(&self) -> Vec<usize> {
        vec![self.in_channels, self.image_size, self.image_size]
    }

    /// Spatial size at each level of the ladder.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.channel_mults.len()).map(|i| self.image_size >> i).collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return invalid("channel multipliers must be nonempty and positive");
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.time_embed_dim < 2 {
            return invalid("channel and embedding sizes must be positive");
        }
        let levels = self.channel_mults.len() as u32;
        if self.image_size == 0 || self.image_size % (1 << (levels - 1)) != 0 {
            return invalid(format!(
                "image size {} must be divisible by {} for {} levels",
                self.image_size,
                1 << (levels - 1),
                levels
            ));
        }
        let res = self.resolutions();
        if let Some(r) = self.attention_resolutions.iter().find(|r| !res.contains(r)) {
            return invalid(format!("attention resolution {r} not in the ladder {res:?}"));
        }
        if let Some(c) = self.channels().iter().find(|&&c| c % self.groups.min(c) != 0) {
            return invalid(format!("{c} channels not divisible into {} groups", self.groups));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct AdaProj {
    t: Linear,
    z: Linear,
}

/// `z_s (t_s GroupNorm(h) + t_b) + z_b`, where `t_proj = [t_s, t_b]` and
/// `z_proj = [z_s, z_b]` are `[batch, 2 * channels]`.
pub fn adagn<F: Float>(g: &mut Graph<F>, h: Var, groups: usize, t_proj: Var, z_proj: Var) -> Var {
    let c = g.shape(h)[1];
    let n = g.group_norm(h, groups, 1e-5);
    let (ts, tb) = (g.narrow_cols(t_proj, 0, c), g.narrow_cols(t_proj, c, c));
    let n = g.modulate(n, Some(ts), Some(tb));
    let (zs, zb) = (g.narrow_cols(z_proj, 0, c), g.narrow_cols(z_proj, c, c));
    g.modulate(n, Some(zs), Some(zb))
}

/// Residual block. With `ada` set, the second normalization is AdaGN:
/// `z_s (t_s GN(h) + t_b) + z_b`.
#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Option<Linear>,
    norm2: Option<GroupNorm>,
    ada: Option<AdaProj>,
    groups: usize,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    dropout: f64,
}

/// Sets the first `channels` bias entries to 1 so a `[scale, shift]`
/// projection starts as the identity affine.
fn unit_scale_bias<F: Float>(store: &mut ParamStore<F>, l: &Linear, channels: usize) {
    let b = store.get_mut(l.bias.as_ref().expect("projection bias")).expect("projection bias");
    b.data_mut()[..channels].iter_mut().for_each(|v| *v = F::one());
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        temb_dim: usize,
        cond_dim: Option<usize>,
        groups: usize,
        dropout: f64,
    ) -> Self {
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), groups, in_ch);
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, Init::FanIn);
        let (temb, norm2, ada) = match cond_dim {
            None => {
                let temb = Linear::new(store, rng, &format!("{name}.temb"), temb_dim, out_ch);
                (Some(temb), Some(GroupNorm::new(store, &format!("{name}.norm2"), groups, out_ch)), None)
            }
            Some(cd) => {
                let t = Linear::with_init(store, rng, &format!("{name}.ada_t"), temb_dim, 2 * out_ch, Init::FanIn, Init::Zeros);
                let z = Linear::with_init(store, rng, &format!("{name}.ada_z"), cd, 2 * out_ch, Init::FanIn, Init::Zeros);
                unit_scale_bias(store, &t, out_ch);
                unit_scale_bias(store, &z, out_ch);
                (None, None, Some(AdaProj { t, z }))
            }
        };
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, Init::FanIn);
        let skip = (in_ch != out_ch)
            .then(|| Conv2d::new(store, rng, &format!("{name}.skip"), in_ch, out_ch, 1, 1, Init::FanIn));
        Self { norm1, conv1, temb, norm2, ada, groups: groups.min(out_ch), conv2, skip, dropout }
    }

    /// `temb_act` is `silu(temb)`; `cond` is required for AdaGN blocks.
    fn forward<F: Float>(&self, f: &mut Fwd<F>, x: Var, temb_act: Var, cond: Option<Var>) -> Var {
        let h = f.norm(&self.norm1, x);
        let h = f.g.silu(h);
        let mut h = f.conv(&self.conv1, h);
        if let Some(tl) = &self.temb {
            let shift = f.linear(tl, temb_act);
            h = f.g.modulate(h, None, Some(shift));
            h = f.norm(self.norm2.as_ref().expect("norm2"), h);
        } else {
            let ada = self.ada.as_ref().expect("AdaGN projections");
            let tp = f.linear(&ada.t, temb_act);
            let zp = f.linear(&ada.z, cond.expect("AdaGN block needs a condition"));
            h = adagn(f.g, h, self.groups, tp, zp);
        }
        let h = f.g.silu(h);
        let h = f.dropout(h, self.dropout);
        let h = f.conv(&self.conv2, h);
        let s = match &self.skip {
            Some(sk) => f.conv(sk, x),
            None => x,
        };
        f.g.add(s, h)
    }
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl AttnBlock {
    fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, rng: &mut R, name: &str, ch: usize, groups: usize) -> Self {
        let mk = |store: &mut ParamStore<F>, rng: &mut R, n: &str| {
            Conv2d::new(store, rng, &format!("{name}.{n}"), ch, ch, 1, 1, Init::FanIn)
        };
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), groups, ch),
            q: mk(store, rng, "q"),
            k: mk(store, rng, "k"),
            v: mk(store, rng, "v"),
            proj: mk(store, rng, "proj"),
        }
    }

    fn forward<F: Float>(&self, f: &mut Fwd<F>, x: Var) -> Var {
        let h = f.norm(&self.norm, x);
        let (q, k, v) = (f.conv(&self.q, h), f.conv(&self.k, h), f.conv(&self.v, h));
        let a = f.g.attention(q, k, v);
        let o = f.conv(&self.proj, a);
        f.g.add(x, o)
    }
}

#[derive(Clone, Debug)]
struct TimeEmbed {
    l1: Linear,
    l2: Linear,
    label: Option<Linear>,
    feat_dim: usize,
    num_classes: usize,
}

impl TimeEmbed {
    fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, rng: &mut R, name: &str, feat_dim: usize, dim: usize, num_classes: usize) -> Self {
        let l1 = Linear::new(store, rng, &format!("{name}.l1"), feat_dim, dim);
        let l2 = Linear::new(store, rng, &format!("{name}.l2"), dim, dim);
        let label = (num_classes > 0).then(|| Linear::new(store, rng, &format!("{name}.label"), num_classes, dim));
        Self { l1, l2, label, feat_dim, num_classes }
    }

    fn forward<F: Float>(&self, f: &mut Fwd<F>, t: &[usize], labels: Option<&[usize]>) -> Var {
        let feats = f.g.input(nn::timestep_features(t, self.feat_dim));
        let h = f.linear(&self.l1, feats);
        let h = f.g.silu(h);
        let mut h = f.linear(&self.l2, h);
        if let Some(ll) = &self.label {
            let y = labels.expect("label-conditioned network needs labels");
            let oh = f.g.input(nn::one_hot(y, self.num_classes));
            let e = f.linear(ll, oh);
            h = f.g.add(h, e);
        }
        h
    }
}

/// Output of the (frozen, reusable) encoder half of the U-Net.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    /// `silu(time embedding)`.
    pub temb_act: Var,
    pub skips: Vec<Var>,
    pub h: Var,
}

#[derive(Clone, Debug)]
struct UpLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    up: Option<Conv2d>,
}

/// Middle, up path, and output head: built once for the noise predictor and
/// once (with AdaGN) for the gradient estimator.
#[derive(Clone, Debug)]
struct Decoder {
    mid: ResBlock,
    mid_attn: Option<AttnBlock>,
    ups: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Decoder {
    fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        spec: &UNetSpec,
        cond_dim: Option<usize>,
        out_init: Init,
    ) -> Self {
        let ch = spec.channels();
        let res = spec.resolutions();
        let l = ch.len();
        let (te, gr, dr) = (spec.time_embed_dim, spec.groups, spec.dropout);
        let mid = ResBlock::new(store, rng, &format!("{prefix}.mid"), ch[l - 1], ch[l - 1], te, cond_dim, gr, dr);
        let mid_attn = spec
            .attention_resolutions
            .contains(&res[l - 1])
            .then(|| AttnBlock::new(store, rng, &format!("{prefix}.mid_attn"), ch[l - 1], gr));
        let mut ups = Vec::new();
        let mut cur = ch[l - 1];
        for i in (0..l).rev() {
            let name = format!("{prefix}.up{i}");
            let r = ResBlock::new(store, rng, &format!("{name}.res"), cur + ch[i], ch[i], te, cond_dim, gr, dr);
            let attn = spec
                .attention_resolutions
                .contains(&res[i])
                .then(|| AttnBlock::new(store, rng, &format!("{name}.attn"), ch[i], gr));
            let up = (i > 0).then(|| Conv2d::new(store, rng, &format!("{name}.upconv"), ch[i], ch[i], 3, 1, Init::FanIn));
            ups.push(UpLevel { res: r, attn, up });
            cur = ch[i];
        }
        let out_norm = GroupNorm::new(store, &format!("{prefix}.out_norm"), gr, ch[0]);
        let out_conv = Conv2d::new(store, rng, &format!("{prefix}.out_conv"), ch[0], spec.in_channels, 3, 1, out_init);
        Self { mid, mid_attn, ups, out_norm, out_conv }
    }

    fn forward<F: Float>(&self, f: &mut Fwd<F>, feats: &EncoderFeatures, cond: Option<Var>) -> Var {
        let t = feats.temb_act;
        let mut h = self.mid.forward(f, feats.h, t, cond);
        if let Some(a) = &self.mid_attn {
            h = a.forward(f, h);
        }
        let l = feats.skips.len();
        for (k, lvl) in self.ups.iter().enumerate() {
            let skip = feats.skips[l - 1 - k];
            let cat = f.g.concat_channels(h, skip);
            h = lvl.res.forward(f, cat, t, cond);
            if let Some(a) = &lvl.attn {
                h = a.forward(f, h);
            }
            if let Some(u) = &lvl.up {
                let up = f.g.upsample2x(h);
                h = f.conv(u, up);
            }
        }
        let h = f.norm(&self.out_norm, h);
        let h = f.g.silu(h);
        f.conv(&self.out_conv, h)
    }
}

/// Noise predictor `eps_theta(x_t, t)` (optionally also conditioned on a
/// class label).
#[derive(Clone, Debug)]
pub struct EpsNet {
    pub spec: UNetSpec,
    time: TimeEmbed,
    in_conv: Conv2d,
    downs: Vec<(ResBlock, Option<AttnBlock>, Option<Conv2d>)>,
    decoder: Decoder,
}

pub const EPS_PREFIX: &str = "eps";

impl EpsNet {
    /// Registers freshly initialized parameters under `eps.` in `store`.
    pub fn new<F: Float, R: Rng + ?Sized>(spec: &UNetSpec, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let p = EPS_PREFIX;
        let ch = spec.channels();
        let res = spec.resolutions();
        let (te, gr, dr) = (spec.time_embed_dim, spec.groups, spec.dropout);
        let time = TimeEmbed::new(store, rng, &format!("{p}.time"), te & !1, te, spec.num_classes);
        let in_conv = Conv2d::new(store, rng, &format!("{p}.in_conv"), spec.in_channels, spec.base_channels, 3, 1, Init::FanIn);
        let mut downs = Vec::new();
        let mut cur = spec.base_channels;
        for i in 0..ch.len() {
            let name = format!("{p}.down{i}");
            let r = ResBlock::new(store, rng, &format!("{name}.res"), cur, ch[i], te, None, gr, dr);
            let a = spec.attention_resolutions.contains(&res[i]).then(|| AttnBlock::new(store, rng, &format!("{name}.attn"), ch[i], gr));
            let d = (i + 1 < ch.len()).then(|| Conv2d::new(store, rng, &format!("{name}.downconv"), ch[i], ch[i], 3, 2, Init::FanIn));
            downs.push((r, a, d));
            cur = ch[i];
        }
        let decoder = Decoder::new(store, rng, p, spec, None, Init::FanIn);
        Ok(Self { spec: spec.clone(), time, in_conv, downs, decoder })
    }

    /// Rebuilds the layer description for `spec` without touching any
    /// existing parameters.
    pub fn describe(spec: &UNetSpec) -> Result<Self> {
        let mut scratch = ParamStore::<f32>::new();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Self::new(spec, &mut scratch, &mut rng)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = &self.spec;
        if shape.len() != 4 || shape[1] != s.in_channels || shape[2] != s.image_size || shape[3] != s.image_size {
            return invalid(format!(
                "network expects [B, {}, {}, {}], got {shape:?}",
                s.in_channels, s.image_size, s.image_size
            ));
        }
        Ok(())
    }

    /// Time embedding, input convolution, and the down path.
    pub fn features<F: Float>(&self, f: &mut Fwd<F>, x: Var, t: &[usize], labels: Option<&[usize]>) -> EncoderFeatures {
        let temb = self.time.forward(f, t, labels);
        let temb_act = f.g.silu(temb);
        let mut h = f.conv(&self.in_conv, x);
        let mut skips = Vec::with_capacity(self.downs.len());
        for (r, a, d) in &self.downs {
            h = r.forward(f, h, temb_act, None);
            if let Some(a) = a {
                h = a.forward(f, h);
            }
            skips.push(h);
            if let Some(d) = d {
                h = f.conv(d, h);
            }
        }
        EncoderFeatures { temb_act, skips, h }
    }

    pub fn head<F: Float>(&self, f: &mut Fwd<F>, feats: &EncoderFeatures) -> Var {
        self.decoder.forward(f, feats, None)
    }

    pub fn forward<F: Float>(&self, f: &mut Fwd<F>, x: Var, t: &[usize], labels: Option<&[usize]>) -> Var {
        let feats = self.features(f, x, t, labels);
        self.head(f, &feats)
    }

    /// Inference helper on a plain tensor.
    pub fn predict<F: Float>(&self, store: &ParamStore<F>, xt: &Tensor<F>, t: &[usize], labels: Option<&[usize]>) -> Tensor<F> {
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, store);
        let x = f.g.input(xt.clone());
        let out = self.forward(&mut f, x, t, labels);
        g.value(out).clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub groups: usize,
    pub z_dim: usize,
}

/// Semantic encoder: stacked GroupNorm/SiLU/strided convolutions, optional
/// self-attention, and a final linear map to `z`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    in_conv: Conv2d,
    stages: Vec<(GroupNorm, Conv2d, Option<AttnBlock>)>,
    out_norm: GroupNorm,
    out: Linear,
    flat: usize,
}

pub const ENC_PREFIX: &str = "enc";

impl Encoder {
    pub fn new<F: Float, R: Rng + ?Sized>(
        spec: &EncoderSpec,
        in_channels: usize,
        image_size: usize,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.channel_mults.is_empty() || spec.z_dim == 0 || spec.base_channels == 0 {
            return invalid("encoder needs stages, channels and a positive z_dim");
        }
        let p = ENC_PREFIX;
        let gr = spec.groups;
        let in_conv = Conv2d::new(store, rng, &format!("{p}.in_conv"), in_channels, spec.base_channels, 3, 1, Init::FanIn);
        let mut cur = spec.base_channels;
        let mut r = image_size;
        let mut stages = Vec::new();
        for (i, m) in spec.channel_mults.iter().enumerate() {
            let out = m * spec.base_channels;
            if cur % gr.min(cur) != 0 {
                return invalid(format!("{cur} encoder channels not divisible into {gr} groups"));
            }
            let n = GroupNorm::new(store, &format!("{p}.stage{i}.norm"), gr, cur);
            let c = Conv2d::new(store, rng, &format!("{p}.stage{i}.conv"), cur, out, 3, 2, Init::FanIn);
            r = (r + 1) / 2;
            let a = spec
                .attention_resolutions
                .contains(&r)
                .then(|| AttnBlock::new(store, rng, &format!("{p}.stage{i}.attn"), out, gr));
            stages.push((n, c, a));
            cur = out;
        }
        let out_norm = GroupNorm::new(store, &format!("{p}.out_norm"), gr, cur);
        let flat = cur * r * r;
        let out = Linear::new(store, rng, &format!("{p}.out"), flat, spec.z_dim);
        Ok(Self { spec: spec.clone(), in_conv, stages, out_norm, out, flat })
    }

    pub fn forward<F: Float>(&self, f: &mut Fwd<F>, x: Var) -> Var {
        let mut h = f.conv(&self.in_conv, x);
        for (n, c, a) in &self.stages {
            let t = f.norm(n, h);
            let t = f.g.silu(t);
            h = f.conv(c, t);
            if let Some(a) = a {
                h = a.forward(f, h);
            }
        }
        let h = f.norm(&self.out_norm, h);
        let h = f.g.silu(h);
        let b = f.g.shape(h)[0];
        let h = f.g.reshape(h, &[b, self.flat]);
        f.linear(&self.out, h)
    }

    pub fn encode<F: Float>(&self, store: &ParamStore<F>, x0: &Tensor<F>) -> Tensor<F> {
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, store);
        let x = f.g.input(x0.clone());
        let z = self.forward(&mut f, x);
        g.value(z).clone()
    }
}

/// `G_psi(x_t, c, t)`: new middle/up/output blocks with AdaGN on top of the
/// frozen encoder half and time embedding of an [`EpsNet`]. The condition
/// `c` is a semantic code or a one-hot label.
#[derive(Clone, Debug)]
pub struct GradientEstimator {
    pub cond_dim: usize,
    decoder: Decoder,
}

pub const GRAD_PREFIX: &str = "grad";

impl GradientEstimator {
    /// The output convolution starts at zero so the initial shift is zero.
    pub fn new<F: Float, R: Rng + ?Sized>(eps: &EpsNet, cond_dim: usize, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        if cond_dim == 0 {
            return invalid("gradient estimator needs a positive condition size");
        }
        let decoder = Decoder::new(store, rng, GRAD_PREFIX, &eps.spec, Some(cond_dim), Init::Zeros);
        Ok(Self { cond_dim, decoder })
    }

    pub fn forward<F: Float>(&self, f: &mut Fwd<F>, feats: &EncoderFeatures, cond: Var) -> Var {
        self.decoder.forward(f, feats, Some(cond))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSpec {
    pub z_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
}

/// MLP noise predictor over normalized semantic codes.
#[derive(Clone, Debug)]
pub struct LatentDenoiser {
    pub spec: LatentSpec,
    time: TimeEmbed,
    input: Linear,
    blocks: Vec<(GroupNorm, Linear, Linear, Linear)>,
    out_norm: GroupNorm,
    out: Linear,
}

pub const LATENT_PREFIX: &str = "lat";

impl LatentDenoiser {
    pub fn new<F: Float, R: Rng + ?Sized>(spec: &LatentSpec, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        if spec.z_dim == 0 || spec.hidden == 0 || spec.layers == 0 || spec.time_embed_dim < 2 {
            return invalid("latent denoiser sizes must be positive");
        }
        if spec.hidden % spec.groups.min(spec.hidden) != 0 {
            return invalid("latent hidden size not divisible into groups");
        }
        let p = LATENT_PREFIX;
        let (h, te) = (spec.hidden, spec.time_embed_dim);
        let time = TimeEmbed::new(store, rng, &format!("{p}.time"), te & !1, te, 0);
        let input = Linear::new(store, rng, &format!("{p}.in"), spec.z_dim, h);
        let blocks = (0..spec.layers)
            .map(|i| {
                let n = format!("{p}.block{i}");
                (
                    GroupNorm::new(store, &format!("{n}.norm"), spec.groups, h),
                    Linear::new(store, rng, &format!("{n}.temb"), te, h),
                    Linear::new(store, rng, &format!("{n}.l1"), h, h),
                    Linear::new(store, rng, &format!("{n}.l2"), h, h),
                )
            })
            .collect();
        let out_norm = GroupNorm::new(store, &format!("{p}.out_norm"), spec.groups, h);
        let out = Linear::new(store, rng, &format!("{p}.out"), h, spec.z_dim);
        Ok(Self { spec: spec.clone(), time, input, blocks, out_norm, out })
    }

    pub fn forward<F: Float>(&self, f: &mut Fwd<F>, z: Var, t: &[usize]) -> Var {
        let temb = self.time.forward(f, t, None);
        let temb = f.g.silu(temb);
        let mut h = f.linear(&self.input, z);
        for (n, tl, l1, l2) in &self.blocks {
            let a = f.g.silu(h);
            let a = f.linear(l1, a);
            let te = f.linear(tl, temb);
            let a = f.g.add(a, te);
            let a = f.norm(n, a);
            let a = f.g.silu(a);
            let a = f.linear(l2, a);
            h = f.g.add(h, a);
        }
        let h = f.norm(&self.out_norm, h);
        let h = f.g.silu(h);
        f.linear(&self.out, h)
    }

    pub fn predict<F: Float>(&self, store: &ParamStore<F>, zt: &Tensor<F>, t: &[usize]) -> Tensor<F> {
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, store);
        let z = f.g.input(zt.clone());
        let out = self.forward(&mut f, z, t);
        g.value(out).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_spec() -> UNetSpec {
        UNetSpec {
            in_channels: 1,
            image_size: 8,
            base_channels: 4,
            channel_mults: vec![1, 2],
            attention_resolutions: vec![4],
            time_embed_dim: 8,
            groups: 2,
            num_classes: 0,
            dropout: 0.0,
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny_spec();
        assert!(s.validate().is_ok());
        s.attention_resolutions = vec![3];
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.image_size = 6;
        s.channel_mults = vec![1, 1, 1];
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.channel_mults.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn shapes_are_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let spec = tiny_spec();
        let net = EpsNet::new(&spec, &mut store, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 1, 8, 8], &mut rng);
        let y = net.predict(&store, &x, &[1, 500, 1000], None);
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());

        let enc_spec = EncoderSpec { base_channels: 4, channel_mults: vec![1, 2], attention_resolutions: vec![4], groups: 2, z_dim: 5 };
        let enc = Encoder::new(&enc_spec, 1, 8, &mut store, &mut rng).unwrap();
        let z = enc.encode(&store, &x);
        assert_eq!(z.shape(), &[3, 5]);
        assert_eq!(z, enc.encode(&store, &x));
    }

    #[test]
    fn describe_matches_fresh_topology() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let spec = tiny_spec();
        EpsNet::new(&spec, &mut store, &mut rng).unwrap();
        let mut other = ParamStore::<f32>::new();
        EpsNet::new(&spec, &mut other, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(store.same_topology(&other));
        assert!(EpsNet::describe(&spec).is_ok());
    }

    #[test]
    fn gradient_estimator_starts_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let net = EpsNet::new(&tiny_spec(), &mut store, &mut rng).unwrap();
        let ge = GradientEstimator::new(&net, 3, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &store);
        let x = f.g.input(Tensor::randn(&[2, 1, 8, 8], &mut rng));
        let c = f.g.input(Tensor::randn(&[2, 3], &mut rng));
        let feats = net.features(&mut f, x, &[10, 20], None);
        let out = ge.forward(&mut f, &feats, c);
        assert_eq!(g.value(out).max_abs(), 0.0);
        assert_eq!(g.shape(out), &[2, 1, 8, 8]);
    }

    #[test]
    fn adagn_identity_and_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::<f64>::randn(&[1, 4, 2, 2], &mut rng);
        let ident = Tensor::from_vec(&[1, 8], vec![1., 1., 1., 1., 0., 0., 0., 0.]).unwrap();
        let mut g = Graph::new();
        let hv = g.input(h.clone());
        let (a, b) = (g.input(ident.clone()), g.input(ident));
        let out = adagn(&mut g, hv, 2, a, b);
        let plain = g.group_norm(hv, 2, 1e-5);
        assert_eq!(g.value(out), g.value(plain));
        // Each group of 2 channels x 4 pixels has zero mean and unit variance.
        for grp in g.value(plain).data().chunks(8) {
            let m: f64 = grp.iter().sum::<f64>() / 8.0;
            let v: f64 = grp.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
        }

        let tp = [0.5, -1.0, 2.0, 1.5, 0.1, 0.2, -0.3, 0.4];
        let zp = [2.0, 0.5, -1.0, 1.0, -0.2, 0.0, 0.7, 1.1];
        let mut g = Graph::new();
        let hv = g.input(h.clone());
        let a = g.input(Tensor::from_vec(&[1, 8], tp.to_vec()).unwrap());
        let b = g.input(Tensor::from_vec(&[1, 8], zp.to_vec()).unwrap());
        let out = adagn(&mut g, hv, 2, a, b);
        for grp in 0..2 {
            let vals = &h.data()[grp * 8..grp * 8 + 8];
            let m: f64 = vals.iter().sum::<f64>() / 8.0;
            let v: f64 = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0;
            for k in 0..8 {
                let ch = grp * 2 + k / 4;
                let n = (vals[k] - m) / (v + 1e-5).sqrt();
                let want = zp[ch] * (tp[ch] * n + tp[4 + ch]) + zp[4 + ch];
                assert!((g.value(out).data()[grp * 8 + k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn latent_denoiser_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let spec = LatentSpec { z_dim: 6, hidden: 16, layers: 2, time_embed_dim: 8, groups: 4 };
        let net = LatentDenoiser::new(&spec, &mut store, &mut rng).unwrap();
        let z = Tensor::randn(&[5, 6], &mut rng);
        let out = net.predict(&store, &z, &[1, 2, 3, 4, 5]);
        assert_eq!(out.shape(), &[5, 6]);
        assert!(out.all_finite());
    }
}
