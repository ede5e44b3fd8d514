//! Toy data and trained models shared between criteria. Trained models are
//! cached on disk, keyed by a digest of everything that determines them.

use pdae_core::checkpoint::Checkpoint;
use pdae_core::data::{Dataset, Synthetic};
use pdae_core::model::{ConditionerSpec, EpsBundle, PdaeBundle};
use pdae_core::networks::{EncoderSpec, UNetSpec};
use pdae_core::training::{pretrain_ddpm, train_pdae, Hook, TrainConfig};
use pdae_core::{Result, ScheduleSpec, WeightScheme};
use sha2::{Digest, Sha256};

use super::{cache_dir, schedule, verbose};

pub const TOY_SIZE: usize = 8;
pub const TOY_CLASSES: usize = 4;

pub fn toy_data() -> Dataset {
    Synthetic::Blobs { points: 64, classes: TOY_CLASSES, size: TOY_SIZE, channels: 1 }.generate(3).unwrap()
}

pub fn toy_unet(classes: usize) -> UNetSpec {
    UNetSpec {
        in_channels: 1,
        image_size: TOY_SIZE,
        base_channels: 16,
        channel_mults: vec![1, 2],
        attention_resolutions: vec![],
        time_embed_dim: 64,
        groups: 4,
        num_classes: classes,
        dropout: 0.0,
    }
}

pub fn toy_encoder() -> EncoderSpec {
    EncoderSpec { base_channels: 16, channel_mults: vec![1, 2], attention_resolutions: vec![], groups: 4, z_dim: 16 }
}

pub fn toy_pretrain_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        lr: 1e-3,
        images: 32 * 6000,
        ema_decay: 0.999,
        grad_clip: 1.0,
        seed: 11,
        log_every: 500,
        verbose: verbose(),
    }
}

pub fn toy_pdae_cfg() -> TrainConfig {
    TrainConfig { images: 32 * 4000, seed: 12, lr: 5e-4, ..toy_pretrain_cfg() }
}

/// Training settings that determine the weights; logging is left out.
fn cfg_key(cfg: &TrainConfig) -> String {
    let c = TrainConfig { verbose: false, log_every: 0, ..cfg.clone() };
    format!("{c:?}")
}

fn data_key(data: &Dataset) -> String {
    let sum: u64 = data.images().data().iter().map(|v| v.to_bits() as u64).sum();
    format!("{}x{:?}:{sum}:{:?}", data.len(), data.image_shape(), data.labels().map(|l| l.iter().sum::<usize>()))
}

fn key(parts: &str) -> String {
    hex::encode(&Sha256::digest(parts.as_bytes())[..8])
}

fn cached(name: &str, desc: String, build: impl FnOnce() -> Result<Checkpoint>) -> Result<Checkpoint> {
    let path = cache_dir().join(format!("{name}-{}.ckpt", key(&desc)));
    if let Ok(ck) = Checkpoint::load(&path) {
        return Ok(ck);
    }
    let ck = build()?;
    ck.save(&path)?;
    Ok(ck)
}

/// Trains (or loads) a noise predictor on `data`. `hook` only runs when the
/// model is actually trained.
pub fn eps_model(name: &str, data: &Dataset, spec: &UNetSpec, cfg: &TrainConfig, hook: Option<Hook>) -> Result<EpsBundle> {
    let desc = format!("{spec:?}{}{}", cfg_key(cfg), data_key(data));
    cached(name, desc, || {
        let t = pretrain_ddpm(data, spec, &schedule(), cfg, hook)?;
        Ok(Checkpoint::from_eps(&t.model, Some(&t.raw), &ScheduleSpec::default()))
    })?
    .to_eps()
}

pub fn toy_pretrained() -> Result<EpsBundle> {
    eps_model("toy-eps", &toy_data(), &toy_unet(0), &toy_pretrain_cfg(), None)
}

pub fn pdae_model(
    name: &str,
    data: &Dataset,
    base: &EpsBundle,
    cond: &ConditionerSpec,
    weight: WeightScheme,
    cfg: &TrainConfig,
) -> Result<PdaeBundle> {
    let digest = pdae_core::training::frozen_digest(&base.params);
    let desc = format!("{cond:?}{weight:?}{}{digest}{}", cfg_key(cfg), data_key(data));
    cached(name, desc, || {
        let t = train_pdae(data, base, cond, &schedule(), weight, cfg, None)?;
        Ok(Checkpoint::from_pdae(&t.model, Some(&t.raw), &ScheduleSpec::default()))
    })?
    .to_pdae()
}

pub fn toy_pdae() -> Result<PdaeBundle> {
    let base = toy_pretrained()?;
    pdae_model("toy-pdae", &toy_data(), &base, &ConditionerSpec::Encoder(toy_encoder()), WeightScheme::default(), &toy_pdae_cfg())
}

pub fn toy_label_pdae() -> Result<PdaeBundle> {
    let base = toy_pretrained()?;
    let cond = ConditionerSpec::Labels { classes: TOY_CLASSES };
    pdae_model("toy-label-pdae", &toy_data(), &base, &cond, WeightScheme::default(), &toy_pdae_cfg())
}
