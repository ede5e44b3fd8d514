//! Randomly initialized models for benchmarks.

use pdae_core::model::{ConditionerSpec, EpsBundle, PdaeBundle};
use pdae_core::networks::{EncoderSpec, EpsNet, UNetSpec};
use pdae_core::training::init_pdae;
use pdae_core::{ParamStore, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A small 28x28 single-channel denoiser.
pub fn glyph_unet() -> UNetSpec {
    UNetSpec {
        in_channels: 1,
        image_size: 28,
        base_channels: 8,
        channel_mults: vec![1, 2, 2],
        attention_resolutions: vec![7],
        time_embed_dim: 32,
        groups: 4,
        num_classes: 0,
        dropout: 0.0,
    }
}

pub fn glyph_encoder() -> EncoderSpec {
    EncoderSpec { base_channels: 8, channel_mults: vec![1, 2, 2], attention_resolutions: vec![], groups: 4, z_dim: 32 }
}

pub fn eps_bundle(spec: &UNetSpec, seed: u64) -> Result<EpsBundle> {
    let mut params = ParamStore::new();
    EpsNet::new(spec, &mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
    EpsBundle::new(spec, params)
}

pub fn pdae_bundle(seed: u64) -> Result<PdaeBundle> {
    let base = eps_bundle(&glyph_unet(), seed)?;
    init_pdae(&base, &ConditionerSpec::Encoder(glyph_encoder()), seed + 1)
}
