//! Gap curves and one-step reconstructions of a model trained on 28x28
//! glyphs with a budget of over a million images. Takes hours on one CPU
//! the first time; the trained models are cached.

use pdae_core::data::{Dataset, Synthetic};
use pdae_core::eval::{measure_gap_curve_on, one_step_mse, pick_indices};
use pdae_core::model::ConditionerSpec;
use pdae_core::networks::{EncoderSpec, UNetSpec};
use pdae_core::training::TrainConfig;
use pdae_core::{Tensor, WeightScheme};

use super::fixtures::{eps_model, pdae_model};
use super::{cache_dir, schedule, verbose, Outcome};
use crate::tryo;

const SIZE: usize = 28;
const MID_T: usize = 500;

fn data() -> Dataset {
    Synthetic::Glyphs { points: 60_000, size: SIZE }.generate(0).unwrap()
}

fn unet() -> UNetSpec {
    UNetSpec {
        in_channels: 1,
        image_size: SIZE,
        base_channels: 8,
        channel_mults: vec![1, 2, 2],
        attention_resolutions: vec![],
        time_embed_dim: 32,
        groups: 4,
        num_classes: 0,
        dropout: 0.0,
    }
}

fn pretrain_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        lr: 2e-4,
        images: 32 * 20_000,
        ema_decay: 0.999,
        grad_clip: 1.0,
        seed: 21,
        log_every: 500,
        verbose: verbose(),
    }
}

fn pdae_cfg() -> TrainConfig {
    TrainConfig { images: 32 * 32_000, seed: 22, ..pretrain_cfg() }
}

pub fn run() -> Outcome {
    let s = schedule();
    let data = data();
    let base = tryo!(eps_model("glyph-eps", &data, &unet(), &pretrain_cfg(), None));
    let enc = EncoderSpec { base_channels: 8, channel_mults: vec![1, 2, 2], attention_resolutions: vec![], groups: 4, z_dim: 32 };
    let cfg = pdae_cfg();
    let model = tryo!(pdae_model("glyph-pdae", &data, &base, &ConditionerSpec::Encoder(enc), WeightScheme::default(), &cfg));

    let curve = tryo!(measure_gap_curve_on(&model, &s, &data, 1000, 10, 5));
    if let Ok(f) = std::fs::File::create(cache_dir().join("glyph-gap.csv")) {
        let _ = curve.write_csv(f);
    }
    let filled = curve.filled_fraction();
    let worst = curve
        .t
        .iter()
        .zip(curve.gap_shifted.iter().zip(&curve.gap_pretrained))
        .map(|(t, (a, b))| (a / b, *t))
        .fold((0.0, 0), |m, v| if v.0 > m.0 { v } else { m });

    let x0: Tensor<f64> = data.batch(&pick_indices(data.len(), 1000, 6)).cast();
    let (pre, shifted) = tryo!(one_step_mse(&model, &s, &x0, MID_T, 7));
    let ratio = pre / shifted;
    Outcome::new(
        filled == 1.0 && ratio >= 2.0,
        format!(
            "{} images seen; shifted gap <= pretrained at {:.0}% of {} bins (worst ratio {:.3} at t={}); one-step MSE at t={MID_T}: {pre:.4} -> {shifted:.4} ({ratio:.2}x)",
            cfg.images,
            100.0 * filled,
            curve.t.len(),
            worst.0,
            worst.1
        ),
    )
}
