//! Properties of the timestep weighting, and paired gap-filling runs that
//! differ only in the weighting.

use std::time::Instant;

use pdae_core::data::Dataset;
use pdae_core::diffusion::{pdae_loss, q_sample};
use pdae_core::model::{ConditionerSpec, PdaeBundle};
use pdae_core::{NoiseSchedule, Result, Tensor, WeightScheme};
use rand::Rng;

use super::fixtures::{pdae_model, toy_data, toy_encoder, toy_pdae_cfg, toy_pretrained};
use super::{rng, schedule, Outcome};
use crate::tryo;

const GAMMA: f64 = 0.1;

/// Failed property descriptions.
fn properties(s: &NoiseSchedule) -> Vec<String> {
    let mut bad = Vec::new();
    let w = WeightScheme::Pdae { gamma: GAMMA };
    for t in 1..=s.steps() {
        let v = w.weight(s, t).unwrap();
        if !(v > 0.0 && v < 1.0) {
            bad.push(format!("weight {v} at t={t}"));
        }
        let snr = s.alpha_bar(t) / (1.0 - s.alpha_bar(t));
        if (v - w.weight_at_snr(snr)).abs() > 1e-12 {
            bad.push(format!("weight by step and by SNR differ at t={t}"));
        }
    }
    for k in -800..=800 {
        let snr = 10f64.powf(k as f64 / 100.0);
        let v = w.weight_at_snr(snr);
        if !(v > 0.0 && v < 1.0) {
            bad.push(format!("weight {v} at SNR {snr:e}"));
        }
    }
    for gamma in [0.05, 0.1, 0.3, 0.5, 0.9] {
        let w = WeightScheme::Pdae { gamma };
        let peak = gamma / (1.0 - gamma);
        // Dense log grid: the best grid point must neighbour the peak.
        let grid: Vec<f64> = (-60_000..=60_000).map(|k| 10f64.powf(k as f64 / 10_000.0)).collect();
        let best = grid.iter().copied().max_by(|a, b| w.weight_at_snr(*a).total_cmp(&w.weight_at_snr(*b))).unwrap();
        if (best.log10() - peak.log10()).abs() > 1.5e-4 {
            bad.push(format!("gamma {gamma}: grid argmax {best:e}, expected {peak:e}"));
        }
        let top = gamma.powf(gamma) * (1.0 - gamma).powf(1.0 - gamma);
        if (w.weight_at_snr(peak) - top).abs() > 1e-15 {
            bad.push(format!("gamma {gamma}: peak value {} vs {top}", w.weight_at_snr(peak)));
        }
    }
    let half = WeightScheme::Pdae { gamma: GAMMA }.weight_at_snr(1.0);
    if half != 0.5 {
        bad.push(format!("weight at SNR 1 is {half:e}"));
    }
    bad
}

/// Held-out weighted gap-filling objective on fixed (image, t, noise) draws.
fn objective(b: &PdaeBundle, s: &NoiseSchedule, data: &Dataset, weight: WeightScheme) -> Result<f64> {
    let mut r = rng(66);
    let x = data.points_f64();
    let mut total = 0.0;
    let batches = 40;
    for _ in 0..batches {
        let idx: Vec<usize> = (0..50).map(|_| r.random_range(0..x.batch())).collect();
        let t: Vec<usize> = (0..idx.len()).map(|_| r.random_range(1..=s.steps())).collect();
        let x0 = x.select(&idx);
        let eps = Tensor::<f64>::randn(x0.shape(), &mut r);
        let xt = q_sample(s, &x0, &t[..], &eps)?;
        let z = b.encode(&x0)?;
        let (e, g) = b.eps_and_grads(&xt, &t, &[&z])?;
        total += pdae_loss(s, weight, &eps, &e, &g[0], &t[..])?;
    }
    Ok(total / batches as f64)
}

pub fn run() -> Outcome {
    let s = schedule();
    let start = Instant::now();
    let bad = properties(&s);
    let prop_time = start.elapsed().as_secs_f64();

    let data = toy_data();
    let base = tryo!(toy_pretrained());
    let cond = ConditionerSpec::Encoder(toy_encoder());
    let weighted = tryo!(pdae_model("toy-pdae", &data, &base, &cond, WeightScheme::Pdae { gamma: GAMMA }, &toy_pdae_cfg()));
    let simple = tryo!(pdae_model("toy-pdae-simple", &data, &base, &cond, WeightScheme::Simple, &toy_pdae_cfg()));
    let target = WeightScheme::Pdae { gamma: GAMMA };
    let obj_w = tryo!(objective(&weighted, &s, &data, target));
    let obj_s = tryo!(objective(&simple, &s, &data, target));
    let plain_w = tryo!(objective(&weighted, &s, &data, WeightScheme::Simple));
    let plain_s = tryo!(objective(&simple, &s, &data, WeightScheme::Simple));

    let pass = bad.is_empty() && prop_time < 1.0 && obj_w < obj_s;
    let props = if bad.is_empty() { "all properties hold".to_string() } else { bad[..bad.len().min(3)].join("; ") };
    Outcome::new(
        pass,
        format!(
            "{props} ({prop_time:.2}s); weighted objective: weighted training {obj_w:.5e} vs simple training {obj_s:.5e} (unweighted: {plain_w:.4e} vs {plain_s:.4e})"
        ),
    )
}
