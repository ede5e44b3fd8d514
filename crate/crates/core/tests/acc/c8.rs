//! Guidance scale 0 against unconditional sampling in every pipeline, the
//! truncation sweep on label-conditioned toy data, and the few-shot
//! acceptance rule.

use pdae_core::eval::{mean_pairwise_distance, nearest_labels, pick_indices};
use pdae_core::model::{Conditioned, LatentBundle, PdaeBundle, Unguided};
use pdae_core::networks::LatentSpec;
use pdae_core::sampling::{
    accept, autoencode, decode, fewshot_conditional, improved_unconditional, interpolate, invert, manipulate, mixed_stage_sample,
    sample, sample_from, sample_latents, slerp, truncation_sample, CodeStats, FewShotConfig, Guide, InterpMode, SamplerPlan,
    StageSplit,
};
use pdae_core::training::{code_stats, train_latent_dpm, train_linear_classifier, ClassifierConfig, TrainConfig};
use pdae_core::{NoiseSchedule, Result, ScheduleSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixtures::{toy_data, toy_label_pdae, toy_pdae, TOY_CLASSES};
use super::{rng, schedule, Outcome};
use crate::tryo;

const SCALES: [f64; 7] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
const PER_CLASS: usize = 32;

fn same(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits())
}

/// Unconditional reference: seeded noise or the unguided inversion of `x0`.
fn reference(b: &PdaeBundle, s: &NoiseSchedule, plan: &SamplerPlan, x_t: Tensor<f64>) -> Result<Tensor<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(plan.seed);
    sample_from(&Unguided(b), s, plan, Guide::Plan, x_t, &mut r)
}

fn latent_parts(b: &PdaeBundle, x: &Tensor<f64>, labels: &[usize]) -> Result<(LatentBundle, pdae_core::training::LinearClassifier)> {
    let z = b.encode(x)?;
    let spec = LatentSpec { z_dim: z.dim(1), hidden: 32, layers: 2, time_embed_dim: 16, groups: 4 };
    let cfg = TrainConfig { batch_size: 32, lr: 1e-3, images: 32 * 200, ema_decay: 0.9, seed: 81, ..TrainConfig::default() };
    let latent = train_latent_dpm(&z, &spec, &ScheduleSpec::latent_default().build()?, &cfg, None)?.model;
    let clf = train_linear_classifier(&latent.normalize(&z), labels, &ClassifierConfig::default())?;
    Ok((latent, clf))
}

/// Names of pipelines whose scale-0 output differs from the unguided run.
fn degeneracy(s: &NoiseSchedule) -> Result<(Vec<&'static str>, usize)> {
    let data = toy_data();
    let labels = data.labels().unwrap().to_vec();
    let b = toy_pdae()?;
    let lb = toy_label_pdae()?;
    let x: Tensor<f64> = data.points_f64();
    let x0 = x.select(&pick_indices(x.batch(), 6, 82));
    let mut bad = Vec::new();
    let mut checked = 0;
    let mut check = |name: &'static str, ok: bool| {
        checked += 1;
        if !ok {
            bad.push(name);
        }
    };
    let (latent, clf) = latent_parts(&b, &x, &labels)?;
    let ls = ScheduleSpec::latent_default().build()?;
    for plan in [SamplerPlan { guidance_scale: 0.0, ..SamplerPlan::ddim(20, 83) }, SamplerPlan { guidance_scale: 0.0, eta: 1.0, ..SamplerPlan::ddim(20, 84) }] {
        let u = |p: &SamplerPlan| sample(&Unguided(&b), s, p, Guide::Plan, &b.spec().item_shape(), 6);
        let inv = invert(&Unguided(&b), s, &plan, &x0)?;

        check("autoencode", same(&autoencode(&b, s, &plan, &x0, false)?, &u(&plan)?));
        if plan.eta == 0.0 {
            check("autoencode (inferred)", same(&autoencode(&b, s, &plan, &x0, true)?, &reference(&b, s, &plan, inv.clone())?));
            let xb = x.select(&pick_indices(x.batch(), 6, 85));
            let invb = invert(&Unguided(&b), s, &plan, &xb)?;
            let mid = slerp(&inv, &invb, 0.3)?;
            for mode in [InterpMode::LatentLerp, InterpMode::DirectionLerp] {
                check("interpolate", same(&interpolate(&b, s, &plan, &x0, &xb, 0.3, mode)?, &reference(&b, s, &plan, mid.clone())?));
            }
            let z = b.encode(&x)?;
            let (mean, std) = code_stats(&z)?;
            let stats = CodeStats { mean, std };
            let dir = vec![1.0 / (z.dim(1) as f64).sqrt(); z.dim(1)];
            check("manipulate (inferred)", same(&manipulate(&b, s, &plan, &x0, &stats, &dir, 2.0, true)?, &reference(&b, s, &plan, inv.clone())?));
            check("manipulate", same(&manipulate(&b, s, &plan, &x0, &stats, &dir, 2.0, false)?, &u(&plan)?));
        }
        let lu = sample(&Unguided(&lb), s, &plan, Guide::Plan, &lb.spec().item_shape(), 6)?;
        check("truncation", same(&truncation_sample(&lb, s, &plan, 1, 0.0, 6)?, &lu));
        let cond = lb.label_condition(&[0, 1, 2, 3, 0, 1])?;
        let split = StageSplit::new(300, 700, s)?;
        check("mixed stage", same(&mixed_stage_sample(&Conditioned { bundle: &lb, cond }, s, &plan, split, &lb.spec().item_shape(), 6)?, &lu));

        let lplan = SamplerPlan::ddim(20, 86);
        let iu = SamplerPlan { guided_fraction: 0.7, ..plan.clone() };
        let z = sample_latents(&latent, &ls, &lplan, 6)?;
        check("improved unconditional", same(&improved_unconditional(&b, &latent, s, &ls, &iu, &lplan, 6)?, &u(&iu)?));
        check("decode", same(&decode(&b, s, &plan, &z, None)?, &u(&plan)?));
        let fs = FewShotConfig { class: 0, count: 4, proposal_batch: 8, floor: 0.01 };
        let (imgs, _) = fewshot_conditional(&b, &latent, &clf, s, &ls, &plan, &lplan, &fs)?;
        check("few-shot", same(&imgs, &sample(&Unguided(&b), s, &plan, Guide::Plan, &b.spec().item_shape(), 4)?));
    }
    Ok((bad, checked))
}

/// Class accuracy (nearest training point) and mean within-class pairwise
/// distance at each truncation scale.
fn sweep(s: &NoiseSchedule) -> Result<Vec<(f64, f64, f64)>> {
    let data = toy_data();
    let labels = data.labels().unwrap().to_vec();
    let x = data.points_f64();
    let b = toy_label_pdae()?;
    let plan = SamplerPlan::ddim(50, 87);
    let mut out = Vec::new();
    for scale in SCALES {
        let mut hits = 0;
        let mut div = 0.0;
        for y in 0..TOY_CLASSES {
            let imgs = truncation_sample(&b, s, &plan, y, scale, PER_CLASS)?;
            hits += nearest_labels(&imgs, &x, &labels)?.iter().filter(|&&l| l == y).count();
            div += mean_pairwise_distance(&imgs);
        }
        out.push((scale, hits as f64 / (PER_CLASS * TOY_CLASSES) as f64, div / TOY_CLASSES as f64));
    }
    Ok(out)
}

/// Empirical acceptance at a few probabilities against the rule.
fn rule() -> Vec<String> {
    let mut r = rng(88);
    let n = 10_000;
    let mut bad = Vec::new();
    for p in [0.0, 0.3, 0.4, 0.4999, 0.5, 0.7, 0.9, 1.0] {
        let k = (0..n).filter(|_| accept(p, r.random::<f64>())).count();
        let rate = k as f64 / n as f64;
        let expected = if p < 0.5 { 0.0 } else { p };
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        let ok = if se == 0.0 { rate == expected } else { (rate - expected).abs() <= 3.0 * se };
        if !ok {
            bad.push(format!("p={p}: rate {rate}"));
        }
    }
    if accept(0.4999999, 0.0) || !accept(0.5, 0.0) || accept(0.5, 0.5) || !accept(1.0, 0.999_999) {
        bad.push("boundary cases".into());
    }
    bad
}

pub fn run() -> Outcome {
    let s = schedule();
    let (bad, checked) = tryo!(degeneracy(&s));
    let curve = tryo!(sweep(&s));
    let rule_bad = rule();

    let acc: Vec<f64> = curve.iter().map(|c| c.1).collect();
    let monotone = acc.windows(2).all(|w| w[1] >= w[0]) && acc[acc.len() - 1] > acc[0];
    let sweep_txt: Vec<String> = curve.iter().map(|(sc, a, d)| format!("{sc}: {a:.3}/{d:.2}")).collect();
    let pass = bad.is_empty() && monotone && rule_bad.is_empty();
    Outcome::new(
        pass,
        format!(
            "scale 0 bitwise unguided in {}/{checked} pipeline runs{}; truncation accuracy/diversity {}; acceptance rule {}",
            checked - bad.len(),
            if bad.is_empty() { String::new() } else { format!(" (differs: {})", bad.join(", ")) },
            sweep_txt.join(", "),
            if rule_bad.is_empty() { "matches".to_string() } else { rule_bad.join("; ") }
        ),
    )
}
