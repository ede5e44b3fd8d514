//! A trained noise predictor on a four-point set against the closed-form
//! optimum, and the label-restricted Bayes residual against the
//! unconditional one.

use pdae_core::data::Synthetic;
use pdae_core::diffusion::q_sample;
use pdae_core::model::EpsModel;
use pdae_core::networks::UNetSpec;
use pdae_core::oracle::MixtureOracle;
use pdae_core::training::TrainConfig;
use pdae_core::Tensor;
use rand::Rng;

use super::fixtures::eps_model;
use super::{rng, schedule, verbose, Outcome};
use crate::tryo;

const MID_T: usize = 500;
const DRAWS: usize = 2000;

pub fn run() -> Outcome {
    let s = schedule();
    let data = Synthetic::Blobs { points: 4, classes: 2, size: 8, channels: 1 }.generate(4).unwrap();
    let spec = UNetSpec {
        in_channels: 1,
        image_size: 8,
        base_channels: 8,
        channel_mults: vec![1, 2],
        attention_resolutions: vec![],
        time_embed_dim: 32,
        groups: 4,
        num_classes: 0,
        dropout: 0.0,
    };
    let cfg = TrainConfig {
        batch_size: 32,
        lr: 2e-3,
        images: 32 * 5000,
        ema_decay: 0.995,
        grad_clip: 1.0,
        seed: 31,
        log_every: 500,
        verbose: verbose(),
    };
    let net = tryo!(eps_model("four-point-eps", &data, &spec, &cfg, None));
    let oracle = tryo!(MixtureOracle::new(data.points_f64(), data.labels().map(|l| l.to_vec()), s.clone()));

    let net_fn = |xt: &Tensor<f64>, t: usize| net.eps(xt, &vec![t; xt.batch()]);
    let opt_fn = |xt: &Tensor<f64>, t: usize| oracle.optimal_eps(xt, t);
    let g_net = tryo!(oracle.exact_gap(&net_fn, MID_T, DRAWS, &mut rng(32)));
    let g_opt = tryo!(oracle.exact_gap(&opt_fn, MID_T, DRAWS, &mut rng(32)));
    let rel = (g_net.gap - g_opt.gap).abs() / g_opt.gap;
    let floor_gap = (g_opt.gap - g_opt.bayes).abs() / g_opt.bayes;

    // Conditioning never raises the Bayes residual, checked per noisy draw.
    let mut r = rng(33);
    let mut bins = 0;
    let mut violations = 0;
    for t in (50..=s.steps()).step_by(50) {
        bins += 1;
        let mut bad = false;
        for _ in 0..100 {
            let i = r.random_range(0..oracle.len());
            let x0 = oracle.points().narrow(i, 1);
            let eps = Tensor::<f64>::randn(x0.shape(), &mut r);
            let xt = tryo!(q_sample(&s, &x0, t, &eps));
            let by_label = tryo!(oracle.bayes_residual_given(xt.data(), t, true));
            let none = tryo!(oracle.bayes_residual_given(xt.data(), t, false));
            bad |= by_label > none * (1.0 + 1e-12) + 1e-300;
        }
        violations += bad as usize;
    }

    Outcome::new(
        rel <= 0.1 && floor_gap <= 1e-9 && violations == 0,
        format!(
            "gap at t={MID_T}: network {:.4e}, optimum {:.4e} (rel diff {:.3}), Bayes floor {:.4e}; monotone at {}/{} bins",
            g_net.gap,
            g_opt.gap,
            rel,
            g_opt.bayes,
            bins - violations,
            bins
        ),
    )
}
