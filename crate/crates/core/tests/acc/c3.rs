//! Label-conditioned vs unconditional noise predictors trained with the same
//! seed and budget, scored on one fixed set of held-out draws.

use pdae_core::eval::eval_eps_loss;
use pdae_core::model::EpsModel;
use pdae_core::oracle::MixtureOracle;
use pdae_core::Tensor;

use super::fixtures::{eps_model, toy_data, toy_pretrain_cfg, toy_pretrained, toy_unet, TOY_CLASSES};
use super::{schedule, Outcome};
use crate::tryo;

const DRAWS: usize = 4000;
const SEED: u64 = 77;

pub fn run() -> Outcome {
    let s = schedule();
    let data = toy_data();
    let labels = data.labels().unwrap().to_vec();
    let x = data.points_f64();

    let uncond = tryo!(toy_pretrained());
    let cond = tryo!(eps_model("toy-eps-labels", &data, &toy_unet(TOY_CLASSES), &toy_pretrain_cfg(), None));

    let loss_u = tryo!(eval_eps_loss(&x, &s, DRAWS, 200, SEED, &mut |xt, t, _| uncond.eps(xt, t)));
    let loss_c = tryo!(eval_eps_loss(&x, &s, DRAWS, 200, SEED, &mut |xt, t, idx| {
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        cond.eps_labeled(xt, t, &y)
    }));

    let oracle = tryo!(MixtureOracle::new(x.clone(), Some(labels.clone()), s.clone()));
    let per_class: Vec<MixtureOracle> = tryo!((0..TOY_CLASSES).map(|y| oracle.restricted(y)).collect::<pdae_core::Result<_>>());
    let bayes_u = tryo!(eval_eps_loss(&x, &s, DRAWS, 200, SEED, &mut |xt, t, _| oracle.eps(xt, t)));
    let bayes_c = tryo!(eval_eps_loss(&x, &s, DRAWS, 200, SEED, &mut |xt, t, idx| {
        let parts: Vec<Tensor<f64>> = idx
            .iter()
            .enumerate()
            .map(|(b, &i)| per_class[labels[i]].optimal_eps(&xt.narrow(b, 1), t[b]))
            .collect::<pdae_core::Result<_>>()?;
        Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>())?)
    }));

    let pass = loss_c < loss_u && loss_u >= bayes_u && loss_c >= bayes_c;
    Outcome::new(
        pass,
        format!("eval loss labels {loss_c:.5} < none {loss_u:.5}; Bayes floors {bayes_c:.5} / {bayes_u:.5} ({DRAWS} draws)"),
    )
}
