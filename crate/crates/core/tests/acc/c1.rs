//! Scaled residual norm equals the squared distance between the shifted
//! predicted mean and the forward posterior mean.

use pdae_core::diffusion::{pdae_residual, predicted_mean, true_posterior_mean};
use pdae_core::Tensor;
use rand::Rng;

use super::{rng, schedule, Outcome};
use crate::tryo;

pub fn run() -> Outcome {
    let s = schedule();
    let mut r = rng(1);
    let d = 16;
    let mut worst: f64 = 0.0;
    let mut worst_formula: f64 = 0.0;
    for _ in 0..1000 {
        let t = r.random_range(1..=s.steps());
        let x0 = Tensor::<f64>::randn(&[1, d], &mut r);
        let eps = Tensor::<f64>::randn(&[1, d], &mut r);
        let eps_hat = Tensor::<f64>::randn(&[1, d], &mut r);
        let g = Tensor::<f64>::randn(&[1, d], &mut r).scale(r.random_range(0.1..10.0));

        // Schedule quantities from first principles.
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
        let alpha = 1.0 - beta;
        let abar: f64 = (1..=t).map(|u| 1.0 - (1e-4 + (0.02 - 1e-4) * (u - 1) as f64 / 999.0)).product();
        let abar_prev = abar / alpha;
        let var = (1.0 - abar_prev) / (1.0 - abar) * beta;
        let k = alpha.sqrt() * (1.0 - abar).sqrt() / beta;

        let xt: Vec<f64> = (0..d).map(|j| abar.sqrt() * x0.data()[j] + (1.0 - abar).sqrt() * eps.data()[j]).collect();
        let xt = Tensor::from_vec(&[1, d], xt).unwrap();

        let res = tryo!(pdae_residual(&s, &eps, &eps_hat, &g, t));
        let lhs = beta * beta / (alpha * (1.0 - abar)) * res.sq_norm();

        let mu = tryo!(true_posterior_mean(&s, &x0, &xt, t));
        let mu_theta = tryo!(predicted_mean(&s, &xt, t, &eps_hat));
        let rhs = g.scale(var).sub(&mu.sub(&mu_theta)).sq_norm();
        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1e-300));

        let hand: f64 = (0..d)
            .map(|j| (eps.data()[j] - eps_hat.data()[j] + k * var * g.data()[j]).powi(2))
            .sum::<f64>();
        worst_formula = worst_formula.max((res.sq_norm() - hand).abs() / hand.max(1e-300));
    }
    let pass = worst <= 1e-8 && worst_formula <= 1e-8;
    Outcome::new(pass, format!("max rel err {worst:.2e} (identity), {worst_formula:.2e} (residual formula) over 1000 tuples"))
}
