//! Exact ground truth for a finite dataset. Under the forward process the
//! noisy marginal at step `t` is the uniform mixture
//! `(1/N) sum_i N(sqrt(abar_t) x_i, (1 - abar_t) I)`, so posteriors, scores,
//! class gradients and the posterior mean gap are all closed-form.

use pdae_autograd::Tensor;
use rand::Rng;

use crate::diffusion::{predicted_mean, q_sample, true_posterior_mean};
use crate::error::{invalid, Error, Result};
use crate::schedule::NoiseSchedule;

pub const MAX_POINTS: usize = 1024;

#[derive(Clone, Debug)]
pub struct MixtureOracle {
    points: Tensor<f64>,
    labels: Option<Vec<usize>>,
    schedule: NoiseSchedule,
}

impl MixtureOracle {
    /// `points` is `[N, ...]`; labels, if given, have one entry per point.
    pub fn new(points: Tensor<f64>, labels: Option<Vec<usize>>, schedule: NoiseSchedule) -> Result<Self> {
        let n = points.batch();
        if n == 0 {
            return invalid("oracle needs at least one point");
        }
        if n > MAX_POINTS {
            return Err(Error::OracleTooLarge { n, max: MAX_POINTS });
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return invalid(format!("{} labels for {n} points", l.len()));
            }
        }
        Ok(Self { points, labels, schedule })
    }

    pub fn points(&self) -> &Tensor<f64> {
        &self.points
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn len(&self) -> usize {
        self.points.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1)).unwrap_or(0)
    }

    /// Oracle over the points carrying label `y` only.
    pub fn restricted(&self, y: usize) -> Result<Self> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::Invalid("oracle has no labels".into()))?;
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
        if idx.is_empty() {
            return invalid(format!("class {y} has no points"));
        }
        Self::new(self.points.select(&idx), Some(vec![y; idx.len()]), self.schedule.clone())
    }

    fn log_weights(&self, xt: &[f64], t: usize) -> Vec<f64> {
        let ab = self.schedule.alpha_bar(t);
        let (sa, var) = (ab.sqrt(), 1.0 - ab);
        (0..self.len())
            .map(|i| {
                let d2: f64 = xt.iter().zip(self.points.item(i)).map(|(x, p)| (x - sa * p).powi(2)).sum();
                -d2 / (2.0 * var)
            })
            .collect()
    }

    /// Posterior weights over points for a single noisy item, normalized via
    /// log-sum-exp.
    pub fn responsibilities(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.schedule.check(t)?;
        if xt.len() != self.points.item_len() {
            return invalid(format!("item of length {} for points of length {}", xt.len(), self.points.item_len()));
        }
        Ok(softmax(&self.log_weights(xt, t)))
    }

    fn weighted_mean(&self, w: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.points.item_len()];
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            for (a, &p) in m.iter_mut().zip(self.points.item(i)) {
                *a += wi * p;
            }
        }
        m
    }

    fn per_item(&self, xt: &Tensor<f64>, f: impl Fn(&[f64], usize) -> Result<Vec<f64>>) -> Result<Tensor<f64>> {
        let mut out = Vec::with_capacity(xt.numel());
        for b in 0..xt.batch() {
            out.extend(f(xt.item(b), b)?);
        }
        Ok(Tensor::from_vec(xt.shape(), out)?)
    }

    /// `E[x0 | x_t]` item by item.
    pub fn posterior_x0(&self, xt: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
        self.per_item(xt, |x, _| Ok(self.weighted_mean(&self.responsibilities(x, t)?)))
    }

    /// Minimizer of the noise-prediction loss:
    /// `(x_t - sqrt(abar_t) E[x0|x_t]) / sqrt(1 - abar_t)`.
    pub fn optimal_eps(&self, xt: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
        let ab = self.schedule.alpha_bar(t);
        let m = self.posterior_x0(xt, t)?;
        Ok(xt.axpy(-ab.sqrt(), &m).scale(1.0 / (1.0 - ab).sqrt()))
    }

    /// `E[mu_tilde | x_t] = coef_xt x_t + coef_x0 E[x0 | x_t]`.
    pub fn exact_posterior_mean(&self, xt: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
        let m = self.posterior_x0(xt, t)?;
        true_posterior_mean(&self.schedule, &m, xt, t)
    }

    /// `grad_{x_t} log p(y | x_t)` with `p(y | x_t)` the summed posterior
    /// weight of the points labelled `y`; one label per batch item.
    pub fn class_gradient(&self, xt: &Tensor<f64>, t: usize, y: &[usize]) -> Result<Tensor<f64>> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::Invalid("oracle has no labels".into()))?;
        if y.len() != xt.batch() {
            return invalid(format!("{} labels for a batch of {}", y.len(), xt.batch()));
        }
        for &c in y {
            if !labels.contains(&c) {
                return invalid(format!("class {c} has no points"));
            }
        }
        let ab = self.schedule.alpha_bar(t);
        let k = ab.sqrt() / (1.0 - ab);
        self.per_item(xt, |x, b| {
            let w = self.responsibilities(x, t)?;
            let mass: f64 = w.iter().zip(labels).filter(|(_, &l)| l == y[b]).map(|(w, _)| w).sum();
            let all = self.weighted_mean(&w);
            // Restricted weights; when the class mass underflows, fall back to
            // the stabilized log-weights of the class alone.
            let wy: Vec<f64> = if mass > 1e-300 {
                w.iter().zip(labels).map(|(&wi, &l)| if l == y[b] { wi / mass } else { 0.0 }).collect()
            } else {
                let lw: Vec<f64> = self
                    .log_weights(x, t)
                    .into_iter()
                    .zip(labels)
                    .map(|(v, &l)| if l == y[b] { v } else { f64::NEG_INFINITY })
                    .collect();
                softmax(&lw)
            };
            let cond = self.weighted_mean(&wy);
            Ok(cond.iter().zip(&all).map(|(c, a)| k * (c - a)).collect())
        })
    }

    /// `E[|mu_tilde - E[mu_tilde | x_t, c]|^2 | x_t]` for one noisy item,
    /// where `c` is nothing or, with `by_label`, the label of `x0`. Averages
    /// over the posterior on points instead of sampling `x0`.
    pub fn bayes_residual_given(&self, xt: &[f64], t: usize, by_label: bool) -> Result<f64> {
        let w = self.responsibilities(xt, t)?;
        let c = self.schedule.posterior_coefficients(t)?.coef_x0;
        let groups: Vec<usize> = match (&self.labels, by_label) {
            (Some(l), true) => l.clone(),
            (None, true) => return invalid("oracle has no labels"),
            (_, false) => vec![0; self.len()],
        };
        let k = groups.iter().max().map_or(0, |m| m + 1);
        let mut means = Vec::with_capacity(k);
        for g in 0..k {
            let mass: f64 = w.iter().zip(&groups).filter(|(_, &l)| l == g).map(|(w, _)| w).sum();
            let wg: Vec<f64> = w.iter().zip(&groups).map(|(&wi, &l)| if l == g && mass > 0.0 { wi / mass } else { 0.0 }).collect();
            means.push(self.weighted_mean(&wg));
        }
        let mut total = 0.0;
        for (i, (&wi, &g)) in w.iter().zip(&groups).enumerate() {
            if wi == 0.0 {
                continue;
            }
            total += wi * self.points.item(i).iter().zip(&means[g]).map(|(p, m)| (p - m).powi(2)).sum::<f64>();
        }
        Ok(c * c * total)
    }

    /// `log q(x_t)` up to the Gaussian normalizing constant, via log-sum-exp.
    pub fn log_density(&self, xt: &[f64], t: usize) -> f64 {
        let lw = self.log_weights(xt, t);
        let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + lw.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - (self.len() as f64).ln()
    }

    /// Monte-Carlo gap at step `t` over `draws` forward samples: the mean over
    /// draws of the per-image squared norms `|mu_tilde - mu_theta|^2` for the
    /// supplied noise predictor, and of the Bayes residual
    /// `|mu_tilde - E[mu_tilde | x_t]|^2`.
    pub fn exact_gap<R: Rng + ?Sized>(
        &self,
        eps_model: &dyn Fn(&Tensor<f64>, usize) -> Result<Tensor<f64>>,
        t: usize,
        draws: usize,
        rng: &mut R,
    ) -> Result<GapEstimate> {
        if draws == 0 {
            return invalid("gap needs at least one draw");
        }
        let s = &self.schedule;
        let idx: Vec<usize> = (0..draws).map(|_| rng.random_range(0..self.len())).collect();
        let x0 = self.points.select(&idx);
        let eps = Tensor::randn(x0.shape(), rng);
        let xt = q_sample(s, &x0, t, &eps)?;
        let mu = true_posterior_mean(s, &x0, &xt, t)?;
        let mu_theta = predicted_mean(s, &xt, t, &eps_model(&xt, t)?)?;
        let mu_bayes = self.exact_posterior_mean(&xt, t)?;
        Ok(GapEstimate { gap: per_image_sq(&mu, &mu_theta), bayes: per_image_sq(&mu, &mu_bayes), draws })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapEstimate {
    pub gap: f64,
    pub bayes: f64,
    pub draws: usize,
}

/// Mean over items of the squared L2 distance.
pub fn per_image_sq(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.sub(b).sq_norm() / a.batch().max(1) as f64
}

fn softmax(lw: &[f64]) -> Vec<f64> {
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = lw.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn pts(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::from_vec(&[rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn single_and_symmetric_responsibilities() {
        let o = MixtureOracle::new(pts(&[&[0.3, -0.2]]), None, sched()).unwrap();
        assert_eq!(o.responsibilities(&[5.0, 1.0], 40).unwrap(), vec![1.0]);
        let o = MixtureOracle::new(pts(&[&[1.0, 2.0], &[-1.0, -2.0]]), None, sched()).unwrap();
        let w = o.responsibilities(&[0.0, 0.0], 300).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn responsibilities_match_direct_densities() {
        let o = MixtureOracle::new(pts(&[&[0.1, 0.5], &[-0.4, 0.2], &[0.9, -0.7]]), None, sched()).unwrap();
        let x = [0.2, -0.1];
        let t = 600;
        let ab = sched().alpha_bar(t);
        let dens: Vec<f64> = (0..3)
            .map(|i| {
                let p = o.points().item(i);
                let d2 = (x[0] - ab.sqrt() * p[0]).powi(2) + (x[1] - ab.sqrt() * p[1]).powi(2);
                (-d2 / (2.0 * (1.0 - ab))).exp()
            })
            .collect();
        let z: f64 = dens.iter().sum();
        let w = o.responsibilities(&x, t).unwrap();
        for i in 0..3 {
            assert!((w[i] - dens[i] / z).abs() < 1e-14);
        }
    }

    #[test]
    fn stable_for_huge_inputs() {
        let o = MixtureOracle::new(pts(&[&[1.0, 0.0], &[0.0, 1.0]]), Some(vec![0, 1]), sched()).unwrap();
        let w = o.responsibilities(&[1e6, -1e6], 5).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        let xt = Tensor::from_vec(&[1, 2], vec![1e6, -1e6]).unwrap();
        assert!(o.class_gradient(&xt, 5, &[1]).unwrap().all_finite());
    }

    #[test]
    fn optimal_eps_single_point() {
        let s = sched();
        let p = pts(&[&[0.3, -0.8, 0.5]]);
        let o = MixtureOracle::new(p.clone(), None, s.clone()).unwrap();
        let xt = Tensor::from_vec(&[1, 3], vec![1.0, 0.2, -0.4]).unwrap();
        let t = 250;
        let ab = s.alpha_bar(t);
        let want = xt.axpy(-ab.sqrt(), &p).scale(1.0 / (1.0 - ab).sqrt());
        assert!(o.optimal_eps(&xt, t).unwrap().sub(&want).max_abs() < 1e-14);
        let m = o.exact_posterior_mean(&xt, t).unwrap();
        assert!(m.sub(&true_posterior_mean(&s, &p, &xt, t).unwrap()).max_abs() < 1e-14);
    }

    #[test]
    fn optimal_eps_is_scaled_score() {
        let o = MixtureOracle::new(pts(&[&[0.5, 0.1], &[-0.3, 0.7], &[0.2, -0.9]]), None, sched()).unwrap();
        let t = 150;
        let x = [0.3, -0.2];
        let h = 1e-5;
        let e = o.optimal_eps(&Tensor::from_vec(&[1, 2], x.to_vec()).unwrap(), t).unwrap();
        let k = (1.0 - sched().alpha_bar(t)).sqrt();
        for d in 0..2 {
            let (mut a, mut b) = (x, x);
            a[d] += h;
            b[d] -= h;
            let score = (o.log_density(&a, t) - o.log_density(&b, t)) / (2.0 * h);
            assert!((e.data()[d] + k * score).abs() < 1e-4);
        }
    }

    #[test]
    fn class_gradient_properties() {
        let s = sched();
        let o = MixtureOracle::new(pts(&[&[1.0, 0.5], &[-1.0, -0.5]]), Some(vec![0, 1]), s.clone()).unwrap();
        let t = 400;
        let zero = Tensor::zeros(&[1, 2]);
        let g0 = o.class_gradient(&zero, t, &[0]).unwrap();
        assert!(g0.data()[0] > 0.0 && g0.data()[1] > 0.0);
        let g1 = o.class_gradient(&zero, t, &[1]).unwrap();
        assert!(g0.add(&g1).max_abs() < 1e-14);

        // Finite differences of log p(y | x).
        let x = [0.3, -0.1];
        let logp = |x: &[f64]| o.responsibilities(x, t).unwrap()[0].ln();
        let g = o.class_gradient(&Tensor::from_vec(&[1, 2], x.to_vec()).unwrap(), t, &[0]).unwrap();
        for d in 0..2 {
            let (mut a, mut b) = (x, x);
            a[d] += 1e-6;
            b[d] -= 1e-6;
            let fd = (logp(&a) - logp(&b)) / 2e-6;
            assert!((fd - g.data()[d]).abs() < 1e-6);
        }

        let same = MixtureOracle::new(pts(&[&[1.0, 0.5], &[-1.0, -0.5]]), Some(vec![2, 2]), s).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![0.4, 0.9]).unwrap();
        assert_eq!(same.class_gradient(&x, t, &[2]).unwrap().max_abs(), 0.0);
        assert!(same.class_gradient(&x, t, &[0]).is_err());
    }

    #[test]
    fn bayes_gap_zero_for_single_point_positive_otherwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = MixtureOracle::new(pts(&[&[0.4, -0.4]]), None, sched()).unwrap();
        let opt = |x: &Tensor<f64>, t: usize| o.optimal_eps(x, t);
        let g = o.exact_gap(&opt, 500, 64, &mut rng).unwrap();
        assert!(g.gap < 1e-20 && g.bayes < 1e-20);

        let o2 = MixtureOracle::new(pts(&[&[0.4, -0.4], &[-0.5, 0.1]]), None, sched()).unwrap();
        let opt2 = |x: &Tensor<f64>, t: usize| o2.optimal_eps(x, t);
        let g = o2.exact_gap(&opt2, 500, 256, &mut rng).unwrap();
        assert!(g.bayes > 0.0);
        assert!((g.gap - g.bayes).abs() < 1e-9 * g.bayes);
    }

    #[test]
    fn refuses_oversized_datasets() {
        let big = Tensor::zeros(&[MAX_POINTS + 1, 2]);
        assert!(matches!(MixtureOracle::new(big, None, sched()), Err(Error::OracleTooLarge { .. })));
    }

    #[test]
    fn posterior_mean_is_monte_carlo_limit() {
        let s = sched();
        let o = MixtureOracle::new(pts(&[&[0.5, 0.2], &[-0.6, 0.3], &[0.1, -0.8]]), None, s.clone()).unwrap();
        let t = 700;
        let xt = Tensor::from_vec(&[1, 2], vec![0.2, 0.1]).unwrap();
        let w = o.responsibilities(xt.data(), t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mut acc = Tensor::zeros(&[1, 2]);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut c = 0.0;
            let i = (0..3).find(|&i| {
                c += w[i];
                u < c
            });
            let x0 = o.points().narrow(i.unwrap_or(2), 1);
            acc.add_assign(&true_posterior_mean(&s, &x0, &xt, t).unwrap());
        }
        let mc = acc.scale(1.0 / n as f64);
        assert!(mc.sub(&o.exact_posterior_mean(&xt, t).unwrap()).max_abs() < 0.02);
    }
}
