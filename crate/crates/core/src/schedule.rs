//! Timestep-indexed constants of the forward process and loss weights.

use std::io::Write;

use crate::error::{invalid, Error, Result};

/// Per-timestep diffusion constants, precomputed in double precision.
///
/// Arrays are indexed by the timestep itself. `alpha_bar[0] = 1`; index 0 of
/// the per-step arrays is unused.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefficients {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub var: f64,
}

impl NoiseSchedule {
    /// `beta` linearly spaced over `steps` entries, both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return invalid("schedule needs at least one step");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return invalid(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn constant(steps: usize, beta: f64) -> Result<Self> {
        Self::linear(steps, beta, beta)
    }

    /// `betas[i]` is `beta_{i+1}`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return invalid("schedule needs at least one step");
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return invalid(format!("beta {b} outside (0, 1)"));
        }
        let n = betas.len();
        let mut beta = Vec::with_capacity(n + 1);
        beta.push(0.0);
        beta.extend(betas);
        let alpha: Vec<f64> = beta.iter().enumerate().map(|(i, b)| if i == 0 { 1.0 } else { 1.0 - b }).collect();
        let mut alpha_bar = vec![1.0; n + 1];
        for t in 1..=n {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut posterior_var = vec![0.0; n + 1];
        for t in 1..=n {
            posterior_var[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
        }
        Ok(Self { beta, alpha, alpha_bar, posterior_var })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Timestep { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    /// Panics unless `1 <= t <= T`; likewise for the other per-step accessors.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1, "beta_0 is undefined");
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1, "alpha_0 is undefined");
        self.alpha[t]
    }

    /// Defined for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        assert!(t >= 1, "posterior variance at t = 0 is undefined");
        self.posterior_var[t]
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        let ab = self.alpha_bar[t];
        Ok(ab / (1.0 - ab))
    }

    pub fn posterior_coefficients(&self, t: usize) -> Result<PosteriorCoefficients> {
        self.check(t)?;
        let (ab, ab_prev, b) = (self.alpha_bar[t], self.alpha_bar[t - 1], self.beta[t]);
        Ok(PosteriorCoefficients {
            coef_x0: ab_prev.sqrt() * b / (1.0 - ab),
            coef_xt: self.alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            var: self.posterior_var[t],
        })
    }

    /// `sqrt(alpha_t) sqrt(1 - alpha_bar_t) / beta_t`, the factor in front of
    /// the mean shift inside the gap-filling residual.
    pub fn shift_factor(&self, t: usize) -> f64 {
        self.alpha(t).sqrt() * (1.0 - self.alpha_bar[t]).sqrt() / self.beta(t)
    }

    /// CSV with one row per timestep. The last column rescales the PDAE
    /// weight so its maximum over `t` is 1.
    pub fn write_csv<W: Write>(&self, mut w: W, gamma: f64) -> Result<()> {
        let pdae = WeightScheme::Pdae { gamma };
        let weights: Vec<f64> = (1..=self.steps()).map(|t| pdae.weight(self, t)).collect::<Result<_>>()?;
        let max = weights.iter().copied().fold(0.0, f64::max);
        writeln!(w, "t,beta,alpha_bar,snr,weight_simple,weight_pdae,weight_pdae_max_normalized")?;
        for t in 1..=self.steps() {
            let lw = weights[t - 1];
            writeln!(
                w,
                "{t},{:e},{:e},{:e},1,{:e},{:e}",
                self.beta[t],
                self.alpha_bar[t],
                self.snr(t)?,
                lw,
                lw / max
            )?;
        }
        Ok(())
    }
}

/// How a schedule is built; what checkpoints and configs record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleSpec {
    Linear { steps: usize, beta_start: f64, beta_end: f64 },
    Constant { steps: usize, beta: f64 },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Linear { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleSpec {
    /// Constant `beta = 0.008` over 1000 steps, used for semantic codes.
    pub fn latent_default() -> Self {
        ScheduleSpec::Constant { steps: 1000, beta: 0.008 }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleSpec::Linear { steps, beta_start, beta_end } => NoiseSchedule::linear(steps, beta_start, beta_end),
            ScheduleSpec::Constant { steps, beta } => NoiseSchedule::constant(steps, beta),
        }
    }
}

/// Per-timestep loss weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightScheme {
    Simple,
    Pdae { gamma: f64 },
}

impl Default for WeightScheme {
    fn default() -> Self {
        WeightScheme::Pdae { gamma: 0.1 }
    }
}

impl WeightScheme {
    pub fn weight(&self, s: &NoiseSchedule, t: usize) -> Result<f64> {
        s.check(t)?;
        match *self {
            WeightScheme::Simple => Ok(1.0),
            // 1/(1+snr) = 1 - alpha_bar and snr/(1+snr) = alpha_bar.
            WeightScheme::Pdae { gamma } => {
                let ab = s.alpha_bar(t);
                Ok((1.0 - ab).powf(1.0 - gamma) * ab.powf(gamma))
            }
        }
    }

    /// The weight as a function of the signal-to-noise ratio alone.
    pub fn weight_at_snr(&self, snr: f64) -> f64 {
        match *self {
            WeightScheme::Simple => 1.0,
            WeightScheme::Pdae { gamma } => {
                (1.0 / (1.0 + snr)).powf(1.0 - gamma) * (snr / (1.0 + snr)).powf(gamma)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightScheme::Pdae { gamma } if !(gamma > 0.0 && gamma < 1.0) => {
                invalid(format!("gamma {gamma} outside (0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn four_step_example() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let mut prod = 1.0;
        for (t, b) in [0.1, 0.2, 0.3, 0.4].into_iter().enumerate() {
            prod *= 1.0 - b;
            assert!(close(s.beta(t + 1), b, 1e-15));
            assert!(close(s.alpha_bar(t + 1), prod, 1e-15));
        }
        assert!(close(s.alpha_bar(4), 0.3024, 1e-12));
        assert!(close(s.snr(2).unwrap(), 0.72 / 0.28, 1e-12));
    }

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.3, 0.5).unwrap();
        assert_eq!(s.steps(), 1);
        assert_eq!(s.beta(1), 0.3);
        assert!(close(s.alpha_bar(1), 0.7, 1e-15));
    }

    #[test]
    fn default_endpoint_alpha_bar() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!(close(s.alpha_bar(1000), direct, 1e-12));
        assert!((s.alpha_bar(1000) - 4.04e-5).abs() < 0.01e-5);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        let s = NoiseSchedule::linear(10, 0.1, 0.2).unwrap();
        assert!(s.snr(0).is_err());
        assert!(s.snr(11).is_err());
        assert!(s.posterior_coefficients(0).is_err());
    }

    #[test]
    fn posterior_at_t1_is_exact() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let c = s.posterior_coefficients(1).unwrap();
        assert!(close(c.coef_x0, 1.0, 1e-12));
        assert_eq!(c.coef_xt, 0.0);
        assert_eq!(c.var, 0.0);
    }

    #[test]
    fn posterior_coefficients_from_formulas() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let c = s.posterior_coefficients(3).unwrap();
        let (ab3, ab2) = (0.9 * 0.8 * 0.7, 0.9 * 0.8);
        assert!(close(c.coef_x0, f64::sqrt(ab2) * 0.3 / (1.0 - ab3), 1e-14));
        assert!(close(c.coef_xt, f64::sqrt(0.7) * (1.0 - ab2) / (1.0 - ab3), 1e-14));
        assert!(close(c.var, (1.0 - ab2) / (1.0 - ab3) * 0.3, 1e-14));
    }

    #[test]
    fn tiny_beta_step_is_identity() {
        let s = NoiseSchedule::from_betas(vec![0.1, 1e-12]).unwrap();
        let c = s.posterior_coefficients(2).unwrap();
        assert!(c.coef_x0 < 1e-10);
        assert!(close(c.coef_xt, 1.0, 1e-10));
    }

    #[test]
    fn pdae_weight_values() {
        let w = WeightScheme::Pdae { gamma: 0.1 };
        assert!(close(w.weight_at_snr(1.0), 0.5, 1e-15));
        assert_eq!(WeightScheme::Simple.weight_at_snr(3.0), 1.0);
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf, 0.1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 51);
    }
}
