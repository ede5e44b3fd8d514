//! Critical-stage grid search with the exact denoiser and exact class
//! gradient of a mixture of isotropic Gaussian classes, probed by the
//! nearest class mean.

use pdae_core::eval::{grid_search_critical_stage, match_rate};
use pdae_core::model::Denoiser;
use pdae_core::sampling::{sample, Guide, SamplerPlan, StageSplit};
use pdae_core::{NoiseSchedule, Result, Tensor};

use super::{cache_dir, rng, schedule, Outcome};
use crate::tryo;

const CLASSES: usize = 10;
const DIM: usize = 64;
// Classes overlap per coordinate but separate well over all coordinates.
const MEAN_STD: f64 = 1.0;
const WITHIN_VAR: f64 = 4.0;
const COUNT: usize = 128;
const STRIDE: usize = 50;
const THRESHOLD: f64 = 0.9;
const REFERENCE: (usize, usize) = (400, 700);

struct GaussClasses {
    means: Vec<Vec<f64>>,
    var: f64,
    s: NoiseSchedule,
    target: Vec<usize>,
}

impl GaussClasses {
    /// Class responsibilities of `x` at step `t`, and the shared variance.
    fn resp(&self, x: &[f64], t: usize) -> (Vec<f64>, f64) {
        let ab = self.s.alpha_bar(t);
        let var = ab * self.var + 1.0 - ab;
        let lw: Vec<f64> = self
            .means
            .iter()
            .map(|m| -x.iter().zip(m).map(|(a, b)| (a - ab.sqrt() * b).powi(2)).sum::<f64>() / (2.0 * var))
            .collect();
        let mx = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lw.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        (w.into_iter().map(|v| v / z).collect(), var)
    }

    fn nearest(&self, x: &[f64]) -> usize {
        let d = |k: usize| x.iter().zip(&self.means[k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..CLASSES).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap()
    }
}

impl Denoiser for GaussClasses {
    fn predict(&self, xt: &Tensor<f64>, t: usize, guided: bool) -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
        let ab = self.s.alpha_bar(t);
        let mut eps = Tensor::zeros(xt.shape());
        let mut grad = Tensor::zeros(xt.shape());
        for b in 0..xt.batch() {
            let x = xt.item(b);
            let (w, var) = self.resp(x, t);
            let mbar: Vec<f64> = (0..DIM).map(|j| w.iter().zip(&self.means).map(|(wk, m)| wk * m[j]).sum()).collect();
            // eps = -sqrt(1 - abar) * score, score = -(x - sqrt(abar) mbar) / var.
            for j in 0..DIM {
                eps.item_mut(b)[j] = (1.0 - ab).sqrt() * (x[j] - ab.sqrt() * mbar[j]) / var;
                grad.item_mut(b)[j] = ab.sqrt() * (self.means[self.target[b]][j] - mbar[j]) / var;
            }
        }
        Ok((eps, guided.then_some(grad)))
    }
}

pub fn run() -> Outcome {
    let s = schedule();
    let mut r = rng(50);
    let means: Vec<Vec<f64>> = (0..CLASSES).map(|_| Tensor::<f64>::randn(&[DIM], &mut r).scale(MEAN_STD).into_data()).collect();
    let target: Vec<usize> = (0..COUNT).map(|i| i % CLASSES).collect();
    let den = GaussClasses { means, var: WITHIN_VAR, s: s.clone(), target: target.clone() };
    let plan = SamplerPlan { guidance_scale: 1.0, ..SamplerPlan::ddpm(55) };

    let accuracy = |guide: Guide| -> Result<f64> {
        let x = sample(&den, &s, &plan, guide, &[DIM], COUNT)?;
        let pred: Vec<usize> = (0..COUNT).map(|i| den.nearest(x.item(i))).collect();
        Ok(match_rate(&pred, &target))
    };
    let search = tryo!(grid_search_critical_stage(&mut |sp| accuracy(Guide::Stage(sp)), &s, STRIDE, THRESHOLD, false));
    if let Ok(f) = std::fs::File::create(cache_dir().join("critical-stage.csv")) {
        let _ = search.write_csv(f);
    }
    let Some(best) = search.best else {
        return Outcome::fail(format!("no stage reached {THRESHOLD} in {} candidates", search.table.len()));
    };
    let acc = search.accuracy_of(best).unwrap();
    let comp = tryo!(accuracy(Guide::Complement(best)));
    let none = tryo!(accuracy(Guide::Stage(tryo!(StageSplit::new(0, 0, &s)))));
    let cells = |a: usize, b: usize| a.abs_diff(b) / STRIDE;
    Outcome::new(
        acc >= THRESHOLD && comp < 0.5,
        format!(
            "stage ({}, {}] accuracy {acc:.3}, complement {comp:.3}, unguided {none:.3}; {} candidates; endpoints {}/{} grid cells from ({}, {}]",
            best.t1,
            best.t2,
            search.table.len(),
            cells(best.t1, REFERENCE.0),
            cells(best.t2, REFERENCE.1),
            REFERENCE.0,
            REFERENCE.1
        ),
    )
}
