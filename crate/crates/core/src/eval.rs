//! Measurements: posterior mean gap curves, one-step reconstructions,
//! reconstruction metrics, the critical-stage grid search, held-out noise
//! prediction losses and an empirical 2-Wasserstein distance.

use std::io::Write;

use pdae_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::diffusion::{one_step_x0, predicted_mean, q_sample, true_posterior_mean};
use crate::error::{invalid, Error, Result};
use crate::model::{same_t, EpsModel, PdaeBundle, Unguided};
use crate::sampling::StageSplit;
use crate::schedule::NoiseSchedule;

/// A noise prediction for `x_t` plus an optional mean-shift gradient that
/// may depend on the clean image (through its semantic code).
pub trait GapModel {
    fn eps_and_shift(&self, x0: &Tensor<f64>, xt: &Tensor<f64>, t: usize) -> Result<(Tensor<f64>, Option<Tensor<f64>>)>;
}

impl GapModel for PdaeBundle {
    fn eps_and_shift(&self, x0: &Tensor<f64>, xt: &Tensor<f64>, t: usize) -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
        let z = self.encode(x0)?;
        let (e, mut g) = self.eps_and_grads(xt, &same_t(t, xt.batch()), &[&z])?;
        Ok((e, g.pop()))
    }
}

impl<M: EpsModel + ?Sized> GapModel for Unguided<'_, M> {
    fn eps_and_shift(&self, _: &Tensor<f64>, xt: &Tensor<f64>, t: usize) -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
        Ok((self.0.eps(xt, &same_t(t, xt.batch()))?, None))
    }
}

/// Noise for sample `i` at step `t`, independent of batching.
fn draw_noise(seed: u64, i: usize, t: usize, item_shape: &[usize]) -> Vec<f64> {
    let key = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (t as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let n: usize = item_shape.iter().product();
    Tensor::<f64>::randn(&[n], &mut rng).into_data()
}

/// `count` image indices from a seeded shuffle, cycling if `count > len`.
pub fn pick_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..count).map(|i| order[i % len]).collect()
}

/// Default bin stride `max(1, T / 100)`.
pub fn default_stride(s: &NoiseSchedule) -> usize {
    (s.steps() / 100).max(1)
}

/// Bins `stride, 2 stride, ..., <= T`.
pub fn gap_bins(s: &NoiseSchedule, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return invalid("bin stride must be positive");
    }
    Ok((1..=s.steps() / stride).map(|k| k * stride).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapCurve {
    pub t: Vec<usize>,
    pub gap_pretrained: Vec<f64>,
    pub gap_shifted: Vec<f64>,
    pub sample_count: usize,
}

impl GapCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,gap_pre,gap_shift")?;
        for i in 0..self.t.len() {
            writeln!(w, "{},{:.10e},{:.10e}", self.t[i], self.gap_pretrained[i], self.gap_shifted[i])?;
        }
        Ok(())
    }

    /// Fraction of bins where the shifted gap does not exceed the
    /// pretrained one.
    pub fn filled_fraction(&self) -> f64 {
        let n = self.t.len().max(1) as f64;
        self.gap_shifted.iter().zip(&self.gap_pretrained).filter(|(s, p)| s <= p).count() as f64 / n
    }
}

/// Per-image mean of `|mu_tilde - mu_theta|^2` and
/// `|mu_tilde - mu_theta - sigma_t^2 G|^2` at each step in `t_bins`.
/// Results do not depend on `batch`.
pub fn measure_gap_curve(
    model: &dyn GapModel,
    s: &NoiseSchedule,
    images: &Tensor<f64>,
    t_bins: &[usize],
    batch: usize,
    seed: u64,
) -> Result<GapCurve> {
    let n = images.batch();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if batch == 0 {
        return invalid("batch must be positive");
    }
    let item_shape = images.shape()[1..].to_vec();
    let mut pre = Vec::with_capacity(t_bins.len());
    let mut shifted = Vec::with_capacity(t_bins.len());
    for &t in t_bins {
        s.check(t)?;
        let var = s.posterior_var(t);
        let (mut sum_pre, mut sum_shift) = (0.0, 0.0);
        for start in (0..n).step_by(batch) {
            let len = batch.min(n - start);
            let x0 = images.narrow(start, len);
            let mut eps = Vec::with_capacity(x0.numel());
            for i in start..start + len {
                eps.extend(draw_noise(seed, i, t, &item_shape));
            }
            let eps = Tensor::from_vec(x0.shape(), eps)?;
            let xt = q_sample(s, &x0, t, &eps)?;
            let mu = true_posterior_mean(s, &x0, &xt, t)?;
            let (e, g) = model.eps_and_shift(&x0, &xt, t)?;
            let gap = mu.sub(&predicted_mean(s, &xt, t, &e)?);
            let gap_s = match &g {
                Some(g) => gap.axpy(-var, g),
                None => gap.clone(),
            };
            for i in 0..len {
                sum_pre += gap.item(i).iter().map(|v| v * v).sum::<f64>();
                sum_shift += gap_s.item(i).iter().map(|v| v * v).sum::<f64>();
            }
        }
        pre.push(sum_pre / n as f64);
        shifted.push(sum_shift / n as f64);
    }
    Ok(GapCurve { t: t_bins.to_vec(), gap_pretrained: pre, gap_shifted: shifted, sample_count: n })
}

/// Convenience: `sample_count` images from `data`, bins at `stride`.
pub fn measure_gap_curve_on(
    model: &dyn GapModel,
    s: &NoiseSchedule,
    data: &Dataset,
    sample_count: usize,
    stride: usize,
    seed: u64,
) -> Result<GapCurve> {
    if data.is_empty() || sample_count == 0 {
        return Err(Error::EmptyData);
    }
    let idx = pick_indices(data.len(), sample_count, seed);
    let images: Tensor<f64> = data.batch(&idx).cast();
    measure_gap_curve(model, s, &images, &gap_bins(s, stride)?, 64, seed)
}

/// One-step `x0` estimates from the same `x_t`: the pretrained prediction
/// and the shifted one, whose noise estimate is `eps_hat - k_t sigma_t^2 G`.
pub fn one_step_pair(model: &dyn GapModel, s: &NoiseSchedule, x0: &Tensor<f64>, t: usize, seed: u64) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let item_shape = x0.shape()[1..].to_vec();
    let mut eps = Vec::with_capacity(x0.numel());
    for i in 0..x0.batch() {
        eps.extend(draw_noise(seed, i, t, &item_shape));
    }
    let eps = Tensor::from_vec(x0.shape(), eps)?;
    let xt = q_sample(s, x0, t, &eps)?;
    let (e, g) = model.eps_and_shift(x0, &xt, t)?;
    let pre = one_step_x0(s, &xt, t, &e)?;
    let shifted = match g {
        Some(g) => one_step_x0(s, &xt, t, &e.axpy(-s.shift_factor(t) * s.posterior_var(t), &g))?,
        None => pre.clone(),
    };
    Ok((pre, shifted))
}

/// Mean per-image MSE of both one-step estimates against `x0`.
pub fn one_step_mse(model: &dyn GapModel, s: &NoiseSchedule, x0: &Tensor<f64>, t: usize, seed: u64) -> Result<(f64, f64)> {
    let (pre, shifted) = one_step_pair(model, s, x0, t, seed)?;
    Ok((mse(&pre, x0)?, mse(&shifted, x0)?))
}

/// One-step estimates for every `t` in `ts`: for each image a pretrained row
/// and a shifted row, `ts.len()` columns each. Returned as a flat batch in
/// row-major tile order, ready for `save_grid` with `ts.len()` columns.
pub fn one_step_grid(model: &dyn GapModel, s: &NoiseSchedule, x0: &Tensor<f64>, ts: &[usize], seed: u64) -> Result<Tensor<f64>> {
    if ts.is_empty() || x0.batch() == 0 {
        return Err(Error::EmptyData);
    }
    let mut cols = Vec::with_capacity(ts.len());
    for &t in ts {
        cols.push(one_step_pair(model, s, x0, t, seed)?);
    }
    let mut tiles = Vec::with_capacity(2 * x0.batch() * ts.len());
    for i in 0..x0.batch() {
        for pick in 0..2 {
            for (pre, shifted) in &cols {
                tiles.push(if pick == 0 { pre.narrow(i, 1) } else { shifted.narrow(i, 1) });
            }
        }
    }
    Ok(Tensor::concat(&tiles.iter().collect::<Vec<_>>())?)
}

/// Mean over images of the per-element mean squared error.
pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    a.same_shape(b)?;
    let per = a.item_len().max(1) as f64;
    let n = a.batch().max(1) as f64;
    Ok((0..a.batch()).map(|i| a.item(i).iter().zip(b.item(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / per).sum::<f64>() / n)
}

const SSIM_RADIUS: isize = 3;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Single-scale SSIM of two `H x W` planes in `[0, 1]`. The 7x7 Gaussian
/// window is cut at the borders and renormalized.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k: Vec<f64> = (-SSIM_RADIUS..=SSIM_RADIUS).map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let mut total = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut ws, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -SSIM_RADIUS..=SSIM_RADIUS {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -SSIM_RADIUS..=SSIM_RADIUS {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let wt = k[(dy + SSIM_RADIUS) as usize] * k[(dx + SSIM_RADIUS) as usize];
                    let p = yy as usize * w + xx as usize;
                    let (u, v) = (a[p], b[p]);
                    ws += wt;
                    ma += wt * u;
                    mb += wt * v;
                    saa += wt * u * u;
                    sbb += wt * v * v;
                    sab += wt * u * v;
                }
            }
            let (ma, mb) = (ma / ws, mb / ws);
            let va = saa / ws - ma * ma;
            let vb = sbb / ws - mb * mb;
            let cab = sab / ws - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    total / (h * w) as f64
}

/// Mean per-image MSE and mean SSIM (over images and channels) of two
/// `[N, C, H, W]` batches in `[-1, 1]`; SSIM reads them rescaled to `[0, 1]`.
pub fn recon_metrics(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(f64, f64)> {
    a.same_shape(b)?;
    if a.rank() != 4 {
        return invalid(format!("expected [N, C, H, W] images, got {:?}", a.shape()));
    }
    let (n, c, h, w) = a.dims4();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let unit = |v: &[f64]| v.iter().map(|x| (x + 1.0) / 2.0).collect::<Vec<_>>();
    let mut ssim = 0.0;
    for i in 0..n {
        for ch in 0..c {
            let r = ch * h * w..(ch + 1) * h * w;
            ssim += ssim_plane(&unit(&a.item(i)[r.clone()]), &unit(&b.item(i)[r]), h, w);
        }
    }
    Ok((mse(a, b)?, ssim / (n * c) as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSearch {
    /// Every evaluated stage with its accuracy, in evaluation order.
    pub table: Vec<(StageSplit, f64)>,
    pub best: Option<StageSplit>,
}

impl GridSearch {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t1,t2,accuracy")?;
        for (sp, acc) in &self.table {
            writeln!(w, "{},{},{:.6}", sp.t1, sp.t2, acc)?;
        }
        Ok(())
    }

    pub fn accuracy_of(&self, split: StageSplit) -> Option<f64> {
        self.table.iter().find(|(s, _)| *s == split).map(|(_, a)| *a)
    }
}

/// All grid stages `(t1, t2]` with `t1 <= t2` on `{0, stride, ..., T}`,
/// ordered by length and then by `t1`.
pub fn stage_grid(s: &NoiseSchedule, stride: usize) -> Result<Vec<StageSplit>> {
    if stride == 0 || s.steps() % stride != 0 {
        return invalid(format!("stride {stride} must divide T = {}", s.steps()));
    }
    let k = s.steps() / stride;
    let mut out = Vec::with_capacity((k + 1) * (k + 2) / 2);
    for len in 0..=k {
        for a in 0..=k - len {
            out.push(StageSplit::new(a * stride, (a + len) * stride, s)?);
        }
    }
    Ok(out)
}

/// The shortest grid stage whose guided-stage accuracy reaches `threshold`,
/// ties going to the smaller `t1`. Lengths are scanned upwards; with
/// `exhaustive` every stage is evaluated, otherwise the scan stops after the
/// first length with a hit.
pub fn grid_search_critical_stage(
    accuracy: &mut dyn FnMut(StageSplit) -> Result<f64>,
    s: &NoiseSchedule,
    stride: usize,
    threshold: f64,
    exhaustive: bool,
) -> Result<GridSearch> {
    let mut out = GridSearch { table: Vec::new(), best: None };
    let mut hit_len = None;
    for sp in stage_grid(s, stride)? {
        if let Some(l) = hit_len {
            if sp.len() > l && !exhaustive {
                break;
            }
        }
        let acc = accuracy(sp)?;
        out.table.push((sp, acc));
        if out.best.is_none() && acc >= threshold {
            out.best = Some(sp);
            hit_len = Some(sp.len());
        }
    }
    Ok(out)
}

/// Held-out noise prediction loss with draws fixed by `seed`: image, step
/// and noise per draw, then the mean over all elements of `(eps - eps_hat)^2`.
/// `eps_fn` receives the noisy batch, its steps and the image indices.
pub fn eval_eps_loss(
    images: &Tensor<f64>,
    s: &NoiseSchedule,
    draws: usize,
    batch: usize,
    seed: u64,
    eps_fn: &mut dyn FnMut(&Tensor<f64>, &[usize], &[usize]) -> Result<Tensor<f64>>,
) -> Result<f64> {
    let n = images.batch();
    if n == 0 || draws == 0 {
        return Err(Error::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..draws).map(|_| rng.random_range(0..n)).collect();
    let ts: Vec<usize> = (0..draws).map(|_| rng.random_range(1..=s.steps())).collect();
    let mut total = 0.0;
    for start in (0..draws).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(draws);
        let x0 = images.select(&idx[start..end]);
        let eps = Tensor::randn(x0.shape(), &mut rng);
        let xt = q_sample(s, &x0, &ts[start..end], &eps)?;
        let e = eps_fn(&xt, &ts[start..end], &idx[start..end])?;
        e.same_shape(&eps)?;
        total += eps.sub(&e).sq_norm();
    }
    Ok(total / (draws * images.item_len()) as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss")?;
        for (s, l) in &self.points {
            writeln!(w, "{s},{l:.10e}")?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

/// Exact 2-Wasserstein distance between two equal-size point clouds with
/// uniform weights (optimal assignment on squared distances).
pub fn empirical_w2(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.batch() != b.batch() || a.item_len() != b.item_len() || a.batch() == 0 {
        return invalid("W2 needs two non-empty clouds of equal size and dimension");
    }
    let n = a.batch();
    let cost: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a.item(i).iter().zip(b.item(j)).map(|(x, y)| (x - y).powi(2)).sum()).collect()).collect();
    let assign = hungarian(&cost);
    Ok((assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>() / n as f64).sqrt())
}

/// Minimum-cost perfect matching for a square cost matrix; `out[row] = col`.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let (mut delta, mut j1) = (inf, 0);
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// Mean pairwise Euclidean distance, a diversity measure.
pub fn mean_pairwise_distance(x: &Tensor<f64>) -> f64 {
    let n = x.batch();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += x.item(i).iter().zip(x.item(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Label of the nearest point of `reference` for each item of `x`.
pub fn nearest_labels(x: &Tensor<f64>, reference: &Tensor<f64>, labels: &[usize]) -> Result<Vec<usize>> {
    if x.item_len() != reference.item_len() || reference.batch() != labels.len() || labels.is_empty() {
        return invalid("reference set does not match the samples or labels");
    }
    Ok((0..x.batch())
        .map(|i| {
            let d = |j: usize| x.item(i).iter().zip(reference.item(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..reference.batch()).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap_or(0);
            labels[best]
        })
        .collect())
}

/// Fraction of positions where `pred == target`.
pub fn match_rate(pred: &[usize], target: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}
