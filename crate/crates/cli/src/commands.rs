//! One function per subcommand.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use pdae_core::checkpoint::Checkpoint;
use pdae_core::data::Dataset;
use pdae_core::eval::{
    grid_search_critical_stage, match_rate, mean_pairwise_distance, measure_gap_curve_on, mse, nearest_labels, one_step_grid,
    one_step_mse, pick_indices, recon_metrics,
};
use pdae_core::grid::save_grid;
use pdae_core::model::{Conditioned, LatentBundle, PdaeBundle, Unguided};
use pdae_core::networks::UNetSpec;
use pdae_core::sampling::{
    autoencode, decode, fewshot_conditional, improved_unconditional, infer_xT, interpolate, manipulate, sample, truncation_sample,
    CodeStats, FewShotConfig, Guide, InterpMode, SamplerPlan,
};
use pdae_core::training::{code_stats, pretrain_ddpm, train_latent_dpm, train_linear_classifier, train_pdae, TrainConfig, TrainLog};
use pdae_core::{Error, NoiseSchedule, Result, Tensor};

use crate::run::Run;
use crate::{Cmd, Interp};

const ENCODE_CHUNK: usize = 256;
const GAP_ONE_STEP_T: usize = 500;

fn bad(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

pub fn dispatch(cmd: &Cmd, run: &mut Run) -> Result<()> {
    match cmd {
        Cmd::Pretrain => pretrain(run),
        Cmd::PdaeTrain { pretrained } => pdae_train(run, pretrained),
        Cmd::LatentTrain { model } => latent_train(run, model),
        Cmd::Encode { model } => encode(run, model),
        Cmd::Reconstruct { model } => reconstruct(run, model),
        Cmd::Invert { model } => invert(run, model),
        Cmd::Interpolate { model, a, b, points, mode } => interp(run, model, *a, *b, *points, *mode),
        Cmd::Manipulate { model, from, to, scales, random_xt } => manip(run, model, *from, *to, scales, *random_xt),
        Cmd::SampleUncond { model, latent, baseline } => sample_uncond(run, model, latent, *baseline),
        Cmd::SampleFewshot { model, latent, class, positives } => sample_fewshot(run, model, latent, *class, *positives),
        Cmd::SampleTruncation { model, label, scales } => sample_truncation(run, model, *label, scales),
        Cmd::MeasureGap { model } => measure_gap(run, model),
        Cmd::GridSearch { model, exhaustive } => grid_search(run, model, *exhaustive),
        Cmd::DumpSchedule => dump_schedule(run),
    }
}

fn load_data(run: &mut Run) -> Result<Dataset> {
    let data = run.cfg.data_source()?.load()?;
    run.note("data.items", data.len());
    run.note("data.shape", format!("{:?}", data.image_shape()));
    Ok(data)
}

fn check_shape(spec: &UNetSpec, data: &Dataset) -> Result<()> {
    let want = spec.item_shape();
    if data.image_shape() != want.as_slice() {
        return Err(bad(format!("dataset images are {:?} but the model expects {:?}", data.image_shape(), want)));
    }
    Ok(())
}

fn load_pdae(run: &mut Run, path: &Path) -> Result<(PdaeBundle, NoiseSchedule)> {
    let ck = Checkpoint::load(path)?;
    run.note("input.model", path.display());
    Ok((ck.to_pdae()?, ck.schedule()?.build()?))
}

fn load_latent(run: &mut Run, path: &Path) -> Result<(LatentBundle, NoiseSchedule)> {
    let ck = Checkpoint::load(path)?;
    run.note("input.latent", path.display());
    Ok((ck.to_latent()?, ck.schedule()?.build()?))
}

fn train_cfg(run: &Run, c: TrainConfig) -> TrainConfig {
    TrainConfig { verbose: run.verbose, ..c }
}

fn plan(run: &mut Run) -> Result<SamplerPlan> {
    let p = run.cfg.plan()?;
    run.note("plan", format!("{p:?}"));
    Ok(p)
}

fn count(run: &Run) -> Result<usize> {
    run.cfg.get("sample.count")
}

fn save_model(run: &mut Run, mut ck: Checkpoint, log: &TrainLog) -> Result<()> {
    if let Some(last) = log.rows.last() {
        ck.set_counters(last.step, last.images);
        run.note("train.final_loss", format!("{:.6e}", last.loss));
    }
    ck.echo_config(run.cfg.iter());
    log.write_csv(BufWriter::new(File::create(run.path("train_log.csv"))?))?;
    let path = run.path("model.ckpt");
    ck.save(&path)?;
    run.note("output.model", path.display());
    Ok(())
}

fn grid(run: &mut Run, name: &str, images: &Tensor<f64>, cols: usize) -> Result<()> {
    save_grid(images, cols, &run.path(name))?;
    run.note(&format!("output.{}", name.trim_end_matches(".png")), name);
    Ok(())
}

fn scales(text: &str) -> Result<Vec<f64>> {
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad(format!("bad scale `{s}`")))).collect()
}

/// Codes of every image, encoded in chunks.
fn encode_all(b: &PdaeBundle, data: &Dataset) -> Result<Tensor<f64>> {
    let mut parts = Vec::new();
    for start in (0..data.len()).step_by(ENCODE_CHUNK) {
        let idx: Vec<usize> = (start..(start + ENCODE_CHUNK).min(data.len())).collect();
        parts.push(b.encode(&data.batch(&idx).cast())?);
    }
    Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>())?)
}

/// `n` images picked with the run seed.
fn pick(run: &Run, data: &Dataset, n: usize) -> Result<Tensor<f64>> {
    Ok(data.batch(&pick_indices(data.len(), n.min(data.len()), run.cfg.seed()?)).cast())
}

/// Interleaves equal-size batches item by item: row `i` holds item `i` of
/// each batch.
fn rows(batches: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let n = batches[0].batch();
    let mut parts = Vec::with_capacity(n * batches.len());
    for i in 0..n {
        for b in batches {
            parts.push(b.narrow(i, 1));
        }
    }
    Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>())?)
}

fn pretrain(run: &mut Run) -> Result<()> {
    let data = load_data(run)?;
    let shape = data.image_shape().to_vec();
    if shape[1] != shape[2] {
        return Err(bad(format!("square images required, got {shape:?}")));
    }
    let spec = run.cfg.unet(shape[0], shape[1])?;
    let sspec = run.cfg.schedule()?;
    let cfg = train_cfg(run, run.cfg.train()?);
    let t = pretrain_ddpm(&data, &spec, &sspec.build()?, &cfg, None)?;
    save_model(run, Checkpoint::from_eps(&t.model, Some(&t.raw), &sspec), &t.log)
}

fn pdae_train(run: &mut Run, pretrained: &Path) -> Result<()> {
    let ck = Checkpoint::load(pretrained)?;
    run.note("input.pretrained", pretrained.display());
    let base = ck.to_eps()?;
    let data = load_data(run)?;
    check_shape(base.spec(), &data)?;
    let sspec = ck.schedule()?;
    let cond = run.cfg.conditioner()?;
    let cfg = train_cfg(run, run.cfg.train()?);
    let t = train_pdae(&data, &base, &cond, &sspec.build()?, run.cfg.weight()?, &cfg, None)?;
    save_model(run, Checkpoint::from_pdae(&t.model, Some(&t.raw), &sspec), &t.log)
}

fn latent_train(run: &mut Run, model: &Path) -> Result<()> {
    let (b, _) = load_pdae(run, model)?;
    let data = load_data(run)?;
    check_shape(b.spec(), &data)?;
    let z = encode_all(&b, &data)?;
    let spec = run.cfg.latent(z.dim(1))?;
    let sspec = run.cfg.latent_schedule()?;
    let cfg = train_cfg(run, run.cfg.latent_train()?);
    let t = train_latent_dpm(&z, &spec, &sspec.build()?, &cfg, None)?;
    save_model(run, Checkpoint::from_latent(&t.model, Some(&t.raw), &sspec), &t.log)
}

fn encode(run: &mut Run, model: &Path) -> Result<()> {
    let (b, _) = load_pdae(run, model)?;
    let data = load_data(run)?;
    check_shape(b.spec(), &data)?;
    let z = encode_all(&b, &data)?;
    let mut w = BufWriter::new(File::create(run.path("codes.csv"))?);
    let d = z.dim(1);
    let head: Vec<String> = (0..d).map(|j| format!("z{j}")).collect();
    writeln!(w, "index,label,{}", head.join(","))?;
    for i in 0..z.batch() {
        let label = data.labels().map_or(String::new(), |l| l[i].to_string());
        let vals: Vec<String> = z.item(i).iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(w, "{i},{label},{}", vals.join(","))?;
    }
    w.flush()?;
    run.note("output.codes", "codes.csv");
    Ok(())
}

fn reconstruct(run: &mut Run, model: &Path) -> Result<()> {
    let (b, s) = load_pdae(run, model)?;
    let data = load_data(run)?;
    check_shape(b.spec(), &data)?;
    let p = plan(run)?;
    let n = count(run)?;
    let x0 = pick(run, &data, n)?;
    let inferred = autoencode(&b, &s, &p, &x0, true)?;
    let random = autoencode(&b, &s, &p, &x0, false)?;
    for (name, r) in [("inferred", &inferred), ("random", &random)] {
        let (m, ss) = recon_metrics(&x0, r)?;
        run.note(&format!("metric.{name}.mse"), format!("{m:.6e}"));
        run.note(&format!("metric.{name}.ssim"), format!("{ss:.6}"));
    }
    grid(run, "reconstruct.png", &rows(&[x0, inferred, random])?, 3)
}

fn invert(run: &mut Run, model: &Path) -> Result<()> {
    let (b, s) = load_pdae(run, model)?;
    let data = load_data(run)?;
    check_shape(b.spec(), &data)?;
    let p = plan(run)?;
    let x0 = pick(run, &data, count(run)?)?;
    let xt = infer_xT(&b, &s, &p, &x0)?;
    let z = b.encode(&x0)?;
    let back = decode(&b, &s, &p, &z, Some(&x0))?;
    run.note("metric.round_trip_mse", format!("{:.6e}", mse(&x0, &back)?));
    let mut w = BufWriter::new(File::create(run.path("x_T.csv"))?);
    for i in 0..xt.batch() {
        let vals: Vec<String> = xt.item(i).iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(w, "{}", vals.join(","))?;
    }
    w.flush()?;
    run.note("output.x_T", "x_T.csv");
    // x_T is roughly unit Gaussian; shown at a third of its scale.
    grid(run, "invert.png", &rows(&[x0, xt.scale(1.0 / 3.0), back])?, 3)
}

fn interp(run: &mut Run, model: &Path, a: usize, b_idx: usize, points: usize, mode: Interp) -> Result<()> {
    let (b, s) = load_pdae(run, model)?;
    let data = load_data(run)?;
    check_shape(b.spec(), &data)?;
    if a >= data.len() || b_idx >= data.len() || points < 2 {
        return Err(bad(format!("need two indices below {} and at least two points", data.len())));
    }
    let p = plan(run)?;
    let xa: Tensor<f64> = data.batch(&[a]).cast();
    let xb: Tensor<f64> = data.batch(&[b_idx]).cast();
    let mode = match mode {
        Interp::Latent => InterpMode::LatentLerp,
        Interp::Direction => InterpMode::DirectionLerp,
    };
    let mut out = Vec::with_capacity(points);
    for k in 0..points {
        let lambda = k as f64 / (points - 1) as f64;
        out.push(interpolate(&b, &s, &p, &xa, &xb, lambda, mode)?);
    }
    run.note("interpolate.pair", format!("{a},{b_idx}"));
    let all = Tensor::concat(&out.iter().collect::<Vec<_>>())?;
    grid(run, "interpolate.png", &all, points)
}

fn manip(run: &mut Run, model: &Path, from: usize, to: usize, scale_text: &str, random_xt: bool) -> Result<()> {
    let (b, s) = load_pdae(run, model)?;
    let data = load_data(run)?;
    check_shape(b.spec(), &data)?;
    let labels = data.labels().ok_or_else(|| bad("manipulation needs a labelled dataset"))?.to_vec();
    let z = encode_all(&b, &data)?;
    let (mean, std) = code_stats(&z)?;
    let stats = CodeStats { mean, std };
    let clf = train_linear_classifier(&stats.normalize(&z), &labels, &run.cfg.classifier()?)?;
    run.note("metric.classifier_accuracy", format!("{:.4}", clf.accuracy(&stats.normalize(&z), &labels)));
    let dir = clf.direction(from, to)?;
    let idx: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == from).take(count(run)?).collect();
    if idx.is_empty() {
        return Err(bad(format!("no images of class {from}")));
    }
    let x0: Tensor<f64> = data.batch(&idx).cast();
    let p = plan(run)?;
    let sc = scales(scale_text)?;
    let mut cols = Vec::with_capacity(sc.len());
    for &k in &sc {
        let x = manipulate(&b, &s, &p, &x0, &stats, &dir, k, !random_xt)?;
        let flipped = clf.predict(&stats.normalize(&b.encode(&x)?)).iter().filter(|&&c| c == to).count();
        run.note(&format!("metric.scale_{k}.to_class_rate"), format!("{:.4}", flipped as f64 / idx.len() as f64));
        cols.push(x);
    }
    grid(run, "manipulate.png", &rows(&cols)?, sc.len())
}

fn sample_uncond(run: &mut Run, model: &Path, latent: &Path, baseline: bool) -> Result<()> {
    let (b, s) = load_pdae(run, model)?;
    let (l, ls) = load_latent(run, latent)?;
    let p = plan(run)?;
    let lp = run.cfg.latent_plan()?;
    let n = count(run)?;
    let x = improved_unconditional(&b, &l, &s, &ls, &p, &lp, n)?;
    run.note("metric.diversity", format!("{:.6}", mean_pairwise_distance(&x)));
    grid(run, "samples.png", &x, 8)?;
    if baseline {
        let u = sample(&Unguided(&b), &s, &p, Guide::Plan, &b.spec().item_shape(), n)?;
        run.note("metric.baseline_diversity", format!("{:.6}", mean_pairwise_distance(&u)));
        grid(run, "baseline.png", &u, 8)?;
    }
    Ok(())
}

fn sample_fewshot(run: &mut Run, model: &Path, latent: &Path, class: usize, positives: Option<usize>) -> Result<()> {
    let (b, s) = load_pdae(run, model)?;
    let (l, ls) = load_latent(run, latent)?;
    let data = load_data(run)?;
    check_shape(b.spec(), &data)?;
    let labels = data.labels().ok_or_else(|| bad("few-shot sampling needs a labelled dataset"))?.to_vec();
    let zn = l.normalize(&encode_all(&b, &data)?);
    let mut ccfg = run.cfg.classifier()?;
    let (targets, target_class) = match positives {
        // A handful of positives against everything else as negatives.
        Some(k) => {
            let mut seen = 0;
            let t: Vec<usize> = labels
                .iter()
                .map(|&y| {
                    let pos = y == class && seen < k;
                    seen += pos as usize;
                    pos as usize
                })
                .collect();
            if seen == 0 {
                return Err(bad(format!("no images of class {class}")));
            }
            ccfg.balanced = true;
            (t, 1)
        }
        None => (labels.clone(), class),
    };
    let clf = train_linear_classifier(&zn, &targets, &ccfg)?;
    let fs = FewShotConfig {
        class: target_class,
        count: count(run)?,
        proposal_batch: run.cfg.get("fewshot.batch")?,
        floor: run.cfg.get("fewshot.floor")?,
    };
    let p = plan(run)?;
    let lp = run.cfg.latent_plan()?;
    let (x, stats) = fewshot_conditional(&b, &l, &clf, &s, &ls, &p, &lp, &fs)?;
    run.note("fewshot.proposals", stats.proposals);
    run.note("fewshot.accepted", stats.accepted);
    run.note("fewshot.rate", format!("{:.6}", stats.rate()));
    let hits = nearest_labels(&x, &data.points_f64(), &labels)?.iter().filter(|&&y| y == class).count();
    run.note("metric.nearest_class_rate", format!("{:.4}", hits as f64 / x.batch() as f64));
    grid(run, "samples.png", &x, 8)
}

fn sample_truncation(run: &mut Run, model: &Path, label: usize, scale_text: &str) -> Result<()> {
    let (b, s) = load_pdae(run, model)?;
    let p = plan(run)?;
    let n = count(run)?;
    let data = load_data(run)?;
    check_shape(b.spec(), &data)?;
    let reference = data.labels().map(|l| (data.points_f64(), l.to_vec()));
    let sc = scales(scale_text)?;
    let mut out = Vec::with_capacity(sc.len());
    for &k in &sc {
        let x = truncation_sample(&b, &s, &p, label, k, n)?;
        run.note(&format!("metric.scale_{k}.diversity"), format!("{:.6}", mean_pairwise_distance(&x)));
        if let Some((pts, l)) = &reference {
            let acc = match_rate(&nearest_labels(&x, pts, l)?, &vec![label; n]);
            run.note(&format!("metric.scale_{k}.accuracy"), format!("{acc:.4}"));
        }
        out.push(x);
    }
    let all = Tensor::concat(&out.iter().collect::<Vec<_>>())?;
    grid(run, "truncation.png", &all, n)
}

fn measure_gap(run: &mut Run, model: &Path) -> Result<()> {
    let (b, s) = load_pdae(run, model)?;
    let data = load_data(run)?;
    check_shape(b.spec(), &data)?;
    let seed = run.cfg.seed()?;
    let n: usize = run.cfg.get("eval.samples")?;
    let curve = measure_gap_curve_on(&b, &s, &data, n, run.cfg.get("eval.stride")?, seed)?;
    curve.write_csv(BufWriter::new(File::create(run.path("gap.csv"))?))?;
    run.note("output.gap", "gap.csv");
    run.note("metric.filled_fraction", format!("{:.4}", curve.filled_fraction()));
    let x0 = pick(run, &data, n)?;
    if GAP_ONE_STEP_T <= s.steps() {
        let (pre, shifted) = one_step_mse(&b, &s, &x0, GAP_ONE_STEP_T, seed)?;
        run.note(&format!("metric.one_step_mse_t{GAP_ONE_STEP_T}.pretrained"), format!("{pre:.6e}"));
        run.note(&format!("metric.one_step_mse_t{GAP_ONE_STEP_T}.shifted"), format!("{shifted:.6e}"));
    }
    let ts: Vec<usize> = (1..=9).map(|k| k * s.steps() / 10).filter(|&t| t >= 1).collect();
    let tiles = one_step_grid(&b, &s, &x0.narrow(0, x0.batch().min(4)), &ts, seed)?;
    grid(run, "one_step.png", &tiles, ts.len())
}

fn grid_search(run: &mut Run, model: &Path, exhaustive: bool) -> Result<()> {
    let (b, s) = load_pdae(run, model)?;
    let data = load_data(run)?;
    check_shape(b.spec(), &data)?;
    let labels = data.labels().ok_or_else(|| bad("grid search needs a labelled dataset"))?.to_vec();
    let classes = data.num_classes();
    let n = count(run)?;
    let target: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let den = Conditioned { bundle: &b, cond: b.label_condition(&target)? };
    let points = data.points_f64();
    let p = plan(run)?;
    let shape = b.spec().item_shape();
    let mut acc = |sp| -> Result<f64> {
        let x = sample(&den, &s, &p, Guide::Stage(sp), &shape, n)?;
        Ok(match_rate(&nearest_labels(&x, &points, &labels)?, &target))
    };
    let stride = run.cfg.get("eval.grid_stride")?;
    let threshold = run.cfg.get("eval.threshold")?;
    let res = grid_search_critical_stage(&mut acc, &s, stride, threshold, exhaustive)?;
    res.write_csv(BufWriter::new(File::create(run.path("grid.csv"))?))?;
    run.note("output.grid", "grid.csv");
    match res.best {
        Some(sp) => {
            run.note("critical_stage", format!("({}, {}]", sp.t1, sp.t2));
            run.note("metric.accuracy", format!("{:.4}", res.accuracy_of(sp).unwrap_or(0.0)));
            Ok(())
        }
        None => Err(Error::NotFound(threshold)),
    }
}

fn dump_schedule(run: &mut Run) -> Result<()> {
    let s = run.cfg.schedule()?.build()?;
    let gamma: f64 = run.cfg.get("train.gamma")?;
    s.write_csv(BufWriter::new(File::create(run.path("schedule.csv"))?), gamma)?;
    run.note("output.schedule", "schedule.csv");
    Ok(())
}
