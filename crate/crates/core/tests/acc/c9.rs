//! Backpropagated gradients of both training losses against central finite
//! differences of an independently computed loss, in f64.

use std::collections::BTreeMap;

use pdae_core::autograd::Graph;
use pdae_core::diffusion::{pdae_loss, q_sample, simple_loss};
use pdae_core::model::{Conditioner, ConditionerSpec, EpsBundle, PdaeBundle};
use pdae_core::networks::{EncoderSpec, EpsNet, Fwd, UNetSpec};
use pdae_core::training::{init_pdae, pdae_loss_grads, simple_loss_grads};
use pdae_core::{NoiseSchedule, ParamStore, Tensor, WeightScheme};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{rng, schedule, Outcome};
use crate::tryo;

const H: f64 = 1e-5;
const PER_TENSOR: usize = 3;

fn spec(classes: usize) -> UNetSpec {
    UNetSpec {
        in_channels: 1,
        image_size: 4,
        base_channels: 4,
        channel_mults: vec![1, 2],
        attention_resolutions: vec![2],
        time_embed_dim: 8,
        groups: 2,
        num_classes: classes,
        dropout: 0.0,
    }
}

fn jitter(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
}

/// Worst relative error over a few sampled entries of each named tensor.
fn check(
    names: &[String],
    store: &ParamStore<f64>,
    grads: &BTreeMap<String, Tensor<f64>>,
    loss: &dyn Fn(&ParamStore<f64>) -> f64,
    r: &mut ChaCha8Rng,
) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for name in names {
        let n = store.expect(name).numel();
        for _ in 0..PER_TENSOR.min(n) {
            let j = r.random_range(0..n);
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += H;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= H;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * H);
            let an = grads.get(name).map_or(0.0, |g| g.data()[j]);
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

fn pdae_forward_loss(b: &PdaeBundle, s: &NoiseSchedule, store: &ParamStore<f64>, x0: &Tensor<f64>, xt: &Tensor<f64>, t: &[usize], eps: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let mut f = Fwd::new(&mut g, store);
    let c = match &b.cond {
        Conditioner::Encoder(e) => {
            let x = f.g.input(x0.clone());
            e.forward(&mut f, x)
        }
        Conditioner::Labels { .. } => unreachable!(),
    };
    let x = f.g.input(xt.clone());
    let feats = b.eps.features(&mut f, x, t, None);
    let eh = b.eps.head(&mut f, &feats);
    let gv = b.grad.forward(&mut f, &feats, c);
    pdae_loss(s, WeightScheme::default(), eps, g.value(eh), g.value(gv), t).unwrap()
}

pub fn run() -> Outcome {
    let s = schedule();
    let mut r = rng(9);
    let batch = 3;

    // Unweighted loss on a label-conditioned network.
    let sp = spec(3);
    let mut store = ParamStore::<f64>::new();
    let net = tryo!(EpsNet::new(&sp, &mut store, &mut r));
    jitter(&mut store, &mut r);
    let x0 = Tensor::<f64>::uniform(&[batch, 1, 4, 4], -1.0, 1.0, &mut r);
    let t: Vec<usize> = (0..batch).map(|_| r.random_range(1..=s.steps())).collect();
    let eps = Tensor::<f64>::randn(x0.shape(), &mut r);
    let xt = tryo!(q_sample(&s, &x0, &t[..], &eps));
    let labels = [0usize, 2, 1];
    let (l_simple, g_simple) = tryo!(simple_loss_grads(&net, &store, xt.clone(), &t, &eps, Some(&labels), None));
    let simple_fn = |p: &ParamStore<f64>| simple_loss(&eps, &net.predict(p, &xt, &t, Some(&labels))).unwrap();
    let loss_gap_simple = (l_simple - simple_fn(&store)).abs();
    let names: Vec<String> = store.names().cloned().collect();
    let (e_simple, n_simple) = check(&names, &store, &g_simple, &simple_fn, &mut r);

    // Weighted gap-filling loss, gradients for the trainable part only.
    let mut store32 = ParamStore::<f32>::new();
    let base = tryo!(EpsNet::new(&spec(0), &mut store32, &mut r));
    let eb = tryo!(EpsBundle::new(&base.spec, store32));
    let enc = EncoderSpec { base_channels: 4, channel_mults: vec![1, 2], attention_resolutions: vec![], groups: 2, z_dim: 3 };
    let bundle = tryo!(init_pdae(&eb, &ConditionerSpec::Encoder(enc), 5));
    let mut store = bundle.params.cast::<f64>();
    jitter(&mut store, &mut r);
    let weights: Vec<f64> = (1..=s.steps()).map(|t| WeightScheme::default().weight(&s, t).unwrap()).collect();
    let (l_pdae, g_pdae) = tryo!(pdae_loss_grads(&bundle, &s, &store, x0.clone(), None, xt.clone(), &t, &eps, &weights));
    let pdae_fn = |p: &ParamStore<f64>| pdae_forward_loss(&bundle, &s, p, &x0, &xt, &t, &eps);
    let loss_gap_pdae = (l_pdae - pdae_fn(&store)).abs();
    let trainable = store.trainable_names();
    let (e_pdae, n_pdae) = check(&trainable, &store, &g_pdae, &pdae_fn, &mut r);

    let worst = e_simple.max(e_pdae);
    let loss_ok = loss_gap_simple <= 1e-12 * l_simple.abs().max(1.0) && loss_gap_pdae <= 1e-12 * l_pdae.abs().max(1.0);
    Outcome::new(
        worst <= 1e-3 && loss_ok && n_pdae > 0,
        format!(
            "max rel err {e_simple:.2e} over {n_simple} entries (unweighted), {e_pdae:.2e} over {n_pdae} entries (weighted); loss mismatch {loss_gap_simple:.1e}/{loss_gap_pdae:.1e}"
        ),
    )
}
