//! Every op's adjoint against central finite differences in f64.

use pdae_autograd::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn objective(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Compares d<w, f(inputs)>/d inputs from the tape against central
/// differences on every input entry.
fn check<B>(inputs: Vec<Tensor<f64>>, build: B)
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = build(&mut g, &vars);
    let weights = Tensor::randn(g.shape(out), &mut rng);
    let grads = g.backward(&[(out, weights.clone())]);

    let h = 1e-6;
    for (k, base) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(base.shape()));
        for i in 0..base.numel() {
            let eval = |delta: f64| {
                let mut perturbed = inputs.clone();
                perturbed[k].data_mut()[i] += delta;
                let mut g2 = Graph::new();
                let vs: Vec<Var> = perturbed.into_iter().map(|t| g2.input(t)).collect();
                let o = build(&mut g2, &vs);
                objective(g2.value(o), &weights)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            let tol = 1e-6 * (1.0 + fd.abs().max(an.abs()));
            assert!((fd - an).abs() <= tol, "input {k} entry {i}: finite difference {fd} vs analytic {an}");
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn conv2d_same_padding() {
    check(vec![rand(&[2, 3, 5, 4], 1), rand(&[4, 3, 3, 3], 2), rand(&[4], 3)], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    });
}

#[test]
fn conv2d_strided() {
    check(vec![rand(&[2, 2, 7, 6], 4), rand(&[3, 2, 3, 3], 5)], |g, v| g.conv2d(v[0], v[1], None, 2, 1));
}

#[test]
fn conv2d_pointwise() {
    check(vec![rand(&[2, 3, 4, 4], 6), rand(&[5, 3, 1, 1], 7), rand(&[5], 8)], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 0)
    });
}

#[test]
fn linear_and_narrow() {
    check(vec![rand(&[3, 4], 9), rand(&[6, 4], 10), rand(&[6], 11)], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        g.narrow_cols(y, 2, 3)
    });
}

#[test]
fn group_norm() {
    check(vec![rand(&[2, 4, 3, 3], 12)], |g, v| g.group_norm(v[0], 2, 1e-5));
}

#[test]
fn modulate_per_sample_and_shared() {
    check(vec![rand(&[2, 3, 2, 2], 13), rand(&[2, 3], 14), rand(&[3], 15)], |g, v| {
        g.modulate(v[0], Some(v[1]), Some(v[2]))
    });
}

#[test]
fn silu_mul_add_scale() {
    check(vec![rand(&[2, 5], 16), rand(&[2, 5], 17)], |g, v| {
        let s = g.silu(v[0]);
        let m = g.mul(s, v[1]);
        let a = g.add(m, v[0]);
        g.scale(a, 0.3)
    });
}

#[test]
fn concat_and_upsample() {
    check(vec![rand(&[2, 2, 3, 3], 18), rand(&[2, 1, 3, 3], 19)], |g, v| {
        let c = g.concat_channels(v[0], v[1]);
        g.upsample2x(c)
    });
}

#[test]
fn attention() {
    check(vec![rand(&[2, 3, 2, 3], 20), rand(&[2, 3, 2, 3], 21), rand(&[2, 3, 2, 3], 22)], |g, v| {
        g.attention(v[0], v[1], v[2])
    });
}

#[test]
fn reshape_roundtrip() {
    check(vec![rand(&[2, 2, 2, 2], 23), rand(&[3, 8], 24)], |g, v| {
        let r = g.reshape(v[0], &[2, 8]);
        g.linear(r, v[1], None)
    });
}

#[test]
fn shared_node_gradients_accumulate() {
    check(vec![rand(&[2, 3], 25)], |g, v| {
        let a = g.silu(v[0]);
        g.mul(a, v[0])
    });
}
