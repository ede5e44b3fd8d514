//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse, visiting only nodes that depend on a trainable leaf.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::float::{gemm, Float, Mat};
use crate::store::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Modulate { h: Var, scale: Option<Var>, shift: Option<Var> },
    GroupNorm { x: Var, groups: usize, rstd: Vec<F> },
    Silu(Var),
    ConcatChannels(Var, Var),
    Upsample2x(Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<F> },
    Reshape(Var),
    NarrowCols { x: Var, start: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    param: Option<String>,
}

/// A recording of one forward pass.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    bound: HashMap<String, Var>,
    training: bool,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    params: BTreeMap<String, Tensor<F>>,
    nodes: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradients of trainable parameters, keyed by name.
    pub fn params(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<F>> {
        self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    /// Gradient with respect to an arbitrary node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), training: false }
    }

    /// Graph whose dropout layers are active.
    pub fn training() -> Self {
        Self { training: true, ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Trainable parameters become gradient leaves;
    /// frozen ones are constants. Binding the same name twice returns the same
    /// node.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = store.expect(name).clone();
        let v = self.push(value, Op::Leaf, store.is_trainable(name));
        self.nodes[v.0].param = Some(name.to_string());
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bsz, c, h, wd) = xv.dims4();
        let (o, ci, kh, kw) = wv.dims4();
        assert_eq!(c, ci, "conv2d channel mismatch: input {c}, kernel {ci}");
        assert!(stride >= 1);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad, oh, ow };
        let ck = c * kh * kw;
        let ohw = oh * ow;
        let mut out = vec![F::zero(); bsz * o * ohw];
        let direct = geom.is_pointwise();
        let mut col = if direct { Vec::new() } else { vec![F::zero(); ck * ohw] };
        for bi in 0..bsz {
            let xb = xv.item(bi);
            let src: &[F] = if direct {
                xb
            } else {
                im2col(xb, &geom, &mut col);
                &col
            };
            gemm(Mat::new(wv.data(), o, ck), Mat::new(src, ck, ohw), &mut out[bi * o * ohw..(bi + 1) * o * ohw], false);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), o);
            for bi in 0..bsz {
                for oc in 0..o {
                    let bias = bv[oc];
                    for v in &mut out[(bi * o + oc) * ohw..(bi * o + oc + 1) * ohw] {
                        *v += bias;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        let value = Tensor::from_vec(&[bsz, o, oh, ow], out).expect("conv2d output");
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// `x [n, in] * w[out, in]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.value(x).dims2();
        let (dout, win) = self.value(w).dims2();
        assert_eq!(din, win, "linear input mismatch: {din} vs {win}");
        let mut out = vec![F::zero(); n * dout];
        gemm(
            Mat::new(self.value(x).data(), n, din),
            Mat::t(self.value(w).data(), din, dout),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), dout);
            for row in out.chunks_mut(dout) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        let value = Tensor::from_vec(&[n, dout], out).expect("linear output");
        self.push(value, Op::Linear { x, w, b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).mul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Per-channel affine `h * scale + shift`, where `scale`/`shift` are
    /// `[batch, channels]` or `[channels]` (shared across the batch) and `h`
    /// is `[batch, channels, ...]`.
    pub fn modulate(&mut self, h: Var, scale: Option<Var>, shift: Option<Var>) -> Var {
        let hv = self.value(h);
        let bsz = hv.dim(0);
        let c = hv.dim(1);
        let spatial = hv.item_len() / c;
        let sc = scale.map(|s| self.value(s));
        let sh = shift.map(|s| self.value(s));
        for t in [sc, sh].into_iter().flatten() {
            assert!(
                t.numel() == c || t.numel() == bsz * c,
                "modulate expects {c} or {bsz}x{c} coefficients, got {:?}",
                t.shape()
            );
        }
        let mut out = hv.data().to_vec();
        for b in 0..bsz {
            for ch in 0..c {
                let s = sc.map(|t| t.data()[coef_index(t.numel(), c, b, ch)]);
                let o = sh.map(|t| t.data()[coef_index(t.numel(), c, b, ch)]);
                let seg = &mut out[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
                match (s, o) {
                    (Some(s), Some(o)) => seg.iter_mut().for_each(|v| *v = *v * s + o),
                    (Some(s), None) => seg.iter_mut().for_each(|v| *v *= s),
                    (None, Some(o)) => seg.iter_mut().for_each(|v| *v += o),
                    (None, None) => {}
                }
            }
        }
        let ng = self.ng(h)
            || scale.map(|s| self.ng(s)).unwrap_or(false)
            || shift.map(|s| self.ng(s)).unwrap_or(false);
        let value = Tensor::from_vec(hv.shape(), out).expect("modulate output");
        self.push(value, Op::Modulate { h, scale, shift }, ng)
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let bsz = xv.dim(0);
        let c = xv.dim(1);
        assert!(groups >= 1 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let n = xv.item_len() / groups;
        let mut out = vec![F::zero(); xv.numel()];
        let mut rstd = Vec::with_capacity(bsz * groups);
        for (src, dst) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
            let m: F = src.iter().copied().sum::<F>() / F::of(n as f64);
            let var: F = src.iter().map(|&v| (v - m) * (v - m)).sum::<F>() / F::of(n as f64);
            let r = F::one() / (var + F::of(eps)).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - m) * r;
            }
            rstd.push(r);
        }
        let ng = self.ng(x);
        let value = Tensor::from_vec(xv.shape(), out).expect("group_norm output");
        self.push(value, Op::GroupNorm { x, groups, rstd }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (F::one() + (-v).exp()));
        let ng = self.ng(x);
        self.push(value, Op::Silu(x), ng)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (bsz, ca) = (av.dim(0), av.dim(1));
        let cb = bv.dim(1);
        assert_eq!(bsz, bv.dim(0));
        assert_eq!(&av.shape()[2..], &bv.shape()[2..], "concat_channels spatial mismatch");
        let na = av.item_len();
        let nb = bv.item_len();
        let mut data = Vec::with_capacity(bsz * (na + nb));
        for i in 0..bsz {
            data.extend_from_slice(av.item(i));
            data.extend_from_slice(bv.item(i));
        }
        let mut shape = av.shape().to_vec();
        shape[1] = ca + cb;
        let ng = self.ng(a) || self.ng(b);
        let value = Tensor::from_vec(&shape, data).expect("concat output");
        self.push(value, Op::ConcatChannels(a, b), ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![F::zero(); b * c * h2 * w2];
        for plane in 0..b * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    d[y * w2 + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        let value = Tensor::from_vec(&[b, c, h2, w2], out).expect("upsample output");
        self.push(value, Op::Upsample2x(x), ng)
    }

    /// Single-head spatial self-attention: for each batch item, positions
    /// attend over positions with `softmax(q^T k / sqrt(C))`, output `v A^T`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (b, c, h, w) = self.value(q).dims4();
        assert_eq!(self.shape(k), self.shape(q));
        assert_eq!(self.shape(v), self.shape(q));
        let n = h * w;
        let scale = F::of(1.0 / (c as f64).sqrt());
        let mut probs = vec![F::zero(); b * n * n];
        let mut out = vec![F::zero(); b * c * n];
        for bi in 0..b {
            let qb = self.value(q).item(bi);
            let kb = self.value(k).item(bi);
            let vb = self.value(v).item(bi);
            let a = &mut probs[bi * n * n..(bi + 1) * n * n];
            gemm(Mat::t(qb, n, c), Mat::new(kb, c, n), a, false);
            for row in a.chunks_mut(n) {
                let mut mx = F::neg_infinity();
                for x in row.iter_mut() {
                    *x *= scale;
                    mx = mx.max(*x);
                }
                let mut z = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            gemm(Mat::new(vb, c, n), Mat::t(a, n, n), &mut out[bi * c * n..(bi + 1) * c * n], false);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let value = Tensor::from_vec(&[b, c, h, w], out).expect("attention output");
        self.push(value, Op::Attention { q, k, v, probs }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Columns `[start, start + len)` of a rank-2 node.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.value(x).dims2();
        assert!(start + len <= d);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let ng = self.ng(x);
        let value = Tensor::from_vec(&[n, len], out).expect("narrow output");
        self.push(value, Op::NarrowCols { x, start }, ng)
    }

    /// Inverted dropout; identity outside training graphs or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.random::<f64>() < keep {
                F::of(1.0 / keep)
            } else {
                F::zero()
            }
        });
        let m = self.input(mask);
        self.mul(x, m)
    }

    /// Reverse pass from one or more seeded outputs.
    pub fn backward(&self, seeds: &[(Var, Tensor<F>)]) -> Gradients<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, seed) in seeds {
            assert_eq!(seed.shape(), self.shape(*v), "seed shape mismatch");
            accumulate(&mut grads, *v, seed.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.param, node.needs_grad) {
                let g = grads[i].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                params.insert(name.clone(), g);
            }
        }
        Gradients { params, nodes: grads }
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => self.back_conv2d(gy, *x, *w, *b, *stride, *pad, grads),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din) = xv.dims2();
                let dout = wv.dim(0);
                if self.ng(*x) {
                    let mut dx = vec![F::zero(); n * din];
                    gemm(Mat::new(gy.data(), n, dout), Mat::new(wv.data(), dout, din), &mut dx, false);
                    accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
                }
                if self.ng(*w) {
                    let mut dw = vec![F::zero(); dout * din];
                    gemm(Mat::t(gy.data(), dout, n), Mat::new(xv.data(), n, din), &mut dw, false);
                    accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let mut db = vec![F::zero(); dout];
                    for row in gy.data().chunks(dout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, b, Tensor::from_vec(&[dout], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, gy.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, gy.mul(self.value(*b)));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, gy.mul(self.value(*a)));
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    accumulate(grads, *a, gy.scale(*s));
                }
            }
            Op::Modulate { h, scale, shift } => self.back_modulate(gy, *h, *scale, *shift, grads),
            Op::GroupNorm { x, groups, rstd } => {
                if !self.ng(*x) {
                    return;
                }
                let y = &node.value;
                let n = y.item_len() / groups;
                let mut dx = vec![F::zero(); y.numel()];
                for (gi, ((yg, gg), dg)) in
                    y.data().chunks(n).zip(gy.data().chunks(n)).zip(dx.chunks_mut(n)).enumerate()
                {
                    let nf = F::of(n as f64);
                    let mean_g: F = gg.iter().copied().sum::<F>() / nf;
                    let mean_gy: F = gg.iter().zip(yg).map(|(&a, &b)| a * b).sum::<F>() / nf;
                    let r = rstd[gi];
                    for ((d, &g), &yy) in dg.iter_mut().zip(gg).zip(yg) {
                        *d = r * (g - mean_g - yy * mean_gy);
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(y.shape(), dx).unwrap());
            }
            Op::Silu(x) => {
                if self.ng(*x) {
                    let dx = self.value(*x).zip_map(gy, |v, g| {
                        let s = F::one() / (F::one() + (-v).exp());
                        g * s * (F::one() + v * (F::one() - s))
                    });
                    accumulate(grads, *x, dx);
                }
            }
            Op::ConcatChannels(a, b) => {
                let na = self.value(*a).item_len();
                let nb = self.value(*b).item_len();
                let bsz = gy.dim(0);
                if self.ng(*a) {
                    let mut d = Vec::with_capacity(bsz * na);
                    for i in 0..bsz {
                        d.extend_from_slice(&gy.item(i)[..na]);
                    }
                    accumulate(grads, *a, Tensor::from_vec(self.shape(*a), d).unwrap());
                }
                if self.ng(*b) {
                    let mut d = Vec::with_capacity(bsz * nb);
                    for i in 0..bsz {
                        d.extend_from_slice(&gy.item(i)[na..]);
                    }
                    accumulate(grads, *b, Tensor::from_vec(self.shape(*b), d).unwrap());
                }
            }
            Op::Upsample2x(x) => {
                if !self.ng(*x) {
                    return;
                }
                let (b, c, h, w) = self.value(*x).dims4();
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![F::zero(); b * c * h * w];
                for plane in 0..b * c {
                    let g = &gy.data()[plane * h2 * w2..(plane + 1) * h2 * w2];
                    let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            d[(y / 2) * w + xx / 2] += g[y * w2 + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&[b, c, h, w], dx).unwrap());
            }
            Op::Attention { q, k, v, probs } => self.back_attention(gy, *q, *k, *v, probs, grads),
            Op::Reshape(x) => {
                if self.ng(*x) {
                    accumulate(grads, *x, gy.clone().reshape(self.shape(*x)));
                }
            }
            Op::NarrowCols { x, start } => {
                if !self.ng(*x) {
                    return;
                }
                let (n, d) = self.value(*x).dims2();
                let len = gy.dim(1);
                let mut dx = vec![F::zero(); n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len].copy_from_slice(&gy.data()[r * len..(r + 1) * len]);
                }
                accumulate(grads, *x, Tensor::from_vec(&[n, d], dx).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[allow(clippy::too_many_arguments)]
    fn back_conv2d(
        &self,
        gy: &Tensor<F>,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bsz, c, h, wd) = xv.dims4();
        let (o, _, kh, kw) = wv.dims4();
        let (_, _, oh, ow) = gy.dims4();
        let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad, oh, ow };
        let ck = c * kh * kw;
        let ohw = oh * ow;
        let direct = geom.is_pointwise();
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let mut rows = if direct || !need_w { Vec::new() } else { vec![F::zero(); ohw * ck] };
        let mut dcol = if direct || !need_x { Vec::new() } else { vec![F::zero(); ck * ohw] };
        let mut xt = if direct && need_w { vec![F::zero(); ohw * c] } else { Vec::new() };
        let mut dw = if need_w { vec![F::zero(); o * ck] } else { Vec::new() };
        let mut dx = if need_x { vec![F::zero(); xv.numel()] } else { Vec::new() };
        for bi in 0..bsz {
            let gb = &gy.data()[bi * o * ohw..(bi + 1) * o * ohw];
            if need_w {
                // matrixmultiply packs a row-major right operand fastest, so
                // the patches are laid out `[ohw, ck]` here.
                if direct {
                    for (ci, plane) in xv.item(bi).chunks(ohw).enumerate() {
                        for (p, &v) in plane.iter().enumerate() {
                            xt[p * c + ci] = v;
                        }
                    }
                } else {
                    im2row(xv.item(bi), &geom, &mut rows);
                }
                let src = if direct { &xt } else { &rows };
                gemm(Mat::new(gb, o, ohw), Mat::new(src, ohw, ck), &mut dw, true);
            }
            if need_x {
                let n = c * h * wd;
                let dxb = &mut dx[bi * n..(bi + 1) * n];
                if direct {
                    gemm(Mat::t(wv.data(), ck, o), Mat::new(gb, o, ohw), dxb, false);
                } else {
                    gemm(Mat::t(wv.data(), ck, o), Mat::new(gb, o, ohw), &mut dcol, false);
                    col2im(&dcol, &geom, dxb);
                }
            }
        }
        if need_x {
            accumulate(grads, x, Tensor::from_vec(xv.shape(), dx).unwrap());
        }
        if need_w {
            accumulate(grads, w, Tensor::from_vec(wv.shape(), dw).unwrap());
        }
        if let Some(b) = b.filter(|b| self.ng(*b)) {
            let mut db = vec![F::zero(); o];
            for bi in 0..bsz {
                for (oc, d) in db.iter_mut().enumerate() {
                    *d += gy.data()[(bi * o + oc) * ohw..(bi * o + oc + 1) * ohw].iter().copied().sum::<F>();
                }
            }
            accumulate(grads, b, Tensor::from_vec(&[o], db).unwrap());
        }
    }

    fn back_modulate(
        &self,
        gy: &Tensor<F>,
        h: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let hv = self.value(h);
        let bsz = hv.dim(0);
        let c = hv.dim(1);
        let spatial = hv.item_len() / c;
        if self.ng(h) {
            let dh = match scale {
                Some(s) => {
                    let sv = self.value(s);
                    let mut d = gy.data().to_vec();
                    for b in 0..bsz {
                        for ch in 0..c {
                            let k = sv.data()[coef_index(sv.numel(), c, b, ch)];
                            d[(b * c + ch) * spatial..(b * c + ch + 1) * spatial].iter_mut().for_each(|v| *v *= k);
                        }
                    }
                    Tensor::from_vec(hv.shape(), d).unwrap()
                }
                None => gy.clone(),
            };
            accumulate(grads, h, dh);
        }
        if let Some(s) = scale.filter(|s| self.ng(*s)) {
            let sv = self.value(s);
            let mut d = vec![F::zero(); sv.numel()];
            for b in 0..bsz {
                for ch in 0..c {
                    let r = (b * c + ch) * spatial..(b * c + ch + 1) * spatial;
                    let acc: F = gy.data()[r.clone()].iter().zip(&hv.data()[r]).map(|(&g, &x)| g * x).sum();
                    d[coef_index(sv.numel(), c, b, ch)] += acc;
                }
            }
            accumulate(grads, s, Tensor::from_vec(sv.shape(), d).unwrap());
        }
        if let Some(s) = shift.filter(|s| self.ng(*s)) {
            let sv = self.value(s);
            let mut d = vec![F::zero(); sv.numel()];
            for b in 0..bsz {
                for ch in 0..c {
                    let acc: F = gy.data()[(b * c + ch) * spatial..(b * c + ch + 1) * spatial].iter().copied().sum();
                    d[coef_index(sv.numel(), c, b, ch)] += acc;
                }
            }
            accumulate(grads, s, Tensor::from_vec(sv.shape(), d).unwrap());
        }
    }

    fn back_attention(&self, gy: &Tensor<F>, q: Var, k: Var, v: Var, probs: &[F], grads: &mut [Option<Tensor<F>>]) {
        let (b, c, h, w) = self.value(q).dims4();
        let n = h * w;
        let scale = F::of(1.0 / (c as f64).sqrt());
        let mut dq = vec![F::zero(); b * c * n];
        let mut dk = vec![F::zero(); b * c * n];
        let mut dv = vec![F::zero(); b * c * n];
        let mut da = vec![F::zero(); n * n];
        for bi in 0..b {
            let a = &probs[bi * n * n..(bi + 1) * n * n];
            let go = gy.item(bi);
            let qb = self.value(q).item(bi);
            let kb = self.value(k).item(bi);
            let vb = self.value(v).item(bi);
            let r = bi * c * n..(bi + 1) * c * n;
            gemm(Mat::new(go, c, n), Mat::new(a, n, n), &mut dv[r.clone()], false);
            gemm(Mat::t(go, n, c), Mat::new(vb, c, n), &mut da, false);
            for (arow, drow) in a.chunks(n).zip(da.chunks_mut(n)) {
                let dot: F = arow.iter().zip(drow.iter()).map(|(&p, &d)| p * d).sum();
                for (d, &p) in drow.iter_mut().zip(arow) {
                    *d = p * (*d - dot) * scale;
                }
            }
            gemm(Mat::new(kb, c, n), Mat::t(&da, n, n), &mut dq[r.clone()], false);
            gemm(Mat::new(qb, c, n), Mat::new(&da, n, n), &mut dk[r], false);
        }
        let shape = [b, c, h, w];
        if self.ng(q) {
            accumulate(grads, q, Tensor::from_vec(&shape, dq).unwrap());
        }
        if self.ng(k) {
            accumulate(grads, k, Tensor::from_vec(&shape, dk).unwrap());
        }
        if self.ng(v) {
            accumulate(grads, v, Tensor::from_vec(&shape, dv).unwrap());
        }
    }
}

fn coef_index(numel: usize, c: usize, b: usize, ch: usize) -> usize {
    if numel == c {
        ch
    } else {
        b * c + ch
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad`
    /// is in range.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kj = kj as isize;
        let mut lo = 0isize;
        while lo < self.ow as isize && lo * s + kj - p < 0 {
            lo += 1;
        }
        let mut hi = self.ow as isize;
        while hi > lo && (hi - 1) * s + kj - p >= self.w as isize {
            hi -= 1;
        }
        (lo as usize, hi as usize)
    }
}

fn im2col<F: Float>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].iter_mut().for_each(|v| *v = F::zero());
                    out_row[hi..].iter_mut().for_each(|v| *v = F::zero());
                    if g.stride == 1 {
                        let start = (lo + kj) - g.pad;
                        out_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out_row[ox] = src_row[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn im2row<F: Float>(x: &[F], g: &ConvGeom, rows: &mut [F]) {
    let ck = g.c * g.kh * g.kw;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let dst = &mut rows[(oy * g.ow + ox) * ck..(oy * g.ow + ox + 1) * ck];
            let mut r = 0;
            for ci in 0..g.c {
                let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[r..r + g.kw];
                    r += g.kw;
                    let ix0 = (ox * g.stride) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        seg.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if ix0 >= 0 && ix0 as usize + g.kw <= g.w {
                        seg.copy_from_slice(&row[ix0 as usize..ix0 as usize + g.kw]);
                    } else {
                        for (kj, v) in seg.iter_mut().enumerate() {
                            let ix = ix0 + kj as isize;
                            *v = if ix < 0 || ix >= g.w as isize { F::zero() } else { row[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    dx.iter_mut().for_each(|v| *v = F::zero());
    let ohw = g.oh * g.ow;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * ohw..(row + 1) * ohw];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let in_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let start = lo + kj - g.pad;
                        for (d, &v) in dst_row[start..start + (hi - lo)].iter_mut().zip(&in_row[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst_row[ox * g.stride + kj - g.pad] += in_row[ox];
                        }
                    }
                }
            }
        }
    }
}
