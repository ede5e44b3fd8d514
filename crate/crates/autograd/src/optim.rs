use std::collections::BTreeMap;

use crate::float::Float;
use crate::store::ParamStore;
use crate::tensor::Tensor;

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor<F>>,
    v: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient. Frozen
    /// parameters are never touched, even if a gradient is supplied.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &BTreeMap<String, Tensor<F>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let step_size = F::of(self.lr / bc1);
        let bc2_sqrt = F::of(bc2.sqrt());
        let eps = F::of(self.eps);
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let p = store.get_mut(name).expect("gradient for unknown parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, mi), vi), &gi) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                *pi -= step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Global L2 norm across all gradients.
pub fn global_norm<F: Float>(grads: &BTreeMap<String, Tensor<F>>) -> f64 {
    grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap());
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &grads);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::full(&[3], 2.0));
        store.freeze_all();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::full(&[3], 1.0));
        Adam::new(1.0).step(&mut store, &grads);
        assert_eq!(store.get("w").unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
    }
}
