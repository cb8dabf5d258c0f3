//! Adam over the trainable parameters of a [`ParamStore`].

use std::collections::BTreeMap;

use pcl_tensor::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First and second moment per parameter, in id order.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor, &Tensor)> {
        self.moments.iter().map(|(id, (m, v))| (*id, m, v))
    }

    pub fn restore(&mut self, steps: u64, moments: Vec<(ParamId, Tensor, Tensor)>) {
        self.steps = steps;
        self.moments = moments.into_iter().map(|(id, m, v)| (id, (m, v))).collect();
    }

    /// One update of every trainable parameter that received a gradient.
    /// With `lr == 0` parameter values are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (id, g) in grads.params() {
            if !store.get(id).trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            for ((mi, vi), gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            let p = store.get_mut(id).value_mut();
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcl_tensor::{backward, Tape};

    fn quadratic_step(store: &mut ParamStore, id: ParamId, adam: &mut Adam, lr: f64) {
        let tape = Tape::new();
        let loss = tape.param(store, id).frob_sq().unwrap();
        let grads = backward(loss).unwrap();
        adam.step(store, &grads, lr);
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_rows(&[&[0.1, -2.0], &[3.5, 1e-9]]), true);
        let before = store.value(id).to_le_bytes();
        let mut adam = Adam::default();
        for _ in 0..3 {
            quadratic_step(&mut store, id, &mut adam, 0.0);
        }
        assert_eq!(store.value(id).to_le_bytes(), before);
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![1.0, -1.0]), true);
        let mut adam = Adam::default();
        quadratic_step(&mut store, id, &mut adam, 0.1);
        let v = store.value(id);
        assert!((v.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((v.get(0, 1) + 0.9).abs() < 1e-7);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![1.0]), false);
        let mut adam = Adam::default();
        quadratic_step(&mut store, id, &mut adam, 0.1);
        assert_eq!(store.value(id).data(), &[1.0]);
        assert_eq!(adam.moments().count(), 0);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![2.0, -3.0]), true);
        let mut adam = Adam::default();
        for _ in 0..500 {
            quadratic_step(&mut store, id, &mut adam, 0.05);
        }
        assert!(store.value(id).frob_sq() < 1e-3);
    }
}
