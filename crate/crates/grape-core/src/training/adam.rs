//! Adam with decoupled-from-nothing (coupled, L2-style) weight decay: the
//! decay term is added to the gradient before the moment updates, matching
//! the reference implementation's `Adam(weight_decay=...)` semantics.

use crate::autodiff::Scalar;
use crate::nn::{ParamId, ParamSet};
use ndarray::ArrayD;

pub const ADAM_EPS: f64 = 1e-8;

pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Option<ArrayD<F>>>,
    v: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Adam { lr, beta1, beta2, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One optimizer step over the given (parameter, gradient) pairs.
    ///
    /// Parameters whose gradient is exactly zero everywhere are skipped
    /// entirely (no weight decay, no moment update): a loss term with zero
    /// weight must leave unrelated modules bit-identical.
    pub fn step(&mut self, ps: &mut ParamSet<F>, grads: &[(ParamId, ArrayD<F>)]) {
        self.t += 1;
        let t = self.t as i32;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let lr = F::from_f64(self.lr);
        let wd = F::from_f64(self.weight_decay);
        let eps = F::from_f64(ADAM_EPS);
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for (id, g) in grads {
            if g.iter().all(|&v| v == F::zero()) {
                continue;
            }
            if self.m.len() <= id.0 {
                self.m.resize_with(id.0 + 1, || None);
                self.v.resize_with(id.0 + 1, || None);
            }
            let theta = ps.value_mut(*id);
            debug_assert_eq!(theta.shape(), g.shape());
            let m = self.m[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(theta)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|th, mi, vi, &gi| {
                    let gi = gi + wd * *th;
                    *mi = b1 * *mi + (one - b1) * gi;
                    *vi = b2 * *vi + (one - b2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *th = *th - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Parameter ids that carry optimizer state, in id order.
    pub fn state_ids(&self) -> Vec<usize> {
        self.m
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().map(|_| i))
            .collect()
    }

    pub fn state(&self, id: usize) -> (&ArrayD<F>, &ArrayD<F>) {
        (self.m[id].as_ref().unwrap(), self.v[id].as_ref().unwrap())
    }

    pub fn restore(&mut self, t: u64, entries: Vec<(usize, ArrayD<F>, ArrayD<F>)>) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (id, m, v) in entries {
            if self.m.len() <= id {
                self.m.resize_with(id + 1, || None);
                self.v.resize_with(id + 1, || None);
            }
            self.m[id] = Some(m);
            self.v[id] = Some(v);
        }
    }
}
