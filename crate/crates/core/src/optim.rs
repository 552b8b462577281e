use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are allocated lazily per parameter,
/// so heads added after construction are picked up.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Matrix<T>>>,
    v: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Drops all moment estimates and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    /// One update at learning rate `lr`. Parameters for which `trainable`
    /// returns false, or which received no gradient, are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64, trainable: &dyn Fn(&str) -> bool) {
        self.step += 1;
        let n = params.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps) = (T::c(c.beta1), T::c(c.beta2), T::c(c.eps));
        let step_size = T::c(lr / bc1);
        let bc2 = T::c(bc2);
        for id in 0..n {
            let Some(g) = grads.get(id) else { continue };
            if !trainable(params.name(id)) {
                continue;
            }
            let m = self.m[id].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v[id].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let w = params.get_mut(id);
            for (((w, m), v), &g) in w
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w -= step_size * *m / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}

pub fn all_trainable(_: &str) -> bool {
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamStore::new();
        let id = p.insert("w", Matrix::from_rows(&[vec![1.0f64, -2.0]]));
        let mut g = Gradients::new(1);
        g.accumulate(id, &Matrix::from_rows(&[vec![0.3, -40.0]]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &g, 0.01, &all_trainable);
        let w = p.get(id);
        assert!((w[(0, 0)] - 0.99).abs() < 1e-6);
        assert!((w[(0, 1)] + 1.99).abs() < 1e-6);
    }

    #[test]
    fn reset_restores_fresh_behaviour() {
        let mut p = ParamStore::new();
        let id = p.insert("w", Matrix::from_rows(&[vec![0.0f64]]));
        let mut g = Gradients::new(1);
        g.accumulate(id, &Matrix::from_rows(&[vec![1.0]]));
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut p, &g, 0.1, &all_trainable);
        }
        opt.reset();
        let before = p.get(id)[(0, 0)];
        opt.step(&mut p, &g, 0.1, &all_trainable);
        assert!((before - p.get(id)[(0, 0)] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = ParamStore::new();
        let a = p.insert("enc.w", Matrix::from_rows(&[vec![1.0f32]]));
        let b = p.insert("head.w", Matrix::from_rows(&[vec![1.0f32]]));
        let mut g = Gradients::new(2);
        g.accumulate(a, &Matrix::from_rows(&[vec![1.0]]));
        g.accumulate(b, &Matrix::from_rows(&[vec![1.0]]));
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &g, 0.1, &|n: &str| n.starts_with("head."));
        assert_eq!(p.get(a)[(0, 0)], 1.0);
        assert!(p.get(b)[(0, 0)] < 1.0);
    }
}
