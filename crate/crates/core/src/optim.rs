//! Adaptive-moment optimizer with an optional lookahead wrapper.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::nn::{Module, Param};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookaheadConfig {
    /// Fast steps between synchronizations.
    pub k: usize,
    /// Interpolation factor towards the fast weights.
    pub alpha: f64,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        Self { k: 5, alpha: 0.5 }
    }
}

/// Bias-corrected Adam over every trainable parameter, in visit order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut i = 0;
        model.visit_params_mut(&mut |p: &mut Param| {
            if !p.trainable {
                return;
            }
            if first.len() == i {
                first.push(ArrayD::zeros(p.value.raw_dim()));
                second.push(ArrayD::zeros(p.value.raw_dim()));
            }
            let m = first[i].as_slice_mut().expect("contiguous");
            let v = second[i].as_slice_mut().expect("contiguous");
            let g = p.grad.as_slice().expect("contiguous");
            let w = p.value.as_slice_mut().expect("contiguous");
            for k in 0..w.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
            i += 1;
        });
    }
}

/// Keeps slow weights and pulls them towards the fast weights every `k` steps.
#[derive(Clone, Debug)]
pub struct Lookahead {
    pub config: LookaheadConfig,
    pub inner: Adam,
    counter: usize,
    slow: Vec<ArrayD<f64>>,
}

impl Lookahead {
    pub fn new(inner: Adam, config: LookaheadConfig) -> Self {
        Self {
            config,
            inner,
            counter: 0,
            slow: Vec::new(),
        }
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, lr: f64) {
        if self.slow.is_empty() {
            model.visit_params(&mut |p| {
                if p.trainable {
                    self.slow.push(p.value.clone());
                }
            });
        }
        self.inner.step(model, lr);
        self.counter += 1;
        if self.counter % self.config.k != 0 {
            return;
        }
        let alpha = self.config.alpha;
        let slow = &mut self.slow;
        let mut i = 0;
        model.visit_params_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            slow[i].zip_mut_with(&p.value, |s, &f| *s += alpha * (f - *s));
            p.value.assign(&slow[i]);
            i += 1;
        });
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Lookahead(Lookahead),
}

impl Optimizer {
    pub fn new(adam: AdamConfig, lookahead: Option<LookaheadConfig>) -> Self {
        let inner = Adam::new(adam);
        match lookahead {
            Some(cfg) => Optimizer::Lookahead(Lookahead::new(inner, cfg)),
            None => Optimizer::Adam(inner),
        }
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, lr: f64) {
        match self {
            Optimizer::Adam(o) => o.step(model, lr),
            Optimizer::Lookahead(o) => o.step(model, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    struct Quadratic {
        w: Param,
        frozen: Param,
    }

    impl Quadratic {
        fn new(start: &[f64]) -> Self {
            Self {
                w: Param::new("w", ArrayD::from_shape_vec(IxDyn(&[start.len()]), start.to_vec()).unwrap()),
                frozen: Param::buffer("f", ArrayD::from_elem(IxDyn(&[1]), 7.0)),
            }
        }

        /// Gradient of `sum((w - 3)^2)`.
        fn fill_grad(&mut self) {
            let g: Vec<f64> = self.w.data().iter().map(|w| 2.0 * (w - 3.0)).collect();
            self.w.grad_mut().copy_from_slice(&g);
        }
    }

    impl Module for Quadratic {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.w);
            f(&self.frozen);
        }

        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.w);
            f(&mut self.frozen);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut q = Quadratic::new(&[0.0, 10.0]);
        q.fill_grad();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut q, 0.1);
        let w = q.w.data();
        assert!((w[0] - 0.1).abs() < 1e-8);
        assert!((w[1] - 9.9).abs() < 1e-8);
        assert_eq!(q.frozen.data()[0], 7.0);
    }

    #[test]
    fn converges_on_quadratic() {
        for lookahead in [None, Some(LookaheadConfig::default())] {
            let mut q = Quadratic::new(&[-4.0, 8.0]);
            let mut opt = Optimizer::new(AdamConfig::default(), lookahead);
            for _ in 0..3000 {
                q.zero_grad();
                q.fill_grad();
                opt.step(&mut q, 0.05);
            }
            assert!(q.w.data().iter().all(|w| (w - 3.0).abs() < 1e-2), "{:?}", q.w.data());
        }
    }

    #[test]
    fn lookahead_interpolates_every_k_steps() {
        let mut q = Quadratic::new(&[0.0]);
        let mut plain = Quadratic::new(&[0.0]);
        let mut la = Lookahead::new(Adam::new(AdamConfig::default()), LookaheadConfig { k: 2, alpha: 0.5 });
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2 {
            q.zero_grad();
            q.fill_grad();
            la.step(&mut q, 0.1);
            plain.zero_grad();
            plain.fill_grad();
            adam.step(&mut plain, 0.1);
        }
        assert!((q.w.data()[0] - 0.5 * plain.w.data()[0]).abs() < 1e-12);
    }
}
