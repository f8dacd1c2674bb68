//! Parameter-update rules: SGD, Adam (coupled L2), AdamW (decoupled weight
//! decay), RMSprop. All operate on slices of tensors in a fixed order.

use serde::{Deserialize, Serialize};

use super::Tensor;

pub trait Optimizer {
    /// Apply one update step. `params` and `grads` must align in order and
    /// shape; the order must stay fixed across steps.
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Adam,
    Sgd,
    RmsProp,
}

/// Vanilla SGD with optional coupled L2.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub l2: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr, l2: 0.0 }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        for (p, g) in params.iter_mut().zip(grads) {
            debug_assert_eq!(p.shape(), g.shape());
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= self.lr * (gv + self.l2 * *pv);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 penalty added to the gradient before the moment updates.
    pub l2: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, l2: 0.0, t: 0, m: Vec::new(), v: Vec::new() }
    }

    fn ensure_state(&mut self, params: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.ensure_state(params);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                let gv = g.data()[i] + self.l2 * p.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_state(&mut self, params: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.ensure_state(params);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                let gv = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let pv = p.data()[i];
                p.data_mut()[i] = pv - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pv);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub l2: f64,
    v: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp { lr, rho: 0.9, eps: 1e-8, l2: 0.0, v: Vec::new() }
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.v.is_empty() {
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.v.iter_mut()) {
            for i in 0..p.len() {
                let gv = g.data()[i] + self.l2 * p.data()[i];
                v[i] = self.rho * v[i] + (1.0 - self.rho) * gv * gv;
                p.data_mut()[i] -= self.lr * gv / (v[i].sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut p = [Tensor::scalar(1.0)];
        let g = [Tensor::scalar(2.0)];
        Sgd::new(0.1).step(&mut p, &g);
        assert!((p[0].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut p = [Tensor::vector(&[0.3, -1.2, 4.0])];
        let g = [Tensor::vector(&[0.0, 0.0, 0.0])];
        let before = p[0].clone();
        AdamW::new(1e-3, 0.0).step(&mut p, &g);
        assert_eq!(p[0], before);
    }

    #[test]
    fn adamw_matches_hand_rolled_moments() {
        let theta0 = [0.5, -0.25, 2.0];
        let grad = [0.1, -0.3, 0.7];
        let (lr, b1, b2, eps, wd) = (1e-2, 0.9, 0.999, 1e-8, 0.01);
        let mut p = [Tensor::vector(&theta0)];
        let g = [Tensor::vector(&grad)];
        let mut opt = AdamW::new(lr, wd);
        opt.step(&mut p, &g);
        for i in 0..3 {
            let m = (1.0 - b1) * grad[i];
            let v = (1.0 - b2) * grad[i] * grad[i];
            let mhat = m / (1.0 - b1);
            let vhat: f64 = v / (1.0 - b2);
            let want = theta0[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * theta0[i]);
            assert!((p[0].data()[i] - want).abs() <= 1e-12, "coord {}", i);
        }
    }
}
