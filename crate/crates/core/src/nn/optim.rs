use serde::{Deserialize, Serialize};

use super::param::{ParamGroup, ParamStore};

/// Learning rates per parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub actor: f64,
    pub critic: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        GroupRates { actor: lr, critic: lr }
    }

    fn for_group(&self, group: ParamGroup) -> Option<f64> {
        match group {
            ParamGroup::Actor => Some(self.actor),
            ParamGroup::Critic => Some(self.critic),
            ParamGroup::Frozen => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam with bias correction, or plain gradient descent.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
        }
    }

    pub fn sgd() -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            ..Self::adam()
        }
    }

    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(),
            OptimizerKind::Sgd => Self::sgd(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, store: &mut ParamStore, rates: GroupRates) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in store.iter_mut() {
            let Some(lr) = rates.for_group(p.group) else {
                p.grad.fill(0.0);
                continue;
            };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                    let grad = p.grad.data();
                    let m = p.first_moment.data_mut();
                    let v = p.second_moment.data_mut();
                    let w = p.value.data_mut();
                    for k in 0..w.len() {
                        let g = grad[k];
                        m[k] = b1 * m[k] + (1.0 - b1) * g;
                        v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        w[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            p.grad.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Actor, Tensor::row(values));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store_with(&[1.0, -2.0]);
        let before = s.clone();
        let mut opt = Optimizer::adam();
        for _ in 0..5 {
            opt.step(&mut s, GroupRates::uniform(1e-2));
        }
        assert_eq!(s.iter().next().unwrap().1.value, before.iter().next().unwrap().1.value);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut s = store_with(&[1.0, -2.0]);
        s.iter_mut().next().unwrap().grad = Tensor::row(&[0.3, -5.0]);
        let mut opt = Optimizer::adam();
        opt.step(&mut s, GroupRates::uniform(0.0));
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.0, -2.0]);
        assert_eq!(s.iter().next().unwrap().1.grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_gradient_update_magnitude_approaches_lr() {
        // With g constant, m̂ = g and v̂ = g² exactly, so each step moves by
        // lr·|g|/(|g| + eps) → lr.
        let lr = 1e-3;
        let mut s = store_with(&[0.0, 0.0]);
        let mut opt = Optimizer::adam();
        let mut prev = vec![0.0, 0.0];
        for _ in 0..200 {
            s.iter_mut().next().unwrap().grad = Tensor::row(&[0.7, -3.0]);
            opt.step(&mut s, GroupRates::uniform(lr));
            let now = s.iter().next().unwrap().1.value.data().to_vec();
            for k in 0..2 {
                let delta = (now[k] - prev[k]).abs();
                assert!((delta - lr).abs() < 1e-9 * lr.max(1.0) + 2e-8, "{delta}");
            }
            prev = now;
        }
    }

    #[test]
    fn sgd_follows_negative_gradient() {
        let mut s = store_with(&[1.0]);
        s.iter_mut().next().unwrap().grad = Tensor::row(&[2.0]);
        Optimizer::sgd().step(&mut s, GroupRates::uniform(0.1));
        assert!((s.iter().next().unwrap().1.value.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut s = ParamStore::new();
        s.add("stats", ParamGroup::Frozen, Tensor::row(&[4.0]));
        s.iter_mut().next().unwrap().grad = Tensor::row(&[1.0]);
        Optimizer::adam().step(&mut s, GroupRates::uniform(1.0));
        assert_eq!(s.iter().next().unwrap().1.value.item(), 4.0);
    }
}
