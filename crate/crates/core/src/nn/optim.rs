use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::{Scalar, Tensor};

/// Update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    /// Adam with the usual bias correction.
    Adaptive { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adaptive {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply by `gamma` every `every` epochs.
    Step { gamma: f64, every: usize },
}


impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { gamma, every } => base * gamma.powi((epoch / every.max(1)) as i32),
        }
    }

    /// Single decay by `gamma` at 75% of `epochs`.
    pub fn step_at_three_quarters(epochs: usize, gamma: f64) -> Self {
        LrSchedule::Step {
            gamma,
            every: ((epochs * 3).div_ceil(4)).max(1),
        }
    }
}

pub struct Optimizer<T> {
    kind: OptimizerKind,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .params()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        let second = match kind {
            OptimizerKind::Sgd { .. } => Vec::new(),
            OptimizerKind::Adaptive { .. } => zeros(),
        };
        Self {
            kind,
            first: zeros(),
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter expected");
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = T::of(momentum);
                let lr = T::of(lr);
                for (i, g) in grads.iter().enumerate() {
                    let vel = self.first[i].data_mut();
                    for (v, &gi) in vel.iter_mut().zip(g.data()) {
                        *v = mu * *v + gi;
                    }
                    let p = params.get_mut(i).data_mut();
                    for (pi, &v) in p.iter_mut().zip(self.first[i].data()) {
                        *pi -= lr * v;
                    }
                }
            }
            OptimizerKind::Adaptive { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let step = T::of(lr * c2.sqrt() / c1);
                let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps * c2.sqrt()));
                let one = T::one();
                for (i, g) in grads.iter().enumerate() {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    let p = params.get_mut(i).data_mut();
                    for j in 0..p.len() {
                        let gi = g.data()[j];
                        m[j] = b1 * m[j] + (one - b1) * gi;
                        v[j] = b2 * v[j] + (one - b2) * gi * gi;
                        p[j] -= step * m[j] / (v[j].sqrt() + e);
                    }
                }
            }
        }
    }
}
