use serde::{Deserialize, Serialize};

use super::{Float, Tensor};

/// Parameter update rule. State is keyed by position in the slice passed to
/// `step`, so callers must pass parameters in a stable order.
pub trait Optimizer {
    fn step(&mut self, params: &[Tensor]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn build(&self) -> Box<dyn Optimizer> {
        match *self {
            OptimizerConfig::Sgd { lr, momentum, weight_decay } => Box::new(Sgd::new(lr, momentum, weight_decay)),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => Box::new(Adam { lr, beta1, beta2, eps, ..Adam::new(lr) }),
        }
    }
}

pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: Vec::new() }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &[Tensor]) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (p, vel) in params.iter().zip(&mut self.velocity) {
            let Some(g) = p.grad() else { continue };
            let (lr, mom, wd) = (self.lr, self.momentum, self.weight_decay);
            p.update_data(|d| {
                for ((w, g), v) in d.iter_mut().zip(&g).zip(vel.iter_mut()) {
                    let step = *g as f64 + wd * *w as f64;
                    *v = mom * *v + step;
                    *w -= (lr * *v) as Float;
                }
            });
        }
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &[Tensor]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad() else { continue };
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            p.update_data(|d| {
                for (i, w) in d.iter_mut().enumerate() {
                    let gi = g[i] as f64;
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    // Masked (-inf) entries see zero gradient and stay put.
                    let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    if upd != 0.0 {
                        *w -= upd as Float;
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_descent(opt: &mut dyn Optimizer) -> Float {
        let x = Tensor::param(&[2], vec![3.0, -2.0]).unwrap();
        for _ in 0..500 {
            x.zero_grad();
            x.mul(&x).unwrap().sum().backward().unwrap();
            opt.step(std::slice::from_ref(&x));
        }
        x.to_vec().iter().map(|v| v.abs()).fold(0.0, Float::max)
    }

    #[test]
    fn sgd_and_adam_minimize_a_bowl() {
        assert!(quadratic_descent(&mut Sgd::new(0.05, 0.9, 0.0)) < 1e-3);
        assert!(quadratic_descent(&mut Adam::new(0.05)) < 1e-2);
    }

    #[test]
    fn adam_leaves_masked_entries() {
        let a = Tensor::param(&[1, 2], vec![0.0, Float::NEG_INFINITY]).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..3 {
            a.zero_grad();
            a.softmax_temp(1.0).unwrap().select_column(0).unwrap().sum().backward().unwrap();
            opt.step(std::slice::from_ref(&a));
        }
        assert_eq!(a.to_vec()[1], Float::NEG_INFINITY);
    }
}
