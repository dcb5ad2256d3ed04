use super::layers::{Param, Visit};
use super::tensor::Real;
use super::{NetError, TrainConfig};

/// Step schedule: `lr_base · gamma^⌊epoch / step_size⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_base * cfg.gamma.powi((epoch / cfg.step_size) as i32)
}

/// Classical momentum on one parameter array: `v ← μv + g + λp`, `p ← p − lr·v`.
pub fn sgd_update<T: Real>(p: &mut [T], g: &[T], v: &mut [T], lr: T, momentum: T, weight_decay: T) {
    assert!(p.len() == g.len() && p.len() == v.len(), "parameter, gradient and velocity lengths differ");
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Momentum SGD over every parameter a model exposes, in visitation order.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Apply one update. Fails without touching any parameter when a gradient
    /// is not finite.
    pub fn step(&mut self, model: &mut dyn Visit<T>, lr: f64, epoch: usize) -> Result<(), NetError> {
        let mut bad = None;
        model.visit_params("", &mut |name, p: &mut Param<T>| {
            if bad.is_none() && !p.grad.is_finite() {
                bad = Some(name);
            }
        });
        if let Some(name) = bad {
            return Err(NetError::NonFinite {
                what: format!("gradient in {name}"),
                epoch,
            });
        }
        let (lr, mu, wd) = (T::lit(lr), T::lit(self.momentum), T::lit(self.weight_decay));
        let velocity = &mut self.velocity;
        let mut i = 0;
        model.visit_params("", &mut |_, p: &mut Param<T>| {
            if velocity.len() <= i {
                velocity.push(vec![T::zero(); p.value.len()]);
            }
            sgd_update(p.value.data_mut(), p.grad.data(), &mut velocity[i], lr, mu, wd);
            i += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert_eq!(lr_at(9, &cfg), 1e-3);
        assert_eq!(lr_at(10, &cfg), 2.5e-4);
        assert_eq!(lr_at(25, &cfg), 6.25e-5);
    }

    #[test]
    fn plain_sgd() {
        let (mut p, mut v) = ([1.0f64], [0.0]);
        sgd_update(&mut p, &[2.0], &mut v, 0.1, 0.0, 0.0);
        assert!((p[0] - 0.8).abs() < 1e-15);
        let (mut p, mut v) = ([1.5f64], [0.0]);
        sgd_update(&mut p, &[0.0], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(p[0], 1.5);
    }

    #[test]
    fn momentum_unrolled() {
        let (mut p, mut v) = ([0.0f64], [0.0]);
        sgd_update(&mut p, &[1.0], &mut v, 1.0, 0.9, 0.0);
        assert!((v[0] - 1.0).abs() < 1e-12 && (p[0] + 1.0).abs() < 1e-12);
        sgd_update(&mut p, &[1.0], &mut v, 1.0, 0.9, 0.0);
        assert!((v[0] - 1.9).abs() < 1e-12 && (p[0] + 2.9).abs() < 1e-12);
    }
}
