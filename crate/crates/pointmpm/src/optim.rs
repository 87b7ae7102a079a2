//! AdamW with decoupled weight decay, plus the warmup/cosine learning-rate
//! schedule used by every training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter moment accumulators and the shared hyperparameters.
pub struct AdamW {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step_count: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, lr: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamW {
            params,
            m,
            v,
            step_count: 0,
            lr,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One optimizer step from the gradients currently stored on the
    /// parameters. Weight decay is decoupled: `p -= lr*wd*p` is applied
    /// independently of the adaptive update.
    pub fn step(&mut self) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (pi, p) in self.params.iter().enumerate() {
            let grad = match p.grad() {
                Some(g) => g,
                None => vec![0.0; p.numel()],
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerics(format!(
                    "non-finite gradient in parameter {pi} at step {}",
                    self.step_count
                )));
            }
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
            p.update_data(|i, x| {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let decayed = x - lr * wd * x;
                decayed - lr * mhat / (vhat.sqrt() + eps)
            });
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` followed by cosine decay to `floor_lr`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        LrSchedule {
            base_lr,
            warmup_steps,
            total_steps,
            floor_lr: 0.0,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.floor_lr;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let frac = (step - self.warmup_steps) as f64 / span;
        self.floor_lr
            + (self.base_lr - self.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let p = Tensor::param(&[3], vec![0.5, -0.2, 1.0]);
        let mut opt = AdamW::new(vec![p.clone()], 1e-3, 0.0);
        p.accumulate_grad(&[0.0, 0.0, 0.0]);
        opt.step().unwrap();
        assert_eq!(p.to_vec(), vec![0.5, -0.2, 1.0]);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        // bias-corrected m/sqrt(v) is exactly 1 on the first step
        let p = Tensor::param(&[1], vec![2.0]);
        let mut opt = AdamW::new(vec![p.clone()], 1e-3, 0.0);
        p.accumulate_grad(&[1.0]);
        opt.step().unwrap();
        let delta = p.get(0) - 2.0;
        assert!((delta + 1e-3).abs() < 1e-8, "delta {delta}");
    }

    #[test]
    fn decoupled_decay_scales_parameter_when_grad_is_zero() {
        let p = Tensor::param(&[1], vec![4.0]);
        let mut opt = AdamW::new(vec![p.clone()], 1e-3, 0.05);
        p.accumulate_grad(&[0.0]);
        opt.step().unwrap();
        assert!((p.get(0) - 4.0 * (1.0 - 1e-3 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_a_numerics_error() {
        let p = Tensor::param(&[1], vec![1.0]);
        let mut opt = AdamW::new(vec![p.clone()], 1e-3, 0.0);
        p.accumulate_grad(&[f64::NAN]);
        assert!(matches!(opt.step(), Err(Error::Numerics(_))));
    }

    #[test]
    fn adamw_without_decay_equals_reference_adam() {
        // reference Adam implemented independently in the test
        let traj = |wd: f64| -> Vec<f64> {
            let p = Tensor::param(&[2], vec![0.7, -1.2]);
            let mut opt = AdamW::new(vec![p.clone()], 5e-3, wd);
            for s in 0..25 {
                p.zero_grad();
                let g = vec![(s as f64 * 0.3).sin(), (s as f64 * 0.17).cos()];
                p.accumulate_grad(&g);
                opt.step().unwrap();
            }
            p.to_vec()
        };
        let mine = traj(0.0);

        let mut x = [0.7, -1.2];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        let (b1, b2, lr, eps) = (0.9, 0.999, 5e-3, 1e-8);
        for s in 0..25u32 {
            let g = [(s as f64 * 0.3).sin(), (s as f64 * 0.17).cos()];
            for i in 0..2 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / (1.0 - b1.powi(s as i32 + 1));
                let vhat = v[i] / (1.0 - b2.powi(s as i32 + 1));
                x[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        for i in 0..2 {
            assert!((mine[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LrSchedule {
            base_lr: 0.1,
            warmup_steps: 10,
            total_steps: 110,
            floor_lr: 0.0,
        };
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(10), 0.1);
        assert!((s.at(110) - 0.0).abs() < 1e-15);
        // halfway through the cosine span: cos(pi/2) = 0 -> base/2
        assert!((s.at(60) - 0.05).abs() < 1e-12);

        let floor = LrSchedule {
            base_lr: 0.2,
            warmup_steps: 0,
            total_steps: 50,
            floor_lr: 0.01,
        };
        assert_eq!(floor.at(0), 0.2);
        assert_eq!(floor.at(50), 0.01);
        assert_eq!(floor.at(500), 0.01);
    }
}
