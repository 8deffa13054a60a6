//! Adam with global-norm clipping and a linear warm-up schedule.

use alloc::format;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// First and second moment estimates, named like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::dim(format!(
                "{} gradients and {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        let moments = self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads).zip(moments) {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * mh / (libm::sqrt(vh) + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total = libm::sqrt(
        grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>(),
    );
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    total
}

/// Learning rate for 1-based `step`: linear ramp over `warmup` steps, then flat.
pub fn warmup_lr(step: usize, base: f64, warmup: usize) -> f64 {
    if warmup > 0 && step <= warmup {
        base * step as f64 / warmup as f64
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut opt = Adam::new(&p, AdamConfig::default());
        let g = [Tensor::new(&[3], vec![0.3, -4.0, 0.0]).unwrap()];
        opt.step(&mut p, &g, 0.01).unwrap();
        let w = p.get("w").unwrap().data();
        // bias-corrected first step is g / (|g| + eps)
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 1.99).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(&p, AdamConfig::default());
        for _ in 0..2000 {
            let g: alloc::vec::Vec<Tensor> = p.tensors().iter().map(|t| t.map(|v| 2.0 * (v - 1.0))).collect();
            opt.step(&mut p, &g, 0.01).unwrap();
        }
        for v in p.get("x").unwrap().data() {
            assert!((v - 1.0).abs() < 1e-3, "{}", v);
        }
    }

    #[test]
    fn clipping_bounds_the_joint_norm() {
        let mut g = vec![
            Tensor::new(&[2], vec![3.0, 0.0]).unwrap(),
            Tensor::new(&[1], vec![4.0]).unwrap(),
        ];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-12);
        let mut small = vec![Tensor::new(&[1], vec![0.5]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn warmup_is_linear_then_flat() {
        for k in 1..=50 {
            let want = 1e-3 * k as f64 / 50.0;
            assert!((warmup_lr(k, 1e-3, 50) - want).abs() < 1e-12);
        }
        assert_eq!(warmup_lr(51, 1e-3, 50), 1e-3);
        assert_eq!(warmup_lr(1, 1e-3, 0), 1e-3);
    }
}
