use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Parameter EMA decay in `[0, 1)`.
    pub ema_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ema_decay: 0.9999,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was non-finite; parameters were left untouched.
    Skipped,
}

/// Adam with bias correction plus an EMA copy of the parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: AdamConfig,
    lr: f64,
    step: u64,
    skipped: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    ema: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params.iter().map(|p| p.map(|_| 0.0)).collect();
        Ok(OptimizerState {
            config,
            lr: config.lr,
            step: 0,
            skipped: 0,
            m: zeros.clone(),
            v: zeros,
            ema: params.to_vec(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn ema(&self) -> &[Tensor] {
        &self.ema
    }

    pub fn into_ema(self) -> Vec<Tensor> {
        self.ema
    }

    fn check(&self, params: &[Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "optimizer",
                &[self.m.len()],
                &[params.len(), grads.len()],
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.expect_shape("optimizer param", m.shape())?;
            g.expect_shape("optimizer grad", m.shape())?;
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<StepOutcome> {
        self.check(params, grads)?;
        if grads.iter().any(|g| g.first_non_finite().is_some()) {
            self.skipped += 1;
            return Ok(StepOutcome::Skipped);
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - math::powf(beta1, self.step as f64);
        let bc2 = 1.0 - math::powf(beta2, self.step as f64);
        let lr = self.lr;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (math::sqrt(vh) + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }

    /// `ema ← decay·ema + (1 − decay)·params`.
    pub fn ema_update(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.ema.len() {
            return Err(Error::shape("ema", &[self.ema.len()], &[params.len()]));
        }
        let d = self.config.ema_decay;
        for (e, p) in self.ema.iter_mut().zip(params) {
            p.expect_shape("ema", e.shape())?;
            for (e, p) in e.data_mut().iter_mut().zip(p.data()) {
                *e = d * *e + (1.0 - d) * p;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0])];
        let before = p.clone();
        let mut opt = OptimizerState::new(AdamConfig::default(), &p).unwrap();
        opt.step(&mut p, &[Tensor::zeros(1, 3)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn ema_with_zero_decay_tracks_params() {
        let p = vec![Tensor::scalar(1.0)];
        let cfg = AdamConfig {
            ema_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, &p).unwrap();
        let moved = vec![Tensor::scalar(4.5)];
        opt.ema_update(&moved).unwrap();
        assert_eq!(opt.ema(), &moved[..]);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = OptimizerState::new(AdamConfig::default(), &p).unwrap();
        let out = opt.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!(opt.skipped(), 1);
        assert_eq!(opt.step_count(), 0);
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn quadratic_converges_to_minimizer() {
        // loss = (θ − 0.3)², minimizer 0.3
        let mut p = vec![Tensor::scalar(-1.0)];
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, &p).unwrap();
        for _ in 0..200 {
            let g = 2.0 * (p[0].item() - 0.3);
            opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
        }
        assert!((p[0].item() - 0.3).abs() < 1e-3, "θ = {}", p[0].item());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = vec![Tensor::zeros(2, 2)];
        let mut opt = OptimizerState::new(AdamConfig::default(), &p).unwrap();
        assert!(opt.step(&mut p, &[Tensor::zeros(1, 2)]).is_err());
        assert!(OptimizerState::new(
            AdamConfig {
                ema_decay: 1.0,
                ..Default::default()
            },
            &p
        )
        .is_err());
    }
}
