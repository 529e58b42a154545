//! Adaptive-moment optimizer.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are allocated on the first step and
/// tied to the order of the parameter list.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Config(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::Config("parameter list changed between steps".into()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            opt.step(&mut [&mut w], &[&g]).unwrap();
        }
        assert_eq!(w.data(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut w = Tensor::from_vec(vec![0.0]);
        let g = Tensor::from_vec(vec![0.3]);
        let mut opt = Adam::new(AdamConfig::default());
        let mut prev = 0.0;
        for _ in 0..100 {
            opt.step(&mut [&mut w], &[&g]).unwrap();
            assert!(w.data()[0] < prev);
            prev = w.data()[0];
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut w = Tensor::from_vec(vec![1.0, 1.0]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let g = w.map(|x| 2.0 * x);
            opt.step(&mut [&mut w], &[&g]).unwrap();
        }
        let norm = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "norm {norm}");
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut w = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        assert!(Adam::new(AdamConfig::default())
            .step(&mut [&mut w], &[&g])
            .is_err());
    }
}
