//! Adaptive-moment optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::Config("adam: betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Moment accumulators mirroring a parameter list, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(lengths: &[usize]) -> Self {
        AdamState {
            first: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
        }
    }

    pub fn for_params(params: &[&Tensor]) -> Self {
        let lengths: Vec<usize> = params.iter().map(|p| p.len()).collect();
        AdamState::new(&lengths)
    }

    /// One descent step `p ← p − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64, cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dims(
                "adam step",
                &[self.first.len()],
                &[params.len(), grads.len()],
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::dims("adam step", &[m.len()], &[p.len(), g.len()]));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((pk, &gk), mk), vk) in p.values_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
                *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
                let mhat = *mk / c1;
                let vhat = *vk / c2;
                *pk -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let mut s = AdamState::for_params(&[&p]);
        s.step(vec![&mut p], &[vec![3.0, -0.5]], 0.1, &AdamConfig::default()).unwrap();
        assert!((p.values()[0] - 0.9).abs() < 1e-6);
        assert!((p.values()[1] + 0.9).abs() < 1e-6);
        assert_eq!(s.steps, 1);
    }

    #[test]
    fn zero_rate_leaves_parameters_bitwise() {
        let mut p = Tensor::new(vec![3], vec![0.1, -2.5, 1e-300]).unwrap();
        let before = p.clone();
        let mut s = AdamState::for_params(&[&p]);
        for _ in 0..5 {
            s.step(vec![&mut p], &[vec![1.0, 2.0, -3.0]], 0.0, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::new(vec![1], vec![5.0]).unwrap();
        let mut s = AdamState::for_params(&[&p]);
        for _ in 0..2000 {
            let g = vec![2.0 * (p.values()[0] - 1.0)];
            s.step(vec![&mut p], &[g], 0.05, &AdamConfig::default()).unwrap();
        }
        assert!((p.values()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
        let mut s = AdamState::new(&[2]);
        assert!(s.step(vec![&mut p], &[vec![0.0; 3]], 0.1, &AdamConfig::default()).is_err());
    }
}
