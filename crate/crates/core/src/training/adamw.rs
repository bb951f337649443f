//! AdamW with decoupled weight decay over named tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter name, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for AdamWState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> AdamWState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter in `params` with its gradient from
    /// `grads`, at learning rate `lr` (which may differ from `config.lr`
    /// under a schedule).
    pub fn step(
        &mut self,
        config: &AdamWConfig,
        lr: f64,
        params: Vec<(String, &mut Tensor<T>)>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, _) in &params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no gradient for {name}")))?;
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adamw_step" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of_f64(config.beta1);
        let b2 = T::of_f64(config.beta2);
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let lr_t = T::of_f64(lr);
        let decay = one - T::of_f64(lr * config.weight_decay);
        let eps = T::of_f64(config.eps);

        for (name, p) in params {
            let g = &grads[&name];
            p.expect_shape("adamw_step", g.shape())?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
            let mut new_p = Vec::with_capacity(p.len());
            let mut new_m = Vec::with_capacity(p.len());
            let mut new_v = Vec::with_capacity(p.len());
            for (((&pi, &gi), &mi), &vi) in p.data().iter().zip(g.data()).zip(m.data()).zip(v.data()) {
                let mi = b1 * mi + (one - b1) * gi;
                let vi = b2 * vi + (one - b2) * gi * gi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                new_p.push(pi * decay - lr_t * m_hat / (v_hat.sqrt() + eps));
                new_m.push(mi);
                new_v.push(vi);
            }
            *p = Tensor::new(g.shape().to_vec(), new_p)?.ensure_finite("adamw_step")?;
            *m = Tensor::new(g.shape().to_vec(), new_m)?;
            *v = Tensor::new(g.shape().to_vec(), new_v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(config: AdamWConfig, p: &[f64], g: &[f64]) -> (Tensor<f64>, AdamWState<f64>) {
        let mut param = Tensor::from_vec(p.to_vec());
        let mut state = AdamWState::new();
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(g.to_vec()))]);
        state
            .step(&config, config.lr, vec![("w".into(), &mut param)], &grads)
            .unwrap();
        (param, state)
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let (p, _) = run(cfg, &[2.0, -4.0], &[0.0, 0.0]);
        assert_eq!(p.data(), &[2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn first_step_is_sign_like() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = [0.3, -2.0, 1e-3];
        let (p, state) = run(cfg, &[0.0, 0.0, 0.0], &g);
        for (pi, gi) in p.data().iter().zip(g) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-12, "{pi} vs {expected}");
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn deterministic() {
        let cfg = AdamWConfig::default();
        let (a, sa) = run(cfg, &[1.0, 2.0], &[0.1, -0.2]);
        let (b, sb) = run(cfg, &[1.0, 2.0], &[0.1, -0.2]);
        assert!(a.bitwise_eq(&b));
        assert_eq!(sa, sb);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut param = Tensor::from_vec(vec![1.0f64]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![f64::NAN]))]);
        let err = AdamWState::new()
            .step(&AdamWConfig::default(), 0.1, vec![("w".into(), &mut param)], &grads)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(param.data(), &[1.0]);
    }
}
