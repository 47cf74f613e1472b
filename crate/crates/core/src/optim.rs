//! Adaptive-moment (Adam) optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Cosine decay from `lr` at `it = 0` down to a tenth of it at `total`.
pub fn cosine_decay(lr: f64, it: usize, total: usize) -> f64 {
    let frac = it as f64 / total.max(1) as f64;
    lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Per-parameter moment accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<S: Scalar = f64> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<S>>,
    second: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update to every parameter in `params`.
    ///
    /// Fails without touching anything if a parameter has no gradient or a
    /// gradient shape disagrees.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    site: format!("gradient of {name}"),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let lr = S::lit(c.learning_rate);
        let eps = S::lit(c.epsilon);
        let t = self.step as i32;
        let corr1 = S::one() - b1.powi(t);
        let corr2 = S::one() - b2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let m_hat = *mv / corr1;
                let v_hat = *vv / corr2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
