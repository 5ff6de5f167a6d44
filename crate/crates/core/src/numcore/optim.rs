//! AdamW with decoupled weight decay.
//!
//! ```text
//! p ← p − lr·wd·p
//! m ← β₁m + (1−β₁)g          v ← β₂v + (1−β₂)g²
//! p ← p − lr · (m / (1−β₁ᵗ)) / (√(v / (1−β₂ᵗ)) + ε)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub config: AdamWConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            step: 0,
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Rebuilds a state from exported moments.
    pub fn from_moments(
        step: u64,
        config: AdamWConfig,
        m: BTreeMap<String, Vec<f64>>,
        v: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        if m.keys().ne(v.keys()) || m.iter().any(|(k, a)| v[k].len() != a.len()) {
            return Err(Error::invalid("first and second moments cover different parameters"));
        }
        Ok(Self { step, config, m, v })
    }

    /// First and second moments keyed by parameter name.
    pub fn moments(&self) -> (&BTreeMap<String, Vec<f64>>, &BTreeMap<String, Vec<f64>>) {
        (&self.m, &self.v)
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }

    /// One update over every `(name, param, grad)` triple.
    ///
    /// Gradients are validated before any parameter is touched, so a
    /// non-finite gradient leaves parameters and moments unchanged.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a [f64])>,
    {
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, p, g) in &updates {
            if g.len() != p.len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p, g) in updates {
            let n = p.len();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                if c.weight_decay != 0.0 {
                    *pi -= c.lr * c.weight_decay * *pi;
                }
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let mut p = Tensor::from_vec(vec![0.3, -1.2]);
        let before = p.clone();
        let mut st = AdamWState::new(cfg(0.1, 0.0));
        st.step([("p", &mut p, &[0.0, 0.0][..])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after one step, so the update is lr / (1 + eps).
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamWState::new(cfg(0.1, 0.0));
        st.step([("p", &mut p, &[1.0][..])]).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_uses_parameter_value() {
        let mut p = Tensor::scalar(2.0);
        let mut st = AdamWState::new(cfg(0.1, 0.01));
        st.step([("p", &mut p, &[0.0][..])]).unwrap();
        assert_eq!(p.item(), 2.0 - 0.1 * 0.01 * 2.0);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Tensor::from_vec(vec![1.0, -3.0, 0.25]);
        let before = p.clone();
        let mut st = AdamWState::new(cfg(0.0, 0.1));
        for _ in 0..5 {
            st.step([("p", &mut p, &[0.5, -2.0, 9.0][..])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::scalar(1.0);
        let mut q = Tensor::scalar(1.0);
        let mut st = AdamWState::new(cfg(0.1, 0.0));
        let err = st
            .step([("ok", &mut q, &[1.0][..]), ("bad.w", &mut p, &[f64::NAN][..])])
            .unwrap_err();
        assert!(err.to_string().contains("bad.w"));
        assert_eq!(q.item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn moments_mirror_parameter_shapes() {
        let mut p = Tensor::matrix(2, 3, vec![0.1; 6]).unwrap();
        let mut st = AdamWState::new(AdamWConfig::default());
        st.step([("w", &mut p, &[0.2; 6][..])]).unwrap();
        assert_eq!(st.first_moment("w").unwrap().len(), 6);
        assert_eq!(st.second_moment("w").unwrap().len(), 6);
    }
}
