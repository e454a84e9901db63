//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "lr")]
    pub learning_rate: f64,
    #[serde(default = "b1")]
    pub beta1: f64,
    #[serde(default = "b2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
}

fn lr() -> f64 {
    1e-3
}
fn b1() -> f64 {
    0.9
}
fn b2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: lr(),
            beta1: b1(),
            beta2: b2(),
            eps: eps(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config("learning rate and eps must be positive".into()));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("Adam beta {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Moment estimates for trainable parameters only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let mut m = BTreeMap::new();
        for p in params.iter().filter(|p| p.trainable) {
            m.insert(p.name.clone(), Tensor::zeros(p.tensor.shape()));
        }
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One Adam update. Parameters without a gradient entry see a zero
/// gradient. Every check runs before anything is mutated, so a rejected
/// step leaves `params` and `state` untouched.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, hyper: &AdamConfig) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if !p.trainable || !state.m.contains_key(name) {
            return Err(Error::FreezeViolation(format!("gradient supplied for frozen parameter '{name}'")));
        }
        if g.shape() != p.tensor.shape() {
            return Err(Error::InvalidArgument(format!(
                "gradient for '{name}' has shape {:?}, parameter has {:?}",
                g.shape(),
                p.tensor.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NumericFault(format!("non-finite gradient for '{name}'")));
        }
    }
    for name in state.m.keys() {
        if !params.get(name)?.trainable {
            return Err(Error::FreezeViolation(format!("optimizer state holds frozen parameter '{name}'")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, m) in state.m.iter_mut() {
        let v = state.v.get_mut(name).expect("m and v share keys");
        let g = grads.get(name);
        let p = params.get_mut(name)?;
        let pd = p.tensor.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * gi;
            vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * gi * gi;
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] -= hyper.learning_rate * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Parameter;

    fn scalar_store(v: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(Parameter::new("p", Tensor::scalar(v), trainable));
        s
    }

    fn grad(v: f64) -> Gradients {
        let mut g = Gradients::default();
        g.insert("p", Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut s = scalar_store(1.5, true);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &grad(0.0), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("p").unwrap().tensor.data()[0], 1.5);
        assert_eq!(st.m["p"].data()[0], 0.0);
        assert_eq!(st.v["p"].data()[0], 0.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02] {
            let mut s = scalar_store(0.0, true);
            let mut st = AdamState::new(&s);
            let h = AdamConfig::default();
            adam_step(&mut s, &grad(g), &mut st, &h).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
            let expected = -h.learning_rate * g / (g.abs() + h.eps);
            let got = s.get("p").unwrap().tensor.data()[0];
            assert!((got - expected).abs() < 1e-18);
            assert!((got + h.learning_rate * g.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_parameters_are_rejected() {
        let mut s = scalar_store(1.0, false);
        let mut st = AdamState::new(&s);
        assert!(st.m.is_empty());
        let err = adam_step(&mut s, &grad(1.0), &mut st, &AdamConfig::default());
        assert!(matches!(err, Err(Error::FreezeViolation(_))));
        assert_eq!(s.get("p").unwrap().tensor.data()[0], 1.0);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut s = scalar_store(1.0, true);
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &grad(f64::NAN), &mut st, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NumericFault(_))));
        assert_eq!(st.step, 0);
        assert_eq!(s.get("p").unwrap().tensor.data()[0], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = scalar_store(2.0, true);
        let mut st = AdamState::new(&s);
        let h = AdamConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        for _ in 0..2000 {
            let p = s.get("p").unwrap().tensor.data()[0];
            adam_step(&mut s, &grad(2.0 * (p - 0.5)), &mut st, &h).unwrap();
        }
        assert!((s.get("p").unwrap().tensor.data()[0] - 0.5).abs() < 1e-3);
    }
}
