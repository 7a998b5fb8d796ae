//! AdamW with decoupled weight decay and per-parameter step counts.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{PdfnetError, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

/// Parameters without a gradient in a step are left untouched, weight decay
/// included.
pub struct AdamW {
    pub cfg: AdamWConfig,
    moments: BTreeMap<String, Moments>,
}

/// Gradients of every parameter that received one, keyed by parameter name.
pub fn named_grads(params: &ParamStore, grads: &GradStore) -> BTreeMap<String, Tensor> {
    params
        .iter()
        .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name.clone(), g.clone())))
        .collect()
}

/// Adds `more` into `acc` key by key.
pub fn accumulate(acc: &mut BTreeMap<String, Tensor>, more: BTreeMap<String, Tensor>) -> Result<()> {
    for (name, g) in more {
        let sum = match acc.remove(&name) {
            Some(prev) => (prev + g)?,
            None => g,
        };
        acc.insert(name, sum);
    }
    Ok(())
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn set_moments(&mut self, moments: BTreeMap<String, Moments>) {
        self.moments = moments;
    }

    /// One update with gradients keyed by parameter name. Returns the number
    /// of parameters changed.
    pub fn step(&mut self, params: &ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<usize> {
        let c = self.cfg;
        let mut updated = 0;
        for (name, var) in params.iter() {
            let Some(g) = grads.get(name) else { continue };
            let g = g.to_dtype(var.dtype())?;
            let state = match self.moments.remove(name) {
                Some(s) => s,
                None => Moments {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                    steps: 0,
                },
            };
            let steps = state.steps + 1;
            let m = ((state.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((state.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / (1.0 - c.beta1.powi(steps as i32)))?;
            let v_hat = (&v / (1.0 - c.beta2.powi(steps as i32)))?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let decayed = (var.as_tensor() * (1.0 - c.lr * c.weight_decay))?;
            let next = (decayed - (update * c.lr)?)?;
            // a NaN or infinity anywhere reaches the sum
            if !crate::ops::scalar_f64(&next.sum_all()?)?.is_finite() {
                return Err(PdfnetError::Numerics(format!("update of {name} is not finite")));
            }
            var.set(&next)?;
            self.moments.insert(name.clone(), Moments { m, v, steps });
            updated += 1;
        }
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        let mut s = ParamStore::new(0, DType::F64, Device::Cpu);
        s.root().param("a", &[2], 1, Init::Const(1.0)).unwrap();
        s.root().param("b", &[1], 1, Init::Const(2.0)).unwrap();
        s
    }

    fn cfg() -> AdamWConfig {
        AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    #[test]
    fn first_step_matches_closed_form() {
        // after one step m̂ = g and v̂ = g², so the move is lr·sign(g) up to eps
        let s = store();
        let mut opt = AdamW::new(cfg());
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::new(&[0.5f64, -2.0], &Device::Cpu).unwrap());
        assert_eq!(opt.step(&s, &grads).unwrap(), 1);
        let a = s.get("a").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        let decayed = 1.0 - 0.1 * 0.01;
        assert!((a[0] - (decayed - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
        assert!((a[1] - (decayed + 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12);
        // no gradient, no change (not even decay)
        assert_eq!(s.get("b").unwrap().as_tensor().to_vec1::<f64>().unwrap(), vec![2.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let s = store();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..cfg() });
        for _ in 0..300 {
            let a = s.get("a").unwrap().as_tensor().clone();
            let loss = (a - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = named_grads(&s, &loss.backward().unwrap());
            opt.step(&s, &grads).unwrap();
        }
        for v in s.get("a").unwrap().as_tensor().to_vec1::<f64>().unwrap() {
            assert!((v - 3.0).abs() < 1e-2, "{v}");
        }
    }
}
