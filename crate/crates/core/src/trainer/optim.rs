use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ops::scalar_f64;
use crate::nn::{ParamStore, Weights};

/// Global L2 norm over a name → gradient map.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += scalar_f64(&g.sqr()?.sum_all()?)?;
    }
    Ok(sq.sqrt())
}

/// Scales every gradient by `max_norm / g` when the global norm `g` exceeds
/// `max_norm`. A non-finite gradient is an error naming its parameter.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (name, g) in grads.iter() {
        let s = scalar_f64(&g.sqr()?.sum_all()?)?;
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("grad.{name}")));
        }
        sq += s;
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            *g = (&*g * k)?;
        }
    }
    Ok(norm)
}

/// Student gradients keyed by parameter name; parameters the loss does not
/// reach get zeros so every update covers the full store.
pub fn collect_grads(store: &ParamStore, grads: &GradStore) -> Result<BTreeMap<String, Tensor>> {
    store
        .iter()
        .map(|(name, var)| {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.as_tensor().zeros_like()?,
            };
            Ok((name.clone(), g))
        })
        .collect()
}

/// AdamW with decoupled weight decay applied only to decaying parameters.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, ..Self::default() }
    }

    pub fn apply(&mut self, store: &ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, weight_decay: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(name) else { continue };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let theta = var.as_tensor();
            let decayed = if store.decays(name) { (theta * (1.0 - lr * weight_decay))? } else { theta.clone() };
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// `θ_t ← m·θ_t + (1−m)·θ_s` for every teacher tensor. The teacher's name set
/// must be covered by the student.
pub fn ema_update(teacher: &mut Weights, student: &Weights, momentum: f64) -> Result<()> {
    let names: Vec<String> = teacher.iter().map(|(k, _)| k.clone()).collect();
    for name in names {
        let s = student.get(&name)?.detach();
        let t = teacher.get(&name)?;
        let next = ((t * momentum)? + (s * (1.0 - momentum))?)?;
        teacher.insert(name, next);
    }
    Ok(())
}
