use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
    lr_mult: Vec<(String, f64)>,
}

/// Adam with optional per-prefix learning-rate multipliers.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    lr_mult: Vec<(String, f64)>,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, lr_mult: Vec::new(), m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Scales the learning rate of every parameter whose name starts with `prefix`.
    pub fn with_lr_mult(mut self, prefix: &str, mult: f64) -> Self {
        self.lr_mult.push((prefix.to_string(), mult));
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn mult(&self, name: &str) -> f64 {
        self.lr_mult.iter().filter(|(p, _)| name.starts_with(p.as_str())).map(|(_, m)| *m).product()
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let eps = T::lit(c.eps);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let step_size = T::lit(c.lr * self.mult(name) / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Writes `{stem}.json` and `{stem}.safetensors`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let meta = AdamMeta { config: self.config, step: self.step, lr_mult: self.lr_mult.clone() };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| TensorError::Format(e.to_string()))?;
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        let mut moments = ParamStore::new();
        for (k, t) in &self.m {
            moments.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            moments.insert(format!("v/{k}"), t.clone());
        }
        moments.save(&dir.join(format!("{stem}.safetensors")))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let json = std::fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let meta: AdamMeta = serde_json::from_str(&json).map_err(|e| TensorError::Format(e.to_string()))?;
        let moments = ParamStore::<T>::load(&dir.join(format!("{stem}.safetensors")))?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, t) in moments.iter() {
            if let Some(rest) = k.strip_prefix("m/") {
                m.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = k.strip_prefix("v/") {
                v.insert(rest.to_string(), t.clone());
            }
        }
        Ok(Self { config: meta.config, step: meta.step, lr_mult: meta.lr_mult, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap());
        let mut opt = Adam::new(AdamConfig::new(0.1));
        opt.step(&mut store, &grads);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn lr_mult_applies_by_prefix() {
        let mut store = ParamStore::<f64>::new();
        store.insert("map.w", Tensor::ones(&[1]));
        store.insert("syn.w", Tensor::ones(&[1]));
        let mut grads = BTreeMap::new();
        grads.insert("map.w".to_string(), Tensor::ones(&[1]));
        grads.insert("syn.w".to_string(), Tensor::ones(&[1]));
        let mut opt = Adam::new(AdamConfig::new(0.1)).with_lr_mult("map.", 0.01);
        opt.step(&mut store, &grads);
        assert!((store.get("map.w").unwrap().item() - 0.999).abs() < 1e-6);
        assert!((store.get("syn.w").unwrap().item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[3], vec![0.1, 0.2, -0.3]).unwrap());
        let mut a = Adam::new(AdamConfig::new(0.01));
        a.step(&mut store, &grads);
        a.save(dir.path(), "opt").unwrap();
        let mut b = Adam::<f32>::load(dir.path(), "opt").unwrap();
        let mut s2 = store.clone();
        a.step(&mut store, &grads);
        b.step(&mut s2, &grads);
        assert_eq!(store, s2);
    }
}
