//! Named parameter storage, tape binding and the Adam optimiser.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Parameters keyed by dotted names (`"enc_lq.conv0.w"`). Iteration order is
/// the lexicographic name order, which fixes every serialisation and
/// update order.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    /// Copy of every parameter whose name starts with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| matches_any(k, prefixes))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies `from.*` into `to.*`, replacing existing entries.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(from).map(|rest| (alloc::format!("{to}{rest}"), v.clone())))
            .collect();
        for (k, v) in copies {
            self.params.insert(k, v);
        }
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn count_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Names of parameters that differ bitwise between `self` and `other`,
    /// restricted to `prefixes`. Missing entries count as differing.
    pub fn bitwise_diff(&self, other: &ParamStore, prefixes: &[&str]) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in self.params.iter().filter(|(k, _)| matches_any(k, prefixes)) {
            let same = other.params.get(k).is_some_and(|o| {
                o.shape() == v.shape() && o.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            });
            if !same {
                out.push(k.clone());
            }
        }
        for k in other.params.keys().filter(|k| matches_any(k, prefixes)) {
            if !self.params.contains_key(k) {
                out.push(k.clone());
            }
        }
        out
    }
}

pub fn matches_any(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p))
}

/// He-style initialisation for a conv weight `[cout, cin, k, k]`.
pub fn conv_weight<R: Rng + ?Sized>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Tensor {
    let fan_in = (cin * k * k) as f64;
    Tensor::randn(&[cout, cin, k, k], math::sqrt(2.0 / fan_in), rng)
}

/// Lazily places parameters on a tape. Names matching `trainable` become
/// gradient-carrying leaves; all others are constants.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: Vec<String>,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: &[&str]) -> Self {
        Binder {
            tape,
            store,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Binds everything as constants.
    pub fn frozen(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::new(tape, store, &[])
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.is_trainable(name) { self.tape.param(value) } else { self.tape.constant(value) };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter, by name.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(k, _)| self.is_trainable(k))
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are created on first use.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, steps: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// Applies one update to every parameter present in `grads`; other
    /// parameters are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
            store.get(name)?.expect_shape(g.shape(), "Adam gradient")?;
        }
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - math::powi(beta1, self.steps as i32);
        let c2 = 1.0 - math::powi(beta2, self.steps as i32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, mi), vi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (math::sqrt(vh) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_vec(&[2], alloc::vec![1.0, -2.0]).unwrap());
        s.insert("b.w", Tensor::from_vec(&[1], alloc::vec![3.0]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig::default());
        let mut g = BTreeMap::new();
        g.insert("a.w".to_string(), Tensor::zeros(&[2]));
        opt.step(&mut s, &g).unwrap();
        assert!(s.bitwise_diff(&before, &[""]).is_empty());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store();
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg);
        let mut g = BTreeMap::new();
        g.insert("a.w".to_string(), Tensor::from_vec(&[2], alloc::vec![0.5, -4.0]).unwrap());
        opt.step(&mut s, &g).unwrap();
        let a = s.get("a.w").unwrap().data();
        let expect0 = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        let expect1 = -2.0 + 0.01 * 4.0 / (4.0 + 1e-8);
        assert!((a[0] - expect0).abs() < 1e-15 && (a[1] - expect1).abs() < 1e-15);
        assert_eq!(s.get("b.w").unwrap().data(), &[3.0]);
    }

    #[test]
    fn binder_respects_trainable_prefixes() {
        let s = store();
        let tape = Tape::new();
        let b = Binder::new(&tape, &s, &["a."]);
        let a = b.var("a.w").unwrap();
        let c = b.var("b.w").unwrap();
        assert!(a.requires_grad() && !c.requires_grad());
        assert_eq!(b.var("a.w").unwrap().id(), a.id());
        assert!(matches!(b.var("zz"), Err(Error::MissingParameter(_))));
        let loss = a.sum().mul(c).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let got = b.collect(&mut grads);
        assert_eq!(got.len(), 1);
        assert_eq!(got["a.w"].data(), &[3.0, 3.0]);
    }

    #[test]
    fn bitwise_diff_detects_one_ulp_change() {
        let mut s = store();
        let before = s.clone();
        s.get_mut("b.w").unwrap().data_mut()[0] = 3.0 + 1e-15;
        assert_eq!(s.bitwise_diff(&before, &["a.", "b."]), alloc::vec!["b.w".to_string()]);
        assert!(s.bitwise_diff(&before, &["a."]).is_empty());
    }
}
