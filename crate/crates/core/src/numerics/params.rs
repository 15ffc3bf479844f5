use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor2D;
use crate::error::{CalecError, Result};

/// Named trainable parameters plus the set excluded from updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor2D>,
    frozen: BTreeSet<String>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(CalecError::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2D> {
        self.params.get(name).ok_or_else(|| CalecError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2D> {
        self.params.get_mut(name).ok_or_else(|| CalecError::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor2D::len).sum()
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(CalecError::UnknownParameter(name.to_string()));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    /// Freezes every parameter for which `pred` holds and unfreezes the rest.
    pub fn set_frozen_where(&mut self, pred: impl Fn(&str) -> bool) {
        self.frozen = self.params.keys().filter(|k| pred(k)).cloned().collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Order-sensitive FNV-1a digest over names and bit patterns of the
    /// parameters matching `pred`.
    pub fn fingerprint(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h = Fnv64::new();
        for (name, t) in self.params.iter().filter(|(k, _)| pred(k)) {
            h.write(name.as_bytes());
            for v in t.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub(crate) fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor2D>);

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor2D) {
        self.0.insert(name.into(), g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adds `other` into `self`, name by name.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, g) in &other.0 {
            match self.0.get_mut(k) {
                Some(e) => e.add_assign(g),
                None => {
                    self.0.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            g.scale_assign(s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.values().flat_map(|g| g.data().iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A tape bound to a parameter store: parameters become tape leaves on first
/// use so that gradients can be read back by name.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParameterStore,
    bound: HashMap<&'a str, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Self { tape: Tape::new(), store, bound: HashMap::new() }
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let (key, value) = self
            .store
            .params
            .get_key_value(name)
            .ok_or_else(|| CalecError::UnknownParameter(name.to_string()))?;
        let v = self.tape.leaf(value.clone());
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    /// Bias row if the store has one under `name`.
    pub fn optional_param(&mut self, name: &str) -> Result<Option<Var>> {
        if self.store.contains(name) {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn constant(&mut self, value: Tensor2D) -> Var {
        self.tape.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        self.tape.value(v)
    }

    /// Backpropagates from `loss` and returns gradients of every bound
    /// parameter that the loss depends on.
    pub fn gradients(&self, loss: Var) -> Gradients {
        let mut tg = self.tape.backward(loss);
        let mut out = Gradients::new();
        for (name, v) in &self.bound {
            if let Some(g) = tg.take(*v) {
                out.insert(*name, g);
            }
        }
        out
    }
}

/// Xavier/Glorot uniform initialization.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2D {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor2D::from_vec(rows, cols, data).expect("sized")
}
