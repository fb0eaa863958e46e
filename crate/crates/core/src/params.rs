//! Named parameter storage shared by all trainable modules.
//!
//! Modules allocate entries at construction and hold [`ParamId`] handles;
//! forward passes bind entries into an autodiff graph, and the optimizer
//! walks the store in insertion order. The `decay` flag marks entries that
//! receive decoupled weight decay (weight matrices do; biases, normalization
//! gains and proposal boxes do not).

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>, decay: bool) -> ParamId {
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name: name.to_string(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Overwrite an entry by name; shapes must agree. Used by checkpoint load.
    pub fn set_by_name(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let id = self
            .by_name(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let cur = &mut self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} shape mismatch: {:?} vs {:?}",
                cur.shape(),
                value.shape()
            )));
        }
        *cur = value;
        Ok(())
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    // -- init helpers ------------------------------------------------------

    pub fn add_zeros(&mut self, name: &str, shape: &[usize], decay: bool) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)), decay)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], v: f64, decay: bool) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), v), decay)
    }

    /// Xavier-uniform linear weight `[fan_in, fan_out]`, optionally rescaled.
    pub fn add_linear(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| rng.gen_range(-bound..bound));
        self.add(name, value, true)
    }

    /// Kaiming-normal conv weight `[c_out, c_in, kh, kw]` for ReLU stacks.
    pub fn add_conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let std = (2.0 / (c_in * kh * kw) as f64).sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, kh, kw]), |_| {
            normal_sample(rng) * std
        });
        self.add(name, value, true)
    }

    /// Standard-normal entries (proposal features).
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ParamId {
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| normal_sample(rng) * std);
        self.add(name, value, true)
    }
}

/// Box-Muller standard normal draw; two uniforms per sample keeps the
/// consumption pattern platform-independent.
pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
