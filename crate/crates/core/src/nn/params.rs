//! Named parameter tensors and batch-norm buffers in build order.

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{BatchNormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    stats: IndexMap<String, BatchNormStats>,
}

/// Tape handles for every parameter of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn insert_stats(&mut self, name: impl Into<String>, stats: BatchNormStats) {
        self.stats.insert(name.into(), stats);
    }

    /// Conv weight `[f, c, k, k]` drawn from U(-b, b) with `b = sqrt(6 / fan_in)`,
    /// on a stream keyed by the parameter name.
    pub fn init_conv(&mut self, seed: u64, name: &str, f: usize, c: usize, k: usize) {
        let fan_in = (c * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut r = rng::stream(seed, name);
        let w = Tensor::from_fn(&[f, c, k, k], |_| r.random_range(-bound..bound));
        self.insert(format!("{name}.weight"), w, true);
        self.insert(format!("{name}.bias"), Tensor::zeros(&[f]), true);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn stats(&self, name: &str) -> Result<&BatchNormStats> {
        self.stats.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn stats_mut(&mut self, name: &str) -> Result<&mut BatchNormStats> {
        self.stats.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn stats_iter(&self) -> impl Iterator<Item = (&str, &BatchNormStats)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn freeze(&mut self) {
        self.params.values_mut().for_each(|p| p.trainable = false);
    }

    /// Registers every parameter on `tape`: trainable ones as gradient leaves.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        let mut vars = ParamVars::default();
        for (name, p) in &self.params {
            let v = if p.trainable {
                tape.param(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            };
            vars.insert(name.clone(), v);
        }
        vars
    }

    /// Like [`bind`](Self::bind) but everything enters as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> ParamVars {
        let mut vars = ParamVars::default();
        for (name, p) in &self.params {
            vars.insert(name.clone(), tape.constant(p.value.clone()));
        }
        vars
    }
}
