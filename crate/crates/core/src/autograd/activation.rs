//! Elementwise activations. Subgradients at kinks are 0.

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct ReluOp;
impl Backward for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(x[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
    }
}

struct HardtanhOp {
    lo: f64,
    hi: f64,
}
impl Backward for HardtanhOp {
    fn name(&self) -> &'static str {
        "hardtanh"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (lo, hi) = (self.lo, self.hi);
        vec![Some(g.zip_map(x[0], |g, x| if x > lo && x < hi { g } else { 0.0 }))]
    }
}

struct HardsigmoidOp;
impl Backward for HardsigmoidOp {
    fn name(&self) -> &'static str {
        "hardsigmoid"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(x[0], |g, x| if x > -3.0 && x < 3.0 { g / 6.0 } else { 0.0 }))]
    }
}

struct SigmoidOp;
impl Backward for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, g: &Tensor, _: &[&Tensor], y: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(y, |g, y| g * y * (1.0 - y)))]
    }
}

pub fn hardsigmoid(x: f64) -> f64 {
    (x / 6.0 + 0.5).clamp(0.0, 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, vec![x], ReluOp)
    }

    pub fn hardtanh(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo >= hi {
            return Err(Error::invalid("hardtanh", format!("lo {lo} must be below hi {hi}")));
        }
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        Ok(self.push(out, vec![x], HardtanhOp { lo, hi }))
    }

    pub fn hardsigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(hardsigmoid);
        self.push(out, vec![x], HardsigmoidOp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, vec![x], SigmoidOp)
    }
}
