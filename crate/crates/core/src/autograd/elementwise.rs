use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, "operands", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

struct AddOp;
impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct SubOp;
impl Backward for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.clone()), Some(g.map(|x| -x))]
    }
}

struct MulOp;
impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| g.zip_map(x[1], |g, b| g * b)),
            needs[1].then(|| g.zip_map(x[0], |g, a| g * a)),
        ]
    }
}

struct ScaleOp(f64);
impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let c = self.0;
        vec![Some(g.map(|g| g * c))]
    }
}

struct ShiftOp;
impl Backward for ShiftOp {
    fn name(&self) -> &'static str {
        "add_constant"
    }
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.clone())]
    }
}

struct ExpOp;
impl Backward for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, g: &Tensor, _: &[&Tensor], y: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(y, |g, y| g * y))]
    }
}

struct LogOp;
impl Backward for LogOp {
    fn name(&self) -> &'static str {
        "log"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(x[0], |g, x| g / x))]
    }
}

struct SquareOp;
impl Backward for SquareOp {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(x[0], |g, x| 2.0 * g * x))]
    }
}

struct SumOp;
impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(x[0].shape(), g.item()))]
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let out = ta.zip_map(tb, |x, y| x + y);
        Ok(self.push(out, vec![a, b], AddOp))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let out = ta.zip_map(tb, |x, y| x - y);
        Ok(self.push(out, vec![a, b], SubOp))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out = ta.zip_map(tb, |x, y| x * y);
        Ok(self.push(out, vec![a, b], MulOp))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, vec![a], ScaleOp(c))
    }

    /// Adds a constant tensor of the same shape (no gradient to the constant).
    pub fn add_constant(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        same_shape("add_constant", ta, c)?;
        let out = ta.zip_map(c, |x, y| x + y);
        Ok(self.push(out, vec![a], ShiftOp))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, vec![a], ShiftOp)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, vec![a], ExpOp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, vec![a], LogOp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, vec![a], SquareOp)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, vec![a], SumOp)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }
}
