//! Softmax, L2 normalization and KL divergence along an arbitrary axis.

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{axis_extents, Tensor};

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.ndim() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for {:?}", t.shape())));
    }
    Ok(())
}

/// Visits every 1-D lane along `axis`, passing the strided element indices.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&mut dyn Iterator<Item = usize>, usize)) {
    let (outer, len, inner) = axis_extents(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut it = (0..len).map(move |k| base + k * inner);
            f(&mut it, o * inner + i);
        }
    }
}

fn lane_indices(shape: &[usize], axis: usize) -> Vec<Vec<usize>> {
    let mut lanes = Vec::new();
    for_each_lane(shape, axis, |it, _| lanes.push(it.collect()));
    lanes
}

/// Numerically stable `softmax(x / tau)` of one lane.
pub(crate) fn softmax_lane(x: &[f64], tau: f64) -> Vec<f64> {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = x.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `sum p (ln p - ln q)` with `0 ln 0 = 0`.
pub(crate) fn kl_lane(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.ln() - q.ln()))
        .sum()
}

struct SoftmaxOp {
    axis: usize,
    tau: f64,
}
impl Backward for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, g: &Tensor, _: &[&Tensor], y: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(y.shape());
        for lane in lane_indices(y.shape(), self.axis) {
            let dot: f64 = lane.iter().map(|&i| g.data()[i] * y.data()[i]).sum();
            for &i in &lane {
                dx.data_mut()[i] = y.data()[i] * (g.data()[i] - dot) / self.tau;
            }
        }
        vec![Some(dx)]
    }
}

struct L2NormalizeOp {
    axis: usize,
    eps: f64,
}
impl Backward for L2NormalizeOp {
    fn name(&self) -> &'static str {
        "l2_normalize"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], y: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = x[0];
        let mut dx = Tensor::zeros(x.shape());
        for lane in lane_indices(x.shape(), self.axis) {
            let norm = lane.iter().map(|&i| x.data()[i].powi(2)).sum::<f64>().sqrt();
            if norm > self.eps {
                let dot: f64 = lane.iter().map(|&i| g.data()[i] * y.data()[i]).sum();
                for &i in &lane {
                    dx.data_mut()[i] = (g.data()[i] - y.data()[i] * dot) / norm;
                }
            } else {
                for &i in &lane {
                    dx.data_mut()[i] = g.data()[i] / self.eps;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct KlDivOp {
    axis: usize,
}
impl Backward for KlDivOp {
    fn name(&self) -> &'static str {
        "kl_div"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (p, q) = (x[0], x[1]);
        let mut dp = Tensor::zeros(p.shape());
        let mut dq = Tensor::zeros(q.shape());
        for_each_lane(p.shape(), self.axis, |lane, out_idx| {
            let go = g.data()[out_idx];
            for i in lane {
                let (pi, qi) = (p.data()[i], q.data()[i]);
                if pi > 0.0 {
                    dp.data_mut()[i] = go * (pi.ln() - qi.ln() + 1.0);
                    dq.data_mut()[i] = -go * pi / qi;
                }
            }
        });
        vec![needs[0].then_some(dp), needs[1].then_some(dq)]
    }
}

impl Tape {
    /// `softmax(x / tau)` along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::invalid("softmax", format!("temperature must be positive, got {tau}")));
        }
        let tx = self.value(x);
        check_axis("softmax", tx, axis)?;
        let mut out = Tensor::zeros(tx.shape());
        for lane in lane_indices(tx.shape(), axis) {
            let vals: Vec<f64> = lane.iter().map(|&i| tx.data()[i]).collect();
            for (&i, v) in lane.iter().zip(softmax_lane(&vals, tau)) {
                out.data_mut()[i] = v;
            }
        }
        Ok(self.push(out, vec![x], SoftmaxOp { axis, tau }))
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid("l2_normalize", format!("eps must be positive, got {eps}")));
        }
        let tx = self.value(x);
        check_axis("l2_normalize", tx, axis)?;
        let mut out = Tensor::zeros(tx.shape());
        for lane in lane_indices(tx.shape(), axis) {
            let norm = lane.iter().map(|&i| tx.data()[i].powi(2)).sum::<f64>().sqrt().max(eps);
            for &i in &lane {
                out.data_mut()[i] = tx.data()[i] / norm;
            }
        }
        Ok(self.push(out, vec![x], L2NormalizeOp { axis, eps }))
    }

    /// `KL(p || q)` along `axis`; the output keeps `axis` with extent 1.
    pub fn kl_div(&mut self, p: Var, q: Var, axis: usize) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.shape() != tq.shape() {
            return Err(Error::shape("kl_div", "operands", format!("{:?} vs {:?}", tp.shape(), tq.shape())));
        }
        check_axis("kl_div", tp, axis)?;
        let mut shape = tp.shape().to_vec();
        shape[axis] = 1;
        let mut out = Tensor::zeros(&shape);
        for_each_lane(tp.shape(), axis, |lane, out_idx| {
            let idx: Vec<usize> = lane.collect();
            let pv: Vec<f64> = idx.iter().map(|&i| tp.data()[i]).collect();
            let qv: Vec<f64> = idx.iter().map(|&i| tq.data()[i]).collect();
            out.data_mut()[out_idx] = kl_lane(&pv, &qv);
        });
        Ok(self.push(out, vec![p, q], KlDivOp { axis }))
    }
}
