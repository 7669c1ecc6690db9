//! Row-matrix views of feature maps and `A * B^T`.

use super::conv::gemm;
use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Item `n` of `[N, D, H, W]` as `[H*W, D]`.
pub fn rows_from_channels(x: &Tensor, n: usize) -> Result<Tensor> {
    let (bn, d, h, w) = x.dims4("rows_from_channels")?;
    if n >= bn {
        return Err(Error::invalid("rows_from_channels", format!("item {n} of batch {bn}")));
    }
    let plane = h * w;
    let base = n * d * plane;
    Tensor::new(vec![plane, d], (0..plane * d).map(|k| x.data()[base + (k % d) * plane + k / d]).collect())
}

fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, d, m) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut out = vec![0.0; n * m];
    gemm(n, d, m, a.data(), (d as isize, 1), b.data(), (1, d as isize), 0.0, &mut out);
    Tensor::new(vec![n, m], out).unwrap()
}

/// `a * b` for `[n,k]` and `[k,m]` row-major.
fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    gemm(n, k, m, a.data(), (k as isize, 1), b.data(), (m as isize, 1), 0.0, &mut out);
    Tensor::new(vec![n, m], out).unwrap()
}

/// `a^T * b` for `[k,n]` and `[k,m]`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    gemm(n, k, m, a.data(), (1, n as isize), b.data(), (m as isize, 1), 0.0, &mut out);
    Tensor::new(vec![n, m], out).unwrap()
}

struct RowsOp {
    n: usize,
}
impl Backward for RowsOp {
    fn name(&self) -> &'static str {
        "rows_from_channels"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (_, d, h, w) = x[0].dims4("rows_from_channels").unwrap();
        let plane = h * w;
        let base = self.n * d * plane;
        let mut dx = Tensor::zeros(x[0].shape());
        for (k, v) in g.data().iter().enumerate() {
            dx.data_mut()[base + (k % d) * plane + k / d] = *v;
        }
        vec![Some(dx)]
    }
}

struct MatmulNtOp;
impl Backward for MatmulNtOp {
    fn name(&self) -> &'static str {
        "matmul_nt"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        // y = a b^T:  da = g b,  db = g^T a
        vec![
            needs[0].then(|| matmul_nn(g, x[1])),
            needs[1].then(|| matmul_tn(g, x[0])),
        ]
    }
}

impl Tape {
    pub fn rows_from_channels(&mut self, x: Var, n: usize) -> Result<Var> {
        let out = rows_from_channels(self.value(x), n)?;
        Ok(self.push(out, vec![x], RowsOp { n }))
    }

    /// `a * b^T` for `a: [n, d]`, `b: [m, d]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::shape("matmul_nt", "inner", format!("{:?} x {:?}^T", ta.shape(), tb.shape())));
        }
        let out = matmul_nt(ta, tb);
        Ok(self.push(out, vec![a, b], MatmulNtOp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_layout() {
        let x = Tensor::from_fn(&[2, 3, 1, 2], |i| i as f64);
        let r = rows_from_channels(&x, 1).unwrap();
        assert_eq!(r.shape(), &[2, 3]);
        assert_eq!(r.data(), &[6.0, 8.0, 10.0, 7.0, 9.0, 11.0]);
    }

    #[test]
    fn matmul_matches_loops() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.91).cos());
        let y = matmul_nt(&a, &b);
        for i in 0..3 {
            for j in 0..5 {
                let e: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[j * 4 + k]).sum();
                assert!((y.data()[i * 5 + j] - e).abs() < 1e-14);
            }
        }
    }
}
