//! 2-D cross-correlation via explicit patch-matrix expansion.

use rayon::prelude::*;

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output extent of a convolution along one axis, if the geometry is valid.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn geometry(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Geometry> {
    let (_, c, h, w) = x.dims4("conv2d")?;
    let (f, kc, kh, kw) = k.dims4("conv2d")?;
    if kc != c {
        return Err(Error::shape("conv2d", "channels", format!("input has {c}, kernel expects {kc}")));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv2d", "kernel size", format!("{kh}x{kw} must be odd")));
    }
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(Error::shape("conv2d", "bias", format!("expected [{f}], got {:?}", b.shape())));
        }
    }
    let ho = conv_output_size(h, kh, stride, pad)
        .ok_or_else(|| Error::shape("conv2d", "height", format!("H={h} k={kh} s={stride} p={pad}")))?;
    let wo = conv_output_size(w, kw, stride, pad)
        .ok_or_else(|| Error::shape("conv2d", "width", format!("W={w} k={kw} s={stride} p={pad}")))?;
    Ok(Geometry { c, h, w, f, kh, kw, stride, pad, ho, wo })
}

/// Expands one image `[C,H,W]` into columns `[C*kh*kw, Ho*Wo]`.
fn im2col(g: &Geometry, img: &[f64], cols: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into an image gradient.
fn col2im(g: &Geometry, cols: &[f64], img: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// C (m x n) = alpha * A (m x k) * B (k x n) + beta * C, with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index reached through the strides lies inside the slices,
    // checked by the callers' shape bookkeeping (m,k,n derived from the same
    // geometry that sized the buffers).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn forward(g: &Geometry, x: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let n = x.shape()[0];
    let (ck, p) = (g.patch_len(), g.out_len());
    let in_len = g.c * g.h * g.w;
    let planes: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cols = vec![0.0; ck * p];
            im2col(g, &x.data()[i * in_len..(i + 1) * in_len], &mut cols);
            let mut out = vec![0.0; g.f * p];
            if let Some(b) = bias {
                for (f, chunk) in out.chunks_mut(p).enumerate() {
                    chunk.fill(b.data()[f]);
                }
            }
            gemm(g.f, ck, p, k.data(), (ck as isize, 1), &cols, (p as isize, 1), 1.0, &mut out);
            out
        })
        .collect();
    let data = planes.concat();
    Tensor::new(vec![n, g.f, g.ho, g.wo], data).expect("conv output shape")
}

/// Convolution without recording on a tape.
pub fn conv2d_forward(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = geometry(x, k, bias, stride, pad)?;
    Ok(forward(&g, x, k, bias))
}

struct Conv2dOp {
    g: Geometry,
    has_bias: bool,
}

impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let g = &self.g;
        let (x, k) = (inputs[0], inputs[1]);
        let n = x.shape()[0];
        let (ck, p) = (g.patch_len(), g.out_len());
        let in_len = g.c * g.h * g.w;
        let (need_x, need_k) = (needs[0], needs[1]);

        let per_item: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let dout = &grad.data()[i * g.f * p..(i + 1) * g.f * p];
                let dk = need_k.then(|| {
                    let mut cols = vec![0.0; ck * p];
                    im2col(g, &x.data()[i * in_len..(i + 1) * in_len], &mut cols);
                    let mut dk = vec![0.0; g.f * ck];
                    // dK[F,CK] = dOut[F,P] * cols^T
                    gemm(g.f, p, ck, dout, (p as isize, 1), &cols, (1, p as isize), 0.0, &mut dk);
                    dk
                });
                let dx = need_x.then(|| {
                    let mut dcols = vec![0.0; ck * p];
                    // dCols[CK,P] = K^T * dOut
                    gemm(ck, g.f, p, k.data(), (1, ck as isize), dout, (p as isize, 1), 0.0, &mut dcols);
                    let mut dx = vec![0.0; in_len];
                    col2im(g, &dcols, &mut dx);
                    dx
                });
                (dx, dk)
            })
            .collect();

        let dx = need_x.then(|| {
            let data: Vec<f64> = per_item.iter().flat_map(|(dx, _)| dx.as_ref().unwrap().iter().copied()).collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        });
        let dk = need_k.then(|| {
            let mut acc = vec![0.0; g.f * ck];
            for (_, dk) in &per_item {
                for (a, b) in acc.iter_mut().zip(dk.as_ref().unwrap()) {
                    *a += b;
                }
            }
            Tensor::new(k.shape().to_vec(), acc).unwrap()
        });
        let mut out = vec![dx, dk];
        if self.has_bias {
            let db = needs[2].then(|| {
                let mut db = vec![0.0; g.f];
                for i in 0..n {
                    for (f, d) in db.iter_mut().enumerate() {
                        *d += grad.data()[(i * g.f + f) * p..][..p].iter().sum::<f64>();
                    }
                }
                Tensor::new(vec![g.f], db).unwrap()
            });
            out.push(db);
        }
        out
    }
}

impl Tape {
    /// Cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let tb = bias.map(|b| self.value(b));
        let g = geometry(tx, tk, tb, stride, pad)?;
        let out = forward(&g, tx, tk, tb);
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(out, inputs, Conv2dOp { g, has_bias: bias.is_some() }))
    }
}
