//! Data-movement ops: pixel shuffle, channel concatenation, convex mixtures.

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]` with
/// `out[n, c, h*r+i, w*r+j] = in[n, c*r*r + i*r + j, h, w]`.
pub fn pixel_shuffle_tensor(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, cr, h, w) = x.dims4("pixel_shuffle")?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            "channels",
            format!("{cr} channels not divisible by r^2 = {}", r * r),
        ));
    }
    let c = cr / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let src_c = ci * r * r + (y % r) * r + (xo % r);
                    out[((ni * c + ci) * ho + y) * wo + xo] = x.at4(ni, src_c, y / r, xo / r);
                }
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Inverse gather of [`pixel_shuffle_tensor`].
pub fn pixel_unshuffle_tensor(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, ho, wo) = x.dims4("pixel_unshuffle")?;
    if r == 0 || ho % r != 0 || wo % r != 0 {
        return Err(Error::shape("pixel_unshuffle", "spatial", format!("{ho}x{wo} not divisible by {r}")));
    }
    let (h, w, cr) = (ho / r, wo / r, c * r * r);
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let dst_c = ci * r * r + (y % r) * r + (xo % r);
                    out[((ni * cr + dst_c) * h + y / r) * w + xo / r] = x.at4(ni, ci, y, xo);
                }
            }
        }
    }
    Tensor::new(vec![n, cr, h, w], out)
}

struct PixelShuffleOp(usize);
impl Backward for PixelShuffleOp {
    fn name(&self) -> &'static str {
        "pixel_shuffle"
    }
    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(pixel_unshuffle_tensor(g, self.0).expect("shape checked in forward"))]
    }
}

struct ConcatOp {
    channels: Vec<usize>,
}
impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (n, ctot, h, w) = g.dims4("concat").unwrap();
        let plane = h * w;
        let mut offset = 0;
        let mut out = Vec::with_capacity(x.len());
        for (k, &c) in self.channels.iter().enumerate() {
            out.push(needs[k].then(|| {
                let mut d = Vec::with_capacity(n * c * plane);
                for ni in 0..n {
                    let start = (ni * ctot + offset) * plane;
                    d.extend_from_slice(&g.data()[start..start + c * plane]);
                }
                Tensor::new(x[k].shape().to_vec(), d).unwrap()
            }));
            offset += c;
        }
        out
    }
}

struct MixOp;
impl Backward for MixOp {
    fn name(&self) -> &'static str {
        "mix"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let w = x[0].data();
        let mut out = Vec::with_capacity(x.len());
        out.push(needs[0].then(|| {
            Tensor::from_fn(&[w.len()], |k| {
                g.data().iter().zip(x[k + 1].data()).map(|(a, b)| a * b).sum()
            })
        }));
        for k in 0..w.len() {
            out.push(needs[k + 1].then(|| g.map(|v| v * w[k])));
        }
        out
    }
}

struct ReshapeOp;
impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.clone().reshape(x[0].shape()).unwrap())]
    }
}

impl Tape {
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle_tensor(self.value(x), r)?;
        Ok(self.push(out, vec![x], PixelShuffleOp(r)))
    }

    /// Concatenates `[N,C_k,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?);
        let (n, _, h, w) = first.dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat_channels", "spatial", format!("{:?}", self.value(p).shape())));
            }
            channels.push(pc);
        }
        let ctot: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * ctot * plane);
        for ni in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                data.extend_from_slice(&self.value(p).data()[ni * c * plane..(ni + 1) * c * plane]);
            }
        }
        let out = Tensor::new(vec![n, ctot, h, w], data)?;
        Ok(self.push(out, parts.to_vec(), ConcatOp { channels }))
    }

    /// Convex combination `sum_k weights[k] * parts[k]` in index order.
    pub fn mix(&mut self, weights: Var, parts: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        if w.shape() != [parts.len()] {
            return Err(Error::shape("mix", "weights", format!("{:?} for {} parts", w.shape(), parts.len())));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        let mut acc = vec![0.0; self.value(parts[0]).numel()];
        for (k, &p) in parts.iter().enumerate() {
            let t = self.value(p);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("mix", "candidate output", format!("{:?} vs {shape:?}", t.shape())));
            }
            let wk = self.value(weights).data()[k];
            for (a, b) in acc.iter_mut().zip(t.data()) {
                *a += wk * b;
            }
        }
        let out = Tensor::new(shape, acc)?;
        let mut inputs = vec![weights];
        inputs.extend_from_slice(parts);
        Ok(self.push(out, inputs, MixOp))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, vec![x], ReshapeOp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_shape_law() {
        let x = Tensor::zeros(&[1, 4, 2, 2]);
        assert_eq!(pixel_shuffle_tensor(&x, 2).unwrap().shape(), &[1, 1, 4, 4]);
        let x = Tensor::zeros(&[2, 128, 3, 5]);
        assert_eq!(pixel_shuffle_tensor(&x, 8).unwrap().shape(), &[2, 2, 24, 40]);
    }

    #[test]
    fn shuffle_index_law() {
        let x = Tensor::from_fn(&[1, 4, 1, 1], |k| k as f64);
        let y = pixel_shuffle_tensor(&x, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn shuffle_rejects_indivisible_channels() {
        let x = Tensor::zeros(&[1, 6, 2, 2]);
        assert!(pixel_shuffle_tensor(&x, 2).is_err());
    }

    #[test]
    fn unshuffle_inverts_shuffle() {
        let x = Tensor::from_fn(&[2, 18, 3, 4], |i| i as f64);
        let y = pixel_shuffle_tensor(&x, 3).unwrap();
        assert_eq!(pixel_unshuffle_tensor(&y, 3).unwrap(), x);
    }

    #[test]
    fn concat_orders_channels() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 1, 1, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 2, 1, 2], |i| 10.0 + i as f64));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(
            tape.value(c).data(),
            &[0.0, 1.0, 10.0, 11.0, 12.0, 13.0, 2.0, 3.0, 14.0, 15.0, 16.0, 17.0]
        );
    }

    #[test]
    fn one_hot_mix_selects_exactly() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| (i as f64).sin()));
        let b = tape.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| (i as f64).cos()));
        let w = tape.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let m = tape.mix(w, &[a, b]).unwrap();
        assert_eq!(tape.value(m), tape.value(b));
    }
}
