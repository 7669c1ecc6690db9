//! Per-channel affine and batch normalization.

use serde::{Deserialize, Serialize};

use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_channel_vec(op: &'static str, what: &'static str, t: &Tensor, c: usize) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::shape(op, what, format!("expected [{c}], got {:?}", t.shape())));
    }
    Ok(())
}

/// Sums `f(n, c, index)` over N,H,W for every channel.
fn per_channel_sum(shape: (usize, usize, usize, usize), mut f: impl FnMut(usize) -> f64) -> Vec<f64> {
    let (n, c, h, w) = shape;
    let plane = h * w;
    let mut acc = vec![0.0; c];
    for ni in 0..n {
        for (ci, a) in acc.iter_mut().enumerate() {
            let base = (ni * c + ci) * plane;
            *a += (base..base + plane).map(&mut f).sum::<f64>();
        }
    }
    acc
}

struct AffineOp {
    dims: (usize, usize, usize, usize),
}

impl Backward for AffineOp {
    fn name(&self) -> &'static str {
        "affine_channel"
    }

    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (_, c, h, w) = self.dims;
        let plane = h * w;
        let scale = x[1].data();
        let dx = needs[0].then(|| {
            Tensor::from_fn(x[0].shape(), |i| g.data()[i] * scale[(i / plane) % c])
        });
        let ds = needs[1].then(|| {
            let v = per_channel_sum(self.dims, |i| g.data()[i] * x[0].data()[i]);
            Tensor::new(vec![c], v).unwrap()
        });
        let db = needs[2].then(|| Tensor::new(vec![c], per_channel_sum(self.dims, |i| g.data()[i])).unwrap());
        vec![dx, ds, db]
    }
}

/// Train mode normalizes with batch statistics; eval mode with running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running mean/variance plus the update hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

struct BatchNormOp {
    dims: (usize, usize, usize, usize),
    /// Normalized input x̂.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: BatchNormMode,
}

impl Backward for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = self.dims;
        let plane = h * w;
        let m = (n * plane) as f64;
        let gamma = x[1].data();
        let ch = |i: usize| (i / plane) % c;
        let sum_g = per_channel_sum(self.dims, |i| g.data()[i]);
        let sum_gx = per_channel_sum(self.dims, |i| g.data()[i] * self.xhat[i]);
        let dx = needs[0].then(|| match self.mode {
            BatchNormMode::Train => Tensor::from_fn(x[0].shape(), |i| {
                let k = ch(i);
                gamma[k] * self.inv_std[k] / m * (m * g.data()[i] - sum_g[k] - self.xhat[i] * sum_gx[k])
            }),
            BatchNormMode::Eval => {
                Tensor::from_fn(x[0].shape(), |i| g.data()[i] * gamma[ch(i)] * self.inv_std[ch(i)])
            }
        });
        let dgamma = needs[1].then(|| Tensor::new(vec![c], sum_gx.clone()).unwrap());
        let dbeta = needs[2].then(|| Tensor::new(vec![c], sum_g.clone()).unwrap());
        vec![dx, dgamma, dbeta]
    }
}

impl Tape {
    /// `out[n,c,h,w] = scale[c] * x[n,c,h,w] + bias[c]`.
    pub fn affine_channel(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let dims = tx.dims4("affine_channel")?;
        let (_, c, h, w) = dims;
        check_channel_vec("affine_channel", "scale", self.value(scale), c)?;
        check_channel_vec("affine_channel", "bias", self.value(bias), c)?;
        let (s, b) = (self.value(scale).data(), self.value(bias).data());
        let plane = h * w;
        let out = Tensor::from_fn(tx.shape(), |i| {
            let k = (i / plane) % c;
            s[k] * tx.data()[i] + b[k]
        });
        Ok(self.push(out, vec![x, scale, bias], AffineOp { dims }))
    }

    /// Batch normalization. In train mode `stats` is updated in place.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let tx = self.value(x);
        let dims = tx.dims4("batchnorm2d")?;
        let (n, c, h, w) = dims;
        check_channel_vec("batchnorm2d", "gamma", self.value(gamma), c)?;
        check_channel_vec("batchnorm2d", "beta", self.value(beta), c)?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batchnorm2d", "running stats", format!("expected {c} channels")));
        }
        let plane = h * w;
        let count = n * plane;
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(Error::invalid(
                        "batchnorm2d",
                        "train mode needs more than one value per channel (N*H*W == 1)",
                    ));
                }
                let mean: Vec<f64> = per_channel_sum(dims, |i| tx.data()[i])
                    .into_iter()
                    .map(|s| s / count as f64)
                    .collect();
                let var: Vec<f64> = per_channel_sum(dims, |i| {
                    let d = tx.data()[i] - mean[(i / plane) % c];
                    d * d
                })
                .into_iter()
                .map(|s| s / count as f64)
                .collect();
                let unbias = count as f64 / (count - 1) as f64;
                for k in 0..c {
                    stats.mean[k] = (1.0 - stats.momentum) * stats.mean[k] + stats.momentum * mean[k];
                    stats.var[k] = (1.0 - stats.momentum) * stats.var[k] + stats.momentum * var[k] * unbias;
                }
                (mean, var)
            }
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let xhat: Vec<f64> = (0..tx.numel())
            .map(|i| {
                let k = (i / plane) % c;
                (tx.data()[i] - mean[k]) * inv_std[k]
            })
            .collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = Tensor::from_fn(tx.shape(), |i| {
            let k = (i / plane) % c;
            g[k] * xhat[i] + b[k]
        });
        Ok(self.push(out, vec![x, gamma, beta], BatchNormOp { dims, xhat, inv_std, mode }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_and_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 3.0));
        let s = tape.constant(Tensor::new(vec![1], vec![2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = tape.affine_channel(x, s, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));

        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let s = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.affine_channel(x, s, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn affine_rejects_wrong_length() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let s = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.affine_channel(x, s, b).is_err());
    }

    #[test]
    fn batchnorm_constant_channels_normalize_to_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| ((i / 4) % 3) as f64 * 5.0));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let mut stats = BatchNormStats::new(3);
        let y = tape.batchnorm2d(x, g, b, &mut stats, BatchNormMode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        // running mean moved toward the channel means
        assert_eq!(stats.mean, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let mut tape = Tape::new();
        let data = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64 - 8.0);
        let x = tape.constant(data.clone());
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut stats = BatchNormStats::new(2);
        let y = tape.batchnorm2d(x, g, b, &mut stats, BatchNormMode::Eval).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(data.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_train_single_value_per_channel_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut stats = BatchNormStats::new(2);
        assert!(tape.batchnorm2d(x, g, b, &mut stats, BatchNormMode::Train).is_err());
        assert!(tape.batchnorm2d(x, g, b, &mut stats, BatchNormMode::Eval).is_ok());
    }
}
