//! Single-channel image planes: reflection-padded sampling, blur, gradients.

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// Reflects `i` into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

impl Plane {
    pub fn new(h: usize, w: usize) -> Self {
        Plane { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Plane { h, w, data }
    }

    /// Channel `c` of batch item `n`.
    pub fn from_tensor(t: &Tensor, n: usize, c: usize) -> Result<Self> {
        let (_, cs, h, w) = t.dims4("plane")?;
        let start = (n * cs + c) * h * w;
        Ok(Plane {
            h,
            w,
            data: t.data()[start..start + h * w].to_vec(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.h, self.w], self.data.clone()).expect("plane has positive size")
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    #[inline]
    pub fn get_reflect(&self, y: isize, x: isize) -> f64 {
        self.get(reflect(y, self.h), reflect(x, self.w))
    }

    /// Bilinear sample at fractional `(y, x)` with reflection outside.
    pub fn bilinear(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let a = self.get_reflect(y0, x0);
        let b = self.get_reflect(y0, x0 + 1);
        let c = self.get_reflect(y0 + 1, x0);
        let d = self.get_reflect(y0 + 1, x0 + 1);
        (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
    }

    /// Separable Gaussian blur truncated at 3 sigma.
    pub fn blur(&self, sigma: f64) -> Plane {
        let r = (3.0 * sigma).ceil() as isize;
        let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        let k: Vec<f64> = k.into_iter().map(|v| v / s).collect();
        let tmp = Plane::from_fn(self.h, self.w, |y, x| {
            (-r..=r).zip(&k).map(|(d, kv)| kv * self.get_reflect(y as isize, x as isize + d)).sum()
        });
        Plane::from_fn(self.h, self.w, |y, x| {
            (-r..=r).zip(&k).map(|(d, kv)| kv * tmp.get_reflect(y as isize + d, x as isize)).sum()
        })
    }

    /// Sobel gradients scaled by 1/8, so a unit ramp has gradient 1.
    pub fn sobel(&self) -> (Plane, Plane) {
        let p = |y: usize, x: usize, dy: isize, dx: isize| self.get_reflect(y as isize + dy, x as isize + dx);
        let gx = Plane::from_fn(self.h, self.w, |y, x| {
            (p(y, x, -1, 1) + 2.0 * p(y, x, 0, 1) + p(y, x, 1, 1) - p(y, x, -1, -1) - 2.0 * p(y, x, 0, -1) - p(y, x, 1, -1))
                / 8.0
        });
        let gy = Plane::from_fn(self.h, self.w, |y, x| {
            (p(y, x, 1, -1) + 2.0 * p(y, x, 1, 0) + p(y, x, 1, 1) - p(y, x, -1, -1) - 2.0 * p(y, x, -1, 0) - p(y, x, -1, 1))
                / 8.0
        });
        (gx, gy)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// One of the eight symmetries of the square: bit 2 transposes, then
    /// bit 0 mirrors columns and bit 1 mirrors rows.
    pub fn d4(&self, k: u8) -> Plane {
        let (h, w) = if k & 4 != 0 { (self.w, self.h) } else { (self.h, self.w) };
        Plane::from_fn(h, w, |y, x| {
            let x = if k & 1 != 0 { w - 1 - x } else { x };
            let y = if k & 2 != 0 { h - 1 - y } else { y };
            if k & 4 != 0 {
                self.get(x, y)
            } else {
                self.get(y, x)
            }
        })
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d4_is_a_group_action() {
        let p = Plane::from_fn(3, 5, |y, x| (y * 5 + x) as f64);
        let mut seen = Vec::new();
        for k in 0..8u8 {
            let q = p.d4(k);
            assert_eq!(q.data.len(), 15);
            assert!(!seen.contains(&q.data));
            seen.push(q.data.clone());
        }
        // mirrors are involutions; transpose swaps the shape
        assert_eq!(p.d4(1).d4(1), p);
        assert_eq!(p.d4(2).d4(2), p);
        assert_eq!((p.d4(4).h, p.d4(4).w), (5, 3));
        assert_eq!(p.d4(4).d4(4), p);
    }

    #[test]
    fn reflect_without_edge_repeat() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn bilinear_hits_grid_and_interpolates() {
        let p = Plane::from_fn(3, 3, |y, x| (y * 3 + x) as f64);
        assert_eq!(p.bilinear(1.0, 2.0), 5.0);
        assert!((p.bilinear(0.5, 0.5) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ramp_gradient_is_unit() {
        let p = Plane::from_fn(6, 6, |_, x| x as f64);
        let (gx, gy) = p.sobel();
        assert!((gx.get(2, 2) - 1.0).abs() < 1e-12);
        assert_eq!(gy.get(2, 2), 0.0);
    }

    #[test]
    fn blur_preserves_constant() {
        let p = Plane::from_fn(5, 7, |_, _| 0.3);
        assert!(p.blur(1.5).data.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }
}
