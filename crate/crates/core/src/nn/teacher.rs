//! Procedural teacher: Harris corners splatted into a heatmap, and random
//! projections of blurred local patches as 256-d descriptors.

use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::image::Plane;
use crate::keypoints::{nms, NMS_RADIUS};
use crate::nn::arch::TEACHER_DESCRIPTOR_DIM;
use crate::nn::model::{check_image, FeatureModel};
use crate::rng;
use crate::tensor::Tensor;

const HARRIS_K: f64 = 0.04;
const PATCH: usize = 16;
/// Responses below this fraction of the frame maximum are not corners.
const RELATIVE_FLOOR: f64 = 0.01;
const SPLAT_SIGMA: f64 = 1.0;

pub struct ProceduralTeacher {
    /// Row-major `[256, PATCH*PATCH]` Gaussian projection.
    projection: Vec<f64>,
    downsample: usize,
}

impl ProceduralTeacher {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, "teacher.projection");
        let n = TEACHER_DESCRIPTOR_DIM * PATCH * PATCH;
        let projection = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        ProceduralTeacher { projection, downsample: 8 }
    }

    /// Harris response of a [0,1] image.
    pub fn harris(image: &Plane) -> Plane {
        let (gx, gy) = image.blur(0.7).sobel();
        let prod = |f: &dyn Fn(usize) -> f64| Plane {
            h: image.h,
            w: image.w,
            data: (0..image.data.len()).map(f).collect(),
        };
        let sxx = prod(&|i| gx.data[i] * gx.data[i]).blur(1.5);
        let syy = prod(&|i| gy.data[i] * gy.data[i]).blur(1.5);
        let sxy = prod(&|i| gx.data[i] * gy.data[i]).blur(1.5);
        prod(&|i| {
            let (a, b, c) = (sxx.data[i], syy.data[i], sxy.data[i]);
            a * b - c * c - HARRIS_K * (a + b) * (a + b)
        })
    }

    pub fn heatmap(image: &Plane) -> Plane {
        let r = Self::harris(image);
        let max = r.max();
        let mut heat = Plane::new(image.h, image.w);
        if !(max > 0.0) {
            return heat;
        }
        let floor = RELATIVE_FLOOR * max;
        let half = 0.25 * max;
        let reach = (3.0 * SPLAT_SIGMA).ceil() as isize;
        for k in nms(&r, NMS_RADIUS).into_iter().filter(|k| k.score > floor) {
            let amp = k.score / (k.score + half);
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (y, x) = (k.y as isize + dy, k.x as isize + dx);
                    if y < 0 || x < 0 || y >= image.h as isize || x >= image.w as isize {
                        continue;
                    }
                    let v = amp * (-((dx * dx + dy * dy) as f64) / (2.0 * SPLAT_SIGMA * SPLAT_SIGMA)).exp();
                    let (y, x) = (y as usize, x as usize);
                    if v > heat.get(y, x) {
                        heat.set(y, x, v);
                    }
                }
            }
        }
        heat
    }

    /// Descriptor grid with node `(i, j)` centred on pixel `(s*i, s*j)`.
    pub fn descriptors(&self, image: &Plane) -> Vec<f64> {
        let s = self.downsample;
        let (gh, gw) = (image.h / s, image.w / s);
        let d = TEACHER_DESCRIPTOR_DIM;
        let blurred = image.blur(1.5);
        let mut out = vec![0.0; d * gh * gw];
        let half = PATCH as f64 / 2.0 - 0.5;
        for i in 0..gh {
            for j in 0..gw {
                let (cy, cx) = ((s * i) as f64, (s * j) as f64);
                let mut patch: Vec<f64> = (0..PATCH * PATCH)
                    .map(|k| blurred.bilinear(cy + (k / PATCH) as f64 - half, cx + (k % PATCH) as f64 - half))
                    .collect();
                let mean = patch.iter().sum::<f64>() / patch.len() as f64;
                patch.iter_mut().for_each(|v| *v -= mean);
                let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    patch.iter_mut().for_each(|v| *v /= norm);
                } else {
                    // flat patch: a fixed direction keeps the output unit-norm
                    patch.iter_mut().for_each(|v| *v = 0.0);
                    patch[0] = 1.0;
                }
                let mut v: Vec<f64> = (0..d)
                    .map(|r| {
                        let row = &self.projection[r * PATCH * PATCH..(r + 1) * PATCH * PATCH];
                        row.iter().zip(&patch).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                for (c, x) in v.into_iter().enumerate() {
                    out[(c * gh + i) * gw + j] = x;
                }
            }
        }
        out
    }
}

impl FeatureModel for ProceduralTeacher {
    fn descriptor_dim(&self) -> usize {
        TEACHER_DESCRIPTOR_DIM
    }

    fn downsample(&self) -> usize {
        self.downsample
    }

    fn infer(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        check_image("teacher", image, self.downsample)?;
        let (n, _, h, w) = image.dims4("teacher")?;
        let mut heats = Vec::with_capacity(n);
        let mut descs = Vec::with_capacity(n);
        for b in 0..n {
            let p = Plane::from_tensor(image, b, 0)?;
            heats.push(Self::heatmap(&p).to_tensor());
            let d = self.descriptors(&p);
            descs.push(Tensor::new(vec![1, TEACHER_DESCRIPTOR_DIM, h / self.downsample, w / self.downsample], d)?);
        }
        Ok((Tensor::stack_batch(&heats)?, Tensor::stack_batch(&descs)?))
    }
}
