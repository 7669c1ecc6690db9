//! Distillation losses: teacher-target preprocessing, the Gaussian-softened
//! focal detection loss, the relational KL descriptor loss and uncertainty
//! weighting.

use rayon::prelude::*;

use crate::autograd::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::image::Plane;
use crate::keypoints::{nms, NMS_RADIUS};
use crate::tensor::Tensor;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const SIGMA_G: f64 = 1.5;
pub const TAU_REL: f64 = 0.1;
pub const TEACHER_THRESHOLD: f64 = 0.005;
pub const PRED_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    /// `(x, y)` pixel coordinates.
    pub hard_points: Vec<(usize, usize)>,
    /// `[1,1,H,W]`.
    pub soft_map: Tensor,
    /// `[1,256,H/8,W/8]`.
    pub teacher_desc: Tensor,
}

/// Gaussian splat with max-composition, exactly 1 on every point and cut
/// off beyond `3 * sigma`.
pub fn splat(points: &[(usize, usize)], h: usize, w: usize, sigma: f64) -> Plane {
    let mut map = Plane::new(h, w);
    let cut = 3.0 * sigma;
    let reach = cut.floor() as isize;
    for &(px, py) in points {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (py as isize + dy, px as isize + dx);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f64;
                if d2 > cut * cut {
                    continue;
                }
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let (y, x) = (y as usize, x as usize);
                if v > map.get(y, x) {
                    map.set(y, x, v);
                }
            }
        }
    }
    map
}

/// NMS survivors of the raw teacher heatmap at or above `threshold` become
/// hard points; the soft map splats a Gaussian around each.
pub fn preprocess_teacher(
    raw_heatmap: &Tensor,
    teacher_desc: Tensor,
    nms_radius: usize,
    threshold: f64,
    sigma_g: f64,
) -> Result<TeacherTargets> {
    let plane = Plane::from_tensor(raw_heatmap, 0, 0)?;
    let hard_points: Vec<(usize, usize)> = nms(&plane, nms_radius)
        .into_iter()
        .filter(|k| k.score >= threshold)
        .map(|k| (k.x, k.y))
        .collect();
    let soft_map = splat(&hard_points, plane.h, plane.w, sigma_g).to_tensor();
    Ok(TeacherTargets {
        hard_points,
        soft_map,
        teacher_desc,
    })
}

pub fn preprocess_default(raw_heatmap: &Tensor, teacher_desc: Tensor) -> Result<TeacherTargets> {
    preprocess_teacher(raw_heatmap, teacher_desc, NMS_RADIUS, TEACHER_THRESHOLD, SIGMA_G)
}

// ---------------------------------------------------------------------------
// Focal detection loss

struct FocalOp {
    soft: Tensor,
    /// Per batch item: `1 / max(1, P) / N`.
    norm: Vec<f64>,
    alpha: f64,
    beta: f64,
}

/// Per-pixel term (before the leading minus and normalization) and its
/// derivative with respect to the unclamped prediction.
fn focal_term(p_raw: f64, y: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let p = p_raw.clamp(PRED_EPS, 1.0 - PRED_EPS);
    let inside = p == p_raw;
    if y == 1.0 {
        let v = (1.0 - p).powf(alpha) * p.ln();
        let d = -alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() + (1.0 - p).powf(alpha) / p;
        (v, if inside { d } else { 0.0 })
    } else {
        let wgt = (1.0 - y).powf(beta);
        let v = wgt * p.powf(alpha) * (1.0 - p).ln();
        let d = wgt * (alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p));
        (v, if inside { d } else { 0.0 })
    }
}

impl Backward for FocalOp {
    fn name(&self) -> &'static str {
        "focal_loss"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let per = x[0].numel() / self.norm.len();
        let g = g.item();
        let dx = Tensor::from_fn(x[0].shape(), |i| {
            let (_, d) = focal_term(x[0].data()[i], self.soft.data()[i], self.alpha, self.beta);
            -g * self.norm[i / per] * d
        });
        vec![Some(dx)]
    }
}

/// Mean over the batch of
/// `-(1/max(1,P)) * sum_pixels [ y==1 ? (1-p)^a ln p : (1-y)^b p^a ln(1-p) ]`.
///
/// `pred` is `[N,1,H,W]`; `targets[n]` supplies item `n`.
pub fn focal_loss(tape: &mut Tape, pred: Var, targets: &[&TeacherTargets], alpha: f64, beta: f64) -> Result<Var> {
    if !(alpha >= 0.0) || !(beta >= 0.0) {
        return Err(Error::invalid("focal_loss", format!("exponents must be >= 0, got alpha={alpha} beta={beta}")));
    }
    let tp = tape.value(pred);
    let (n, c, h, w) = tp.dims4("focal_loss")?;
    if c != 1 || targets.len() != n {
        return Err(Error::shape("focal_loss", "batch", format!("pred {:?} with {} targets", tp.shape(), targets.len())));
    }
    let mut soft = Vec::with_capacity(tp.numel());
    for t in targets {
        if t.soft_map.shape() != [1, 1, h, w] {
            return Err(Error::shape("focal_loss", "soft_map", format!("{:?} vs {h}x{w}", t.soft_map.shape())));
        }
        soft.extend_from_slice(t.soft_map.data());
    }
    let soft = Tensor::new(tp.shape().to_vec(), soft)?;
    let norm: Vec<f64> = targets
        .iter()
        .map(|t| 1.0 / (t.hard_points.len().max(1) as f64) / n as f64)
        .collect();
    let per = h * w;
    let loss: f64 = (0..n)
        .map(|b| {
            let s: f64 = (b * per..(b + 1) * per)
                .map(|i| focal_term(tp.data()[i], soft.data()[i], alpha, beta).0)
                .sum();
            -norm[b] * s
        })
        .sum();
    Ok(tape.push(Tensor::scalar(loss), vec![pred], FocalOp { soft, norm, alpha, beta }))
}

// ---------------------------------------------------------------------------
// Relational descriptor loss

/// `[N, D]` rows of one batch item, read from `[B, D, h, w]`.
fn rows(t: &Tensor, b: usize) -> (usize, usize, Vec<f64>) {
    let (_, d, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let r = crate::autograd::rows_from_channels(t, b).expect("shape checked by caller");
    (h * w, d, r.into_data())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_row(sims: &[f64], tau: f64) -> Vec<f64> {
    let max = sims.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e: Vec<f64> = sims.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Loss and gradient (w.r.t. student rows) of one batch item. Similarity
/// rows are built one at a time, so memory is O(N) rather than O(N^2).
fn relational_item(s: &[f64], ds: usize, t: &[f64], dt: usize, n: usize, tau: f64, want_grad: bool) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![0.0; n * ds] } else { Vec::new() };
    for i in 0..n {
        let si = &s[i * ds..(i + 1) * ds];
        let ti = &t[i * dt..(i + 1) * dt];
        let sim_s: Vec<f64> = (0..n).map(|j| dot(si, &s[j * ds..(j + 1) * ds])).collect();
        let sim_t: Vec<f64> = (0..n).map(|j| dot(ti, &t[j * dt..(j + 1) * dt])).collect();
        let p = softmax_row(&sim_t, tau);
        let q = softmax_row(&sim_s, tau);
        loss += p
            .iter()
            .zip(&q)
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, &q)| p * (p.ln() - q.ln()))
            .sum::<f64>();
        if want_grad {
            // d/d sim_s[i][j] = (q_j - p_j) / tau; sim_s[i][j] = s_i . s_j
            for j in 0..n {
                let gij = (q[j] - p[j]) / tau;
                if gij == 0.0 {
                    continue;
                }
                for k in 0..ds {
                    grad[i * ds + k] += gij * s[j * ds + k];
                    grad[j * ds + k] += gij * s[i * ds + k];
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (loss * inv, grad)
}

struct RelationalOp {
    teacher: Tensor,
    tau: f64,
}

impl Backward for RelationalOp {
    fn name(&self) -> &'static str {
        "relational_kl"
    }
    fn backward(&self, g: &Tensor, x: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let student = x[0];
        let (b, d, h, w) = student.dims4("relational_kl").unwrap();
        let plane = h * w;
        let scale = g.item() / b as f64;
        let per_item: Vec<Vec<f64>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let (n, ds, s) = rows(student, bi);
                let (_, dt, t) = rows(&self.teacher, bi);
                relational_item(&s, ds, &t, dt, n, self.tau, true).1
            })
            .collect();
        let mut dx = Tensor::zeros(student.shape());
        for (bi, gr) in per_item.iter().enumerate() {
            for (k, v) in gr.iter().enumerate() {
                let (loc, c) = (k / d, k % d);
                dx.data_mut()[(bi * d + c) * plane + loc] = scale * v;
            }
        }
        vec![Some(dx)]
    }
}

/// Batch mean of `(1/N) sum_i KL(softmax(T_i / tau) || softmax(S_i / tau))`
/// where `S_i`, `T_i` are row `i` of the student and teacher
/// self-similarity matrices over the `N = h*w` grid locations.
pub fn relational_loss(tape: &mut Tape, student: Var, teacher: &Tensor, tau: f64) -> Result<Var> {
    check_relational(tape.value(student), teacher, tau)?;
    let value = relational_value(tape.value(student), teacher, tau)?;
    Ok(tape.push(
        Tensor::scalar(value),
        vec![student],
        RelationalOp {
            teacher: teacher.clone(),
            tau,
        },
    ))
}

fn check_relational(student: &Tensor, teacher: &Tensor, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::invalid("relational_loss", format!("temperature must be positive, got {tau}")));
    }
    let (sb, _, sh, sw) = student.dims4("relational_loss")?;
    let (tb, _, th, tw) = teacher.dims4("relational_loss")?;
    if (sb, sh, sw) != (tb, th, tw) {
        return Err(Error::shape(
            "relational_loss",
            "grid",
            format!("student {:?} vs teacher {:?}", student.shape(), teacher.shape()),
        ));
    }
    Ok(())
}

/// Forward value only.
pub fn relational_value(student: &Tensor, teacher: &Tensor, tau: f64) -> Result<f64> {
    check_relational(student, teacher, tau)?;
    let b = student.shape()[0];
    let losses: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let (n, ds, s) = rows(student, bi);
            let (_, dt, t) = rows(teacher, bi);
            relational_item(&s, ds, &t, dt, n, tau, false).0
        })
        .collect();
    Ok(losses.iter().sum::<f64>() / b as f64)
}

/// The same loss assembled from generic tape primitives (row view, matrix
/// product, softmax, KL). Used to cross-check the fused op.
pub fn relational_loss_composed(tape: &mut Tape, student: Var, teacher: &Tensor, tau: f64) -> Result<Var> {
    check_relational(tape.value(student), teacher, tau)?;
    let b = tape.value(student).shape()[0];
    let tvar = tape.constant(teacher.clone());
    let mut total: Option<Var> = None;
    for bi in 0..b {
        let s = tape.rows_from_channels(student, bi)?;
        let t = tape.rows_from_channels(tvar, bi)?;
        let sim_s = tape.matmul_nt(s, s)?;
        let sim_t = tape.matmul_nt(t, t)?;
        let p = tape.softmax(sim_t, 1, tau)?;
        let q = tape.softmax(sim_s, 1, tau)?;
        let kl = tape.kl_div(p, q, 1)?;
        let m = tape.mean(kl);
        total = Some(match total {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    let total = total.expect("batch is non-empty");
    Ok(tape.scale(total, 1.0 / b as f64))
}

// ---------------------------------------------------------------------------
// Plain regression baseline

/// Absolute-activation baseline: `(MSE of heatmaps, MSE of descriptor
/// maps)`. The teacher map is cut to the student's width and renormalized
/// when the widths differ.
pub fn mse_baseline(
    tape: &mut Tape,
    heat: Var,
    desc: Var,
    teacher_heat: &Tensor,
    teacher_desc: &Tensor,
) -> Result<(Var, Var)> {
    let (b, d, h, w) = tape.value(desc).dims4("mse_baseline")?;
    let (_, dt, _, _) = teacher_desc.dims4("mse_baseline")?;
    if dt < d {
        return Err(Error::shape("mse_baseline", "descriptor width", format!("teacher {dt} < student {d}")));
    }
    let plane = h * w;
    let mut target = vec![0.0; b * d * plane];
    for bi in 0..b {
        for loc in 0..plane {
            let v: Vec<f64> = (0..d).map(|c| teacher_desc.data()[(bi * dt + c) * plane + loc]).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for (c, x) in v.into_iter().enumerate() {
                target[(bi * d + c) * plane + loc] = x / n;
            }
        }
    }
    let target = Tensor::new(vec![b, d, h, w], target)?;
    let th = tape.constant(teacher_heat.clone());
    let dh = tape.sub(heat, th)?;
    let dh = tape.square(dh);
    let lh = tape.mean(dh);
    let td = tape.constant(target);
    let dd = tape.sub(desc, td)?;
    let dd = tape.square(dd);
    let ld = tape.mean(dd);
    Ok((lh, ld))
}

// ---------------------------------------------------------------------------
// Uncertainty weighting

/// Learnable log-variances of the two tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UncertaintyWeights {
    pub s_det: f64,
    pub s_desc: f64,
}

/// `exp(-s_det) l_det + s_det + exp(-s_desc) l_desc + s_desc`.
pub fn uncertainty_weighted_total(tape: &mut Tape, l_det: Var, l_desc: Var, s_det: Var, s_desc: Var) -> Result<Var> {
    let term = |tape: &mut Tape, l: Var, s: Var| -> Result<Var> {
        let neg = tape.scale(s, -1.0);
        let prec = tape.exp(neg);
        let weighted = tape.mul(prec, l)?;
        tape.add(weighted, s)
    };
    let a = term(tape, l_det, s_det)?;
    let b = term(tape, l_desc, s_desc)?;
    tape.add(a, b)
}

/// Validation aggregate: the plain sum, independent of the weights.
pub fn validation_total(l_det: f64, l_desc: f64) -> f64 {
    l_det + l_desc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta_map(h: usize, w: usize, pts: &[(usize, usize, f64)]) -> Tensor {
        let mut p = Plane::new(h, w);
        for &(x, y, v) in pts {
            p.set(y, x, v);
        }
        p.to_tensor()
    }

    fn dummy_desc() -> Tensor {
        Tensor::ones(&[1, 1, 2, 2])
    }

    #[test]
    fn single_delta_target() {
        let t = preprocess_teacher(&delta_map(16, 16, &[(10, 10, 1.0)]), dummy_desc(), 4, 0.005, SIGMA_G).unwrap();
        assert_eq!(t.hard_points, vec![(10, 10)]);
        let m = Plane::from_tensor(&t.soft_map, 0, 0).unwrap();
        assert_eq!(m.get(10, 10), 1.0);
        let expected = (-1.0 / (2.0 * SIGMA_G * SIGMA_G)).exp();
        assert!((m.get(10, 11) - expected).abs() < 1e-15);
        // beyond 3 sigma
        assert_eq!(m.get(10, 15), 0.0);
    }

    #[test]
    fn close_deltas_keep_the_stronger() {
        let t = preprocess_teacher(&delta_map(16, 16, &[(5, 5, 0.9), (8, 5, 0.8)]), dummy_desc(), 4, 0.005, SIGMA_G)
            .unwrap();
        assert_eq!(t.hard_points, vec![(5, 5)]);
    }

    #[test]
    fn sub_threshold_map_is_empty() {
        let heat = Tensor::full(&[1, 1, 8, 8], 0.004);
        let t = preprocess_teacher(&heat, dummy_desc(), 4, 0.005, SIGMA_G).unwrap();
        assert!(t.hard_points.is_empty());
        assert!(t.soft_map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_exponent_rejected() {
        let mut tape = Tape::new();
        let t = preprocess_teacher(&delta_map(8, 8, &[(2, 2, 1.0)]), dummy_desc(), 4, 0.005, SIGMA_G).unwrap();
        let p = tape.constant(Tensor::full(&[1, 1, 8, 8], 0.5));
        assert!(focal_loss(&mut tape, p, &[&t], -1.0, 4.0).is_err());
        assert!(focal_loss(&mut tape, p, &[&t], 2.0, -0.5).is_err());
    }

    #[test]
    fn uncertainty_zero_log_variance_is_plain_sum() {
        let mut tape = Tape::new();
        let ld = tape.constant(Tensor::scalar(0.7));
        let le = tape.constant(Tensor::scalar(1.9));
        let z1 = tape.param(Tensor::scalar(0.0));
        let z2 = tape.param(Tensor::scalar(0.0));
        let t = uncertainty_weighted_total(&mut tape, ld, le, z1, z2).unwrap();
        assert_eq!(tape.value(t).item(), 0.7 + 1.9);
        assert_eq!(validation_total(0.7, 1.9), 0.7 + 1.9);
    }
}
