//! Inference protocol: NMS, adaptive EMA threshold, descriptor sampling and
//! mutual-nearest-neighbour matching.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Plane;
use crate::tensor::Tensor;

pub const NMS_RADIUS: usize = 4;
pub const TOP_FRACTION: f64 = 0.005;
pub const KAPPA: f64 = 0.8;
pub const RHO: f64 = 0.9;
/// Fixed thresholds of the threshold sweep.
pub const FIXED_THRESHOLDS: [f64; 3] = [0.005, 0.1, 0.3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// `a` beats `b`: higher value, ties to the smaller raster index.
#[inline]
fn beats(va: f64, ia: usize, vb: f64, ib: usize) -> bool {
    va > vb || (va == vb && ia < ib)
}

/// Pixels that beat every other pixel within Chebyshev radius `radius`,
/// in raster order. Only positive pixels are candidates.
///
/// Separable: the window winner is the column-wise winner of the row-wise
/// winners, since "beats" is a strict total order.
pub fn nms(heat: &Plane, radius: usize) -> Vec<Keypoint> {
    let (h, w) = (heat.h, heat.w);
    let r = radius as isize;
    let mut row_best = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = y * w + x;
            for dx in -r..=r {
                let xx = x as isize + dx;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                let i = y * w + xx as usize;
                if beats(heat.data[i], i, heat.data[best], best) {
                    best = i;
                }
            }
            row_best[y * w + x] = best;
        }
    }
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let me = y * w + x;
            if heat.data[me] <= 0.0 {
                continue;
            }
            let mut best = row_best[me];
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                let i = row_best[yy as usize * w + x];
                if beats(heat.data[i], i, heat.data[best], best) {
                    best = i;
                }
            }
            if best == me {
                out.push(Keypoint { x, y, score: heat.data[me] });
            }
        }
    }
    out
}

/// Direct O(H·W·r²) scan used as the reference for [`nms`].
pub fn nms_brute_force(heat: &Plane, radius: usize) -> Vec<Keypoint> {
    let r = radius as isize;
    let mut out = Vec::new();
    for y in 0..heat.h {
        for x in 0..heat.w {
            let me = y * heat.w + x;
            let v = heat.data[me];
            if v <= 0.0 {
                continue;
            }
            let mut keep = true;
            'window: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if (dy, dx) == (0, 0) || yy < 0 || xx < 0 || yy >= heat.h as isize || xx >= heat.w as isize {
                        continue;
                    }
                    let i = yy as usize * heat.w + xx as usize;
                    if !beats(v, me, heat.data[i], i) {
                        keep = false;
                        break 'window;
                    }
                }
            }
            if keep {
                out.push(Keypoint { x, y, score: v });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveState {
    pub ema: f64,
    /// EMA decay rho.
    pub decay: f64,
    pub top_fraction: f64,
    /// Threshold multiplier kappa.
    pub multiplier: f64,
}

impl Default for AdaptiveState {
    fn default() -> Self {
        AdaptiveState {
            ema: 0.0,
            decay: RHO,
            top_fraction: TOP_FRACTION,
            multiplier: KAPPA,
        }
    }
}

/// Mean of the top `ceil(fraction * n)` values (at least one).
pub fn top_mean(values: &[f64], fraction: f64) -> f64 {
    let k = ((fraction * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / k as f64
}

/// Returns the threshold for this frame and the updated state.
pub fn adaptive_threshold(state: &AdaptiveState, heat: &Plane) -> (f64, AdaptiveState) {
    let m = top_mean(&heat.data, state.top_fraction);
    let ema = state.decay * state.ema + (1.0 - state.decay) * m;
    (state.multiplier * ema, AdaptiveState { ema, ..*state })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed(f64),
    Adaptive,
}

impl ThresholdMode {
    pub fn label(&self) -> String {
        match self {
            ThresholdMode::Fixed(v) => format!("fixed_{v}"),
            ThresholdMode::Adaptive => "adaptive".into(),
        }
    }
}

/// Row-major `[len, dim]` descriptor block (may be empty).
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DescriptorSet {
    pub fn new(dim: usize) -> Self {
        DescriptorSet { dim, data: Vec::new() }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Self {
        let mut s = Self::new(dim);
        rows.iter().for_each(|r| s.push(r));
        s
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }
}

pub struct Extraction {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: DescriptorSet,
    pub threshold: f64,
    pub state: AdaptiveState,
}

/// Bilinear sample of descriptor map item 0 at grid coordinates `(gy, gx)`,
/// clamped to the grid, then L2-renormalized.
pub fn sample_descriptor(desc: &Tensor, gy: f64, gx: f64) -> Result<Vec<f64>> {
    let (_, d, h, w) = desc.dims4("sample_descriptor")?;
    let gy = gy.clamp(0.0, (h - 1) as f64);
    let gx = gx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
    let mut v: Vec<f64> = (0..d)
        .map(|c| {
            let a = desc.at4(0, c, y0, x0);
            let b = desc.at4(0, c, y0, x1);
            let cc = desc.at4(0, c, y1, x0);
            let dd = desc.at4(0, c, y1, x1);
            (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * cc + fx * dd)
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(v)
}

/// NMS, thresholding, then descriptor sampling at `(x/s, y/s)` where `s` is
/// the heatmap-to-descriptor-grid ratio.
pub fn extract(heat: &Plane, desc: &Tensor, state: &AdaptiveState, mode: ThresholdMode, radius: usize) -> Result<Extraction> {
    let (_, d, gh, gw) = desc.dims4("extract")?;
    if heat.h % gh != 0 || heat.w % gw != 0 || heat.h / gh != heat.w / gw {
        return Err(Error::shape(
            "extract",
            "descriptor grid",
            format!("heatmap {}x{} vs grid {gh}x{gw}", heat.h, heat.w),
        ));
    }
    let s = (heat.h / gh) as f64;
    let (threshold, state) = match mode {
        ThresholdMode::Fixed(t) => (t, *state),
        ThresholdMode::Adaptive => adaptive_threshold(state, heat),
    };
    let keypoints: Vec<Keypoint> = nms(heat, radius).into_iter().filter(|k| k.score >= threshold).collect();
    let mut descriptors = DescriptorSet::new(d);
    for k in &keypoints {
        descriptors.push(&sample_descriptor(desc, k.y as f64 / s, k.x as f64 / s)?);
    }
    Ok(Extraction {
        keypoints,
        descriptors,
        threshold,
        state,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mutual nearest neighbours under L2; ties go to the lower index.
/// Pairs are ordered by `a`.
pub fn match_descriptors(a: &DescriptorSet, b: &DescriptorSet) -> Vec<Match> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let (na, nb) = (a.len(), b.len());
    // Row minima in parallel; every row also reports its distances so the
    // column minima come from the same numbers.
    let rows: Vec<(usize, f64, Vec<f64>)> = (0..na)
        .into_par_iter()
        .map(|i| {
            let d: Vec<f64> = (0..nb).map(|j| sq_dist(a.row(i), b.row(j))).collect();
            let (mut best, mut bd) = (0, d[0]);
            for (j, &v) in d.iter().enumerate().skip(1) {
                if v < bd {
                    best = j;
                    bd = v;
                }
            }
            (best, bd, d)
        })
        .collect();
    let mut col_best = vec![(usize::MAX, f64::INFINITY); nb];
    for (i, (_, _, d)) in rows.iter().enumerate() {
        for (j, &v) in d.iter().enumerate() {
            if v < col_best[j].1 || col_best[j].0 == usize::MAX {
                col_best[j] = (i, v);
            }
        }
    }
    rows.iter()
        .enumerate()
        .filter(|(i, (j, _, _))| col_best[*j].0 == *i)
        .map(|(i, (j, d2, _))| Match { a: i, b: *j, distance: d2.sqrt() })
        .collect()
}

/// Double-argmin reference for [`match_descriptors`].
pub fn match_brute_force(a: &DescriptorSet, b: &DescriptorSet) -> Vec<Match> {
    let argmin = |q: &[f64], set: &DescriptorSet| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..set.len() {
            let d = sq_dist(q, set.row(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    };
    let mut out = Vec::new();
    for i in 0..a.len() {
        if b.is_empty() {
            break;
        }
        let (j, d2) = argmin(a.row(i), b);
        if argmin(b.row(j), a).0 == i {
            out.push(Match { a: i, b: j, distance: d2.sqrt() });
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorSidecar {
    count: usize,
    dim: usize,
    dtype: String,
    data: String,
}

/// Writes `<stem>.csv` (`x,y,score`) and `<stem>.desc.json`, whose `data`
/// field is base64 of little-endian f64 rows.
pub fn write_keypoints(stem: &Path, kps: &[Keypoint], desc: &DescriptorSet) -> Result<()> {
    let csv_path = stem.with_extension("csv");
    let mut csv = String::from("x,y,score\n");
    for k in kps {
        csv.push_str(&format!("{},{},{}\n", k.x, k.y, k.score));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let bytes: Vec<u8> = desc.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let side = DescriptorSidecar {
        count: desc.len(),
        dim: desc.dim,
        dtype: "f64le".into(),
        data: B64.encode(bytes),
    };
    let side_path = stem.with_extension("desc.json");
    std::fs::write(&side_path, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&side_path, e))
}

pub fn read_keypoints(stem: &Path) -> Result<(Vec<Keypoint>, DescriptorSet)> {
    let csv_path = stem.with_extension("csv");
    let text = std::fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let bad = |line: &str| Error::invalid("read_keypoints", format!("bad csv line `{line}`"));
    let mut kps = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(line));
        }
        kps.push(Keypoint {
            x: f[0].parse().map_err(|_| bad(line))?,
            y: f[1].parse().map_err(|_| bad(line))?,
            score: f[2].parse().map_err(|_| bad(line))?,
        });
    }
    let side_path = stem.with_extension("desc.json");
    let raw = std::fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: DescriptorSidecar = serde_json::from_slice(&raw)?;
    let bytes = B64
        .decode(side.data)
        .map_err(|e| Error::invalid("read_keypoints", e.to_string()))?;
    if bytes.len() != side.count * side.dim * 8 || side.count != kps.len() {
        return Err(Error::invalid("read_keypoints", "descriptor block size does not match keypoint count"));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((kps, DescriptorSet { dim: side.dim, data }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_delta_survives() {
        let mut p = Plane::new(12, 12);
        p.set(5, 7, 0.6);
        let k = nms(&p, 4);
        assert_eq!(k, vec![Keypoint { x: 7, y: 5, score: 0.6 }]);
    }

    #[test]
    fn equal_maxima_keep_smaller_raster_position() {
        let mut p = Plane::new(12, 12);
        p.set(5, 5, 0.7);
        p.set(5, 7, 0.7);
        let k = nms(&p, 4);
        assert_eq!(k.len(), 1);
        assert_eq!((k[0].x, k[0].y), (5, 5));
        p.set(5, 7, 0.0);
        p.set(3, 9, 0.7);
        let k = nms(&p, 4);
        assert_eq!((k[0].x, k[0].y), (9, 3));
    }

    #[test]
    fn zero_heatmap_has_no_survivors() {
        assert!(nms(&Plane::new(16, 16), 4).is_empty());
    }

    #[test]
    fn constant_heatmap_ema_fixed_point() {
        let heat = Plane::from_fn(16, 16, |_, _| 0.4);
        let mut s = AdaptiveState { ema: 0.4, ..Default::default() };
        for _ in 0..5 {
            let (t, next) = adaptive_threshold(&s, &heat);
            assert!((next.ema - 0.4).abs() < 1e-15);
            assert!((t - KAPPA * 0.4).abs() < 1e-15);
            s = next;
        }
    }

    #[test]
    fn ema_converges_geometrically() {
        let c = 0.3;
        let heat = Plane::from_fn(8, 8, |_, _| c);
        let mut s = AdaptiveState { ema: 1.0, ..Default::default() };
        for t in 1..=20 {
            s = adaptive_threshold(&s, &heat).1;
            let expected = RHO.powi(t) * (1.0 - c);
            assert!(((s.ema - c).abs() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_decay_uses_current_frame_only() {
        let heat = Plane::from_fn(10, 10, |y, x| (y * 10 + x) as f64 / 100.0);
        let s = AdaptiveState { ema: 123.0, decay: 0.0, top_fraction: 0.02, multiplier: 1.0 };
        let (t, _) = adaptive_threshold(&s, &heat);
        assert!((t - 0.985).abs() < 1e-12);
    }

    #[test]
    fn grid_node_descriptor_is_exact() {
        let desc = Tensor::from_fn(&[1, 4, 2, 3], |i| ((i * 7) % 5) as f64 + 1.0);
        let v = sample_descriptor(&desc, 1.0, 2.0).unwrap();
        let raw: Vec<f64> = (0..4).map(|c| desc.at4(0, c, 1, 2)).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in v.iter().zip(&raw) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_heatmap_extracts_nothing_and_decays() {
        let heat = Plane::new(16, 16);
        let desc = Tensor::ones(&[1, 2, 2, 2]);
        let s = AdaptiveState { ema: 0.5, ..Default::default() };
        let e = extract(&heat, &desc, &s, ThresholdMode::Adaptive, 4).unwrap();
        assert!(e.keypoints.is_empty());
        assert!((e.state.ema - 0.45).abs() < 1e-15);
    }

    #[test]
    fn identical_sets_match_identically() {
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let mut v = vec![0.0; 5];
                v[i] = 1.0;
                v
            })
            .collect();
        let s = DescriptorSet::from_rows(5, &rows);
        let m = match_descriptors(&s, &s);
        assert_eq!(m.len(), 5);
        assert!(m.iter().all(|m| m.a == m.b && m.distance == 0.0));
    }

    #[test]
    fn keypoint_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("frame0");
        let kps = vec![Keypoint { x: 3, y: 4, score: 0.25 }, Keypoint { x: 9, y: 1, score: 0.125 }];
        let desc = DescriptorSet::from_rows(2, &[vec![0.6, 0.8], vec![1.0, 0.0]]);
        write_keypoints(&stem, &kps, &desc).unwrap();
        let (k2, d2) = read_keypoints(&stem).unwrap();
        assert_eq!(k2, kps);
        assert_eq!(d2, desc);
    }
}
