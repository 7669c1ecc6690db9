//! Homography benchmark: repeatability, matching correctness and the
//! descriptor spread analysis.

pub mod hpatches;
pub mod pnm;
pub mod synth;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::image::Plane;
use crate::keypoints::{extract, match_descriptors, AdaptiveState, DescriptorSet, Keypoint, Match, ThresholdMode, NMS_RADIUS};
use crate::nn::FeatureModel;
use crate::tensor::Tensor;

pub const EPS_PX: f64 = 3.0;
/// Keypoints closer than this to the image border are not scored.
pub const BORDER_MARGIN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Illumination,
    Viewpoint,
}

impl PairKind {
    /// HPatches folder prefix.
    pub fn prefix(&self) -> &'static str {
        match self {
            PairKind::Illumination => "i",
            PairKind::Viewpoint => "v",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequencePair {
    pub name: String,
    pub kind: PairKind,
    /// `[1, 1, H, W]` in `[0, 1]`.
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub h_ab: Homography,
    /// Ground-truth corners of image A when known.
    pub corners_a: Vec<(f64, f64)>,
    /// Their images in B, `None` when warped outside the frame.
    pub corners_b: Vec<Option<(f64, f64)>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: ThresholdMode,
    pub nms_radius: usize,
    pub eps_px: f64,
    pub border: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            mode: ThresholdMode::Adaptive,
            nms_radius: NMS_RADIUS,
            eps_px: EPS_PX,
            border: BORDER_MARGIN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub name: String,
    pub kind: PairKind,
    pub keypoints_a: usize,
    pub keypoints_b: usize,
    pub matches: usize,
    pub repeatability: f64,
    pub correctness: f64,
}

/// Counts of pipeline stage invocations, so that two runs can be shown to
/// have taken the same code path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub forward: usize,
    pub extract: usize,
    pub filter: usize,
    pub matching: usize,
    pub metrics: usize,
}

impl PipelineTrace {
    fn merge(self, o: PipelineTrace) -> PipelineTrace {
        PipelineTrace {
            forward: self.forward + o.forward,
            extract: self.extract + o.extract,
            filter: self.filter + o.filter,
            matching: self.matching + o.matching,
            metrics: self.metrics + o.metrics,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub rep_i: f64,
    pub rep_v: f64,
    pub cor_i: f64,
    pub cor_v: f64,
    pub pairs_i: usize,
    pub pairs_v: usize,
    pub mean_keypoints: f64,
    pub trace: PipelineTrace,
    pub per_pair: Vec<PairResult>,
}

fn inside(x: f64, y: f64, h: usize, w: usize, border: usize) -> bool {
    let b = border as f64;
    x >= b && y >= b && x <= (w - 1) as f64 - b && y <= (h - 1) as f64 - b
}

/// Indices of keypoints away from the border of their own `(h, w)` image
/// whose warp lands away from the border of the other image.
pub fn covisible(kps: &[Keypoint], h: &Homography, own: (usize, usize), other: (usize, usize), border: usize) -> Vec<usize> {
    (0..kps.len())
        .filter(|&i| {
            let (x, y) = (kps[i].x as f64, kps[i].y as f64);
            inside(x, y, own.0, own.1, border)
                && matches!(h.warp_point(x, y), Ok((u, v)) if inside(u, v, other.0, other.1, border))
        })
        .collect()
}

fn nearest_sq(p: (f64, f64), set: &[(f64, f64)]) -> f64 {
    set.iter()
        .map(|q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2))
        .fold(f64::INFINITY, f64::min)
}

fn coords(kps: &[Keypoint]) -> Vec<(f64, f64)> {
    kps.iter().map(|k| (k.x as f64, k.y as f64)).collect()
}

/// `(repeated_a + repeated_b) / (n_a + n_b)`; a point is repeated when its
/// warp lies within `eps` of a detection on the other side.
pub fn repeatability(kps_a: &[Keypoint], kps_b: &[Keypoint], h_ab: &Homography, eps: f64) -> Result<f64> {
    let total = kps_a.len() + kps_b.len();
    if total == 0 {
        return Ok(0.0);
    }
    let h_ba = h_ab.inverse()?;
    let (pa, pb) = (coords(kps_a), coords(kps_b));
    let count = |pts: &[(f64, f64)], other: &[(f64, f64)], h: &Homography| {
        pts.iter()
            .filter(|&&(x, y)| matches!(h.warp_point(x, y), Ok(p) if nearest_sq(p, other) <= eps * eps))
            .count()
    };
    Ok((count(&pa, &pb, h_ab) + count(&pb, &pa, &h_ba)) as f64 / total as f64)
}

/// Fraction of matches with reprojection error below `eps`.
pub fn correctness(matches: &[Match], kps_a: &[Keypoint], kps_b: &[Keypoint], h_ab: &Homography, eps: f64) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    let good = matches
        .iter()
        .filter(|m| {
            let (a, b) = (&kps_a[m.a], &kps_b[m.b]);
            matches!(h_ab.warp_point(a.x as f64, a.y as f64),
                Ok((u, v)) if ((u - b.x as f64).powi(2) + (v - b.y as f64).powi(2)).sqrt() < eps)
        })
        .count();
    good as f64 / matches.len() as f64
}

fn select(kps: &[Keypoint], desc: &DescriptorSet, idx: &[usize]) -> (Vec<Keypoint>, DescriptorSet) {
    let mut d = DescriptorSet::new(desc.dim);
    idx.iter().for_each(|&i| d.push(desc.row(i)));
    (idx.iter().map(|&i| kps[i]).collect(), d)
}

/// Scores one pair from its detections: co-visibility filter, matching,
/// then both metrics.
pub fn evaluate_detections(
    pair: &SequencePair,
    (kps_a, desc_a): (&[Keypoint], &DescriptorSet),
    (kps_b, desc_b): (&[Keypoint], &DescriptorSet),
    cfg: &InferenceConfig,
    trace: &mut PipelineTrace,
) -> Result<PairResult> {
    let (_, _, ha, wa) = pair.image_a.dims4("evaluate")?;
    let (_, _, hb, wb) = pair.image_b.dims4("evaluate")?;
    let h_ba = pair.h_ab.inverse()?;
    trace.filter += 1;
    let (ka, da) = select(kps_a, desc_a, &covisible(kps_a, &pair.h_ab, (ha, wa), (hb, wb), cfg.border));
    let (kb, db) = select(kps_b, desc_b, &covisible(kps_b, &h_ba, (hb, wb), (ha, wa), cfg.border));
    trace.matching += 1;
    let matches = match_descriptors(&da, &db);
    trace.metrics += 1;
    Ok(PairResult {
        name: pair.name.clone(),
        kind: pair.kind,
        keypoints_a: ka.len(),
        keypoints_b: kb.len(),
        matches: matches.len(),
        repeatability: repeatability(&ka, &kb, &pair.h_ab, cfg.eps_px)?,
        correctness: correctness(&matches, &ka, &kb, &pair.h_ab, cfg.eps_px),
    })
}

fn evaluate_pair(model: &dyn FeatureModel, pair: &SequencePair, cfg: &InferenceConfig) -> Result<(PairResult, PipelineTrace)> {
    let mut trace = PipelineTrace::default();
    // adaptive state starts fresh for every pair and runs A then B
    let mut state = AdaptiveState::default();
    let mut out = Vec::with_capacity(2);
    for image in [&pair.image_a, &pair.image_b] {
        trace.forward += 1;
        let (heat, desc) = model.infer(image)?;
        trace.extract += 1;
        let e = extract(&Plane::from_tensor(&heat, 0, 0)?, &desc, &state, cfg.mode, cfg.nms_radius)?;
        state = e.state;
        out.push(e);
    }
    let r = evaluate_detections(
        pair,
        (&out[0].keypoints, &out[0].descriptors),
        (&out[1].keypoints, &out[1].descriptors),
        cfg,
        &mut trace,
    )?;
    Ok((r, trace))
}

pub fn aggregate(mode: String, per_pair: Vec<PairResult>, trace: PipelineTrace) -> EvalReport {
    let mean = |kind: PairKind, f: fn(&PairResult) -> f64| {
        let v: Vec<f64> = per_pair.iter().filter(|p| p.kind == kind).map(f).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let kps: usize = per_pair.iter().map(|p| p.keypoints_a + p.keypoints_b).sum();
    EvalReport {
        mode,
        rep_i: mean(PairKind::Illumination, |p| p.repeatability),
        rep_v: mean(PairKind::Viewpoint, |p| p.repeatability),
        cor_i: mean(PairKind::Illumination, |p| p.correctness),
        cor_v: mean(PairKind::Viewpoint, |p| p.correctness),
        pairs_i: per_pair.iter().filter(|p| p.kind == PairKind::Illumination).count(),
        pairs_v: per_pair.iter().filter(|p| p.kind == PairKind::Viewpoint).count(),
        mean_keypoints: kps as f64 / (2 * per_pair.len()).max(1) as f64,
        trace,
        per_pair,
    }
}

/// Extract, match and score every pair; pairs run in parallel and are
/// reduced in input order.
pub fn run_benchmark(model: &dyn FeatureModel, pairs: &[SequencePair], cfg: &InferenceConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("run_benchmark", "no pairs"));
    }
    let results: Vec<(PairResult, PipelineTrace)> =
        pairs.par_iter().map(|p| evaluate_pair(model, p, cfg)).collect::<Result<_>>()?;
    let trace = results.iter().fold(PipelineTrace::default(), |t, r| t.merge(r.1));
    Ok(aggregate(cfg.mode.label(), results.into_iter().map(|r| r.0).collect(), trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimAnalysis {
    pub dim: usize,
    pub theoretical_std: f64,
    pub measured_std: f64,
    pub ratio: f64,
}

pub fn theoretical_std(dim: usize) -> f64 {
    1.0 / (dim as f64).sqrt()
}

/// Spread of a frame's descriptors: the standard deviation of each
/// component across the frame (centred by the frame mean), averaged over
/// the `D` components, against the isotropic value `1/sqrt(D)`.
pub fn descriptor_std_analysis(desc: &DescriptorSet) -> Result<DimAnalysis> {
    let (n, d) = (desc.len(), desc.dim);
    if n < 2 || d == 0 {
        return Err(Error::invalid("descriptor_std_analysis", format!("need at least 2 descriptors, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(desc.row(i)).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        var.iter_mut()
            .zip(desc.row(i).iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n as f64);
    }
    let measured = var.iter().map(|v| v.sqrt()).sum::<f64>() / d as f64;
    let theoretical = theoretical_std(d);
    Ok(DimAnalysis {
        dim: d,
        theoretical_std: theoretical,
        measured_std: measured,
        ratio: measured / theoretical,
    })
}

/// All `D` descriptors of item 0 of a `[N, D, h, w]` map as rows.
pub fn descriptor_rows(descmap: &Tensor) -> Result<DescriptorSet> {
    let (_, d, h, w) = descmap.dims4("descriptor_rows")?;
    let plane = h * w;
    let mut set = DescriptorSet::new(d);
    for loc in 0..plane {
        let row: Vec<f64> = (0..d).map(|c| descmap.data()[c * plane + loc]).collect();
        set.push(&row);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: usize, y: usize) -> Keypoint {
        Keypoint { x, y, score: 1.0 }
    }

    #[test]
    fn repeatability_distance_law() {
        let id = Homography::identity();
        let (a, b) = ([kp(10, 10)], [kp(12, 10)]);
        assert_eq!(repeatability(&a, &b, &id, 3.0).unwrap(), 1.0);
        assert_eq!(repeatability(&a, &b, &id, 1.0).unwrap(), 0.0);
        assert_eq!(repeatability(&[], &[], &id, 3.0).unwrap(), 0.0);
        assert_eq!(repeatability(&a, &a, &id, 3.0).unwrap(), 1.0);
    }

    #[test]
    fn correctness_limits() {
        let id = Homography::identity();
        let a = [kp(10, 10), kp(40, 40)];
        let b = [kp(40, 41), kp(11, 10)];
        let m = [Match { a: 0, b: 0, distance: 0.0 }, Match { a: 1, b: 1, distance: 0.0 }];
        assert_eq!(correctness(&m, &a, &b, &id, 3.0), 0.0);
        assert_eq!(correctness(&m, &a, &b, &id, f64::INFINITY), 1.0);
        assert_eq!(correctness(&[], &a, &b, &id, 3.0), 0.0);
    }

    #[test]
    fn theoretical_column() {
        let got: Vec<String> = [8, 16, 32, 64, 128, 256, 512].iter().map(|&d| format!("{:.4}", theoretical_std(d))).collect();
        assert_eq!(got, ["0.3536", "0.2500", "0.1768", "0.1250", "0.0884", "0.0625", "0.0442"]);
    }
}
