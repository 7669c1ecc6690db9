//! Simulated INT8 post-training quantization.
//!
//! Weights are quantized symmetrically per output channel and activations
//! affinely per tensor; inference runs in f64 with quantize-dequantize
//! pairs on every weight and every produced value. Normalization layers
//! are folded into the preceding convolution first (see [`fold`]).

pub mod calib;
pub mod fold;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::nn::{FeatureModel, ModelGraph, ParamStore};
use crate::tensor::Tensor;

pub use calib::{calibrate, dynamic_range_report, Calibration, Histogram, LayerRange, QuantReport, RangeStats, HISTOGRAM_BINS};
pub use fold::fold_norms;

pub const SYMMETRIC_QMIN: i32 = -127;
pub const SYMMETRIC_QMAX: i32 = 127;
pub const AFFINE_QMIN: i32 = -128;
pub const AFFINE_QMAX: i32 = 127;
pub const DEFAULT_CALIBRATION_BATCHES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SymmetricPerTensor,
    AffinePerTensor,
    /// One scale per slice along axis 0.
    SymmetricPerChannel,
}

impl Scheme {
    pub fn is_symmetric(self) -> bool {
        !matches!(self, Scheme::AffinePerTensor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantParams {
    pub scheme: Scheme,
    /// A single entry unless the scheme is per channel.
    pub scale: Vec<f64>,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
}

/// Scale for a symmetric range `[-m, m]`; an all-zero range gets scale 1.
fn symmetric_scale(max_abs: f64) -> f64 {
    if max_abs > 0.0 {
        max_abs / SYMMETRIC_QMAX as f64
    } else {
        1.0
    }
}

impl QuantParams {
    pub fn symmetric(max_abs: f64) -> Self {
        QuantParams {
            scheme: Scheme::SymmetricPerTensor,
            scale: vec![symmetric_scale(max_abs.abs())],
            zero_point: 0,
            qmin: SYMMETRIC_QMIN,
            qmax: SYMMETRIC_QMAX,
        }
    }

    pub fn symmetric_per_channel(max_abs: &[f64]) -> Self {
        QuantParams {
            scheme: Scheme::SymmetricPerChannel,
            scale: max_abs.iter().map(|m| symmetric_scale(m.abs())).collect(),
            zero_point: 0,
            qmin: SYMMETRIC_QMIN,
            qmax: SYMMETRIC_QMAX,
        }
    }

    /// Affine parameters for `[lo, hi]`, widened to contain zero so that
    /// zero is exactly representable.
    pub fn affine(lo: f64, hi: f64) -> Self {
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        let (scale, zero_point) = if hi > lo {
            let s = (hi - lo) / (AFFINE_QMAX - AFFINE_QMIN) as f64;
            let zp = (AFFINE_QMIN as f64 - lo / s).round().clamp(AFFINE_QMIN as f64, AFFINE_QMAX as f64);
            (s, zp as i32)
        } else {
            (1.0, 0)
        };
        QuantParams {
            scheme: Scheme::AffinePerTensor,
            scale: vec![scale],
            zero_point,
            qmin: AFFINE_QMIN,
            qmax: AFFINE_QMAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("quant_params", d));
        if self.scale.is_empty() || self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("scales must be finite and positive: {:?}", self.scale));
        }
        if self.scheme != Scheme::SymmetricPerChannel && self.scale.len() != 1 {
            return bad(format!("{:?} takes one scale, got {}", self.scheme, self.scale.len()));
        }
        if !(self.qmin <= self.zero_point && self.zero_point <= self.qmax) {
            return bad(format!("zero point {} outside [{}, {}]", self.zero_point, self.qmin, self.qmax));
        }
        let expected = if self.scheme.is_symmetric() {
            (SYMMETRIC_QMIN, SYMMETRIC_QMAX, true)
        } else {
            (AFFINE_QMIN, AFFINE_QMAX, false)
        };
        if (self.qmin, self.qmax) != (expected.0, expected.1) || (expected.2 && self.zero_point != 0) {
            return bad(format!(
                "{:?} requires range [{}, {}]{}",
                self.scheme,
                expected.0,
                expected.1,
                if expected.2 { " and zero point 0" } else { "" }
            ));
        }
        Ok(())
    }

    /// Scale for each element of a tensor of `shape`.
    fn scale_index(&self, shape: &[usize]) -> Result<impl Fn(usize) -> f64 + '_> {
        let per_slice = if self.scheme == Scheme::SymmetricPerChannel {
            let c = shape.first().copied().unwrap_or(1);
            if c != self.scale.len() {
                return Err(Error::shape("quantize", "channels", format!("{} scales for {c} channels", self.scale.len())));
            }
            shape.iter().skip(1).product::<usize>()
        } else {
            usize::MAX
        };
        Ok(move |i: usize| if per_slice == usize::MAX { self.scale[0] } else { self.scale[i / per_slice.max(1)] })
    }

    pub fn quantize_value(&self, x: f64, scale: f64) -> i32 {
        ((x / scale).round() + self.zero_point as f64).clamp(self.qmin as f64, self.qmax as f64) as i32
    }

    pub fn dequantize_value(&self, q: i32, scale: f64) -> f64 {
        (q - self.zero_point) as f64 * scale
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

/// `clamp(round(x / scale) + zero_point, qmin, qmax)`, ties away from zero.
pub fn quantize_tensor(x: &Tensor, qp: &QuantParams) -> Result<IntTensor> {
    let s = qp.scale_index(x.shape())?;
    Ok(IntTensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().enumerate().map(|(i, &v)| qp.quantize_value(v, s(i))).collect(),
    })
}

pub fn dequantize(q: &IntTensor, qp: &QuantParams) -> Result<Tensor> {
    let s = qp.scale_index(&q.shape)?;
    let data = q.data.iter().enumerate().map(|(i, &v)| qp.dequantize_value(v, s(i))).collect();
    Tensor::new(q.shape.clone(), data)
}

pub fn fake_quant(x: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    dequantize(&quantize_tensor(x, qp)?, qp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    /// Weight scheme; activations are always affine per tensor.
    pub scheme: Scheme,
    pub calibration_batches: usize,
    /// Activation range from this histogram percentile instead of min/max.
    pub percentile: Option<f64>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            scheme: Scheme::SymmetricPerChannel,
            calibration_batches: DEFAULT_CALIBRATION_BATCHES,
            percentile: None,
        }
    }
}

/// Tensor name to parameters; serialized as a JSON object.
pub type Manifest = IndexMap<String, QuantParams>;

/// Parameters quantized as weights. Biases and batch-norm shifts stay in
/// float, as int32 accumulators would hold them on device.
pub fn is_weight(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with(".scale") || name.ends_with(".gamma")
}

/// Quantization parameters for every weight and activation of `cal`.
pub fn derive_manifest(model: &ModelGraph, cal: &Calibration, cfg: &QuantConfig) -> Result<Manifest> {
    let mut m = Manifest::new();
    for (name, p) in model.params.iter().filter(|(n, _)| is_weight(n)) {
        let qp = match cfg.scheme {
            Scheme::SymmetricPerChannel => {
                let c = p.value.shape()[0];
                let per = p.value.numel() / c.max(1);
                let max_abs: Vec<f64> = p.value.data().chunks(per.max(1)).map(|ch| ch.iter().fold(0.0f64, |a, v| a.max(v.abs()))).collect();
                QuantParams::symmetric_per_channel(&max_abs)
            }
            Scheme::SymmetricPerTensor => QuantParams::symmetric(p.value.max_abs()),
            Scheme::AffinePerTensor => {
                let d = p.value.data();
                QuantParams::affine(d.iter().cloned().fold(f64::INFINITY, f64::min), d.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            }
        };
        m.insert(name.to_string(), qp);
    }
    for (name, st) in &cal.activations {
        let (lo, hi) = match cfg.percentile {
            Some(p) => st.percentile_range(p)?,
            None => (st.min, st.max),
        };
        m.insert(name.clone(), QuantParams::affine(lo, hi));
    }
    Ok(m)
}

/// Copy of `params` with every weight replaced by its fake-quantized value.
pub fn quantize_weights(params: &ParamStore, manifest: &Manifest) -> Result<ParamStore> {
    let mut out = params.clone();
    for (name, p) in out.iter_mut() {
        if is_weight(name) {
            let qp = manifest.get(name).ok_or_else(|| Error::MissingQuantParams(name.to_string()))?;
            p.value = fake_quant(&p.value, qp)?;
        }
    }
    Ok(out)
}

fn activation_hook<'a>(manifest: &'a Manifest) -> impl FnMut(&str, &mut Tape, crate::autograd::Var) -> Result<crate::autograd::Var> + 'a {
    move |name, tape, v| {
        let qp = manifest.get(name).ok_or_else(|| Error::MissingQuantParams(name.to_string()))?;
        let q = fake_quant(tape.value(v), qp)?;
        Ok(tape.constant(q))
    }
}

/// Eval-mode inference of `model` as given (no folding) with fake
/// quantization on all weights and on every value the graph produces,
/// including the input.
pub fn fake_quant_forward(model: &ModelGraph, manifest: &Manifest, input: &Tensor) -> Result<(Tensor, Tensor)> {
    let q = ModelGraph {
        spec: model.spec.clone(),
        graph: model.graph.clone(),
        params: quantize_weights(&model.params, manifest)?,
    };
    q.infer_hooked(input, &mut activation_hook(manifest))
}

/// A float model prepared for simulated INT8 inference: normalization
/// folded, weights quantized once up front.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub folded: ModelGraph,
    pub manifest: Manifest,
    quantized: ModelGraph,
}

impl QuantizedModel {
    /// `manifest` must refer to the tensors of `fold_norms(model)`.
    pub fn new(model: &ModelGraph, manifest: Manifest) -> Result<Self> {
        let folded = fold_norms(model)?;
        for qp in manifest.values() {
            qp.validate()?;
        }
        for node in &folded.graph.nodes {
            if !manifest.contains_key(&node.name) {
                return Err(Error::MissingQuantParams(node.name.clone()));
            }
        }
        if !manifest.contains_key("input") {
            return Err(Error::MissingQuantParams("input".into()));
        }
        let quantized = ModelGraph {
            spec: folded.spec.clone(),
            graph: folded.graph.clone(),
            params: quantize_weights(&folded.params, &manifest)?,
        };
        Ok(QuantizedModel {
            folded,
            manifest,
            quantized,
        })
    }

    /// Folds, calibrates on `batches` and derives the manifest.
    pub fn calibrated(model: &ModelGraph, batches: &[Tensor], cfg: &QuantConfig) -> Result<(Self, Calibration)> {
        let folded = fold_norms(model)?;
        let cal = calibrate(&folded, batches)?;
        let manifest = derive_manifest(&folded, &cal, cfg)?;
        Ok((Self::new(model, manifest)?, cal))
    }
}

impl FeatureModel for QuantizedModel {
    fn descriptor_dim(&self) -> usize {
        self.quantized.spec.descriptor_dim
    }

    fn downsample(&self) -> usize {
        self.quantized.spec.stem.downsample_factor
    }

    fn infer(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        self.quantized.infer_hooked(image, &mut activation_hook(&self.manifest))
    }
}
