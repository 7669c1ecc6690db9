//! Range calibration and dynamic-range diagnostics.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::quant::{is_weight, Manifest, QuantParams};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64) -> Self {
        Histogram {
            lo,
            hi,
            bins: vec![0; HISTOGRAM_BINS],
        }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins.len() as f64
    }

    /// Values outside `[lo, hi]` land in the edge bins.
    pub fn bin(&self, v: f64) -> usize {
        let n = self.bins.len();
        if self.hi <= self.lo {
            return 0;
        }
        let k = ((v - self.lo) / (self.hi - self.lo) * n as f64).floor();
        k.clamp(0.0, (n - 1) as f64) as usize
    }

    pub fn add(&mut self, values: &[f64]) {
        for &v in values {
            let b = self.bin(v);
            self.bins[b] += 1;
        }
    }

    pub fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.width()
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }

    fn merge(&mut self, other: &Histogram) -> Result<()> {
        if (self.lo, self.hi, self.bins.len()) != (other.lo, other.hi, other.bins.len()) {
            return Err(Error::invalid("histogram", "cannot merge histograms over different ranges"));
        }
        self.bins.iter_mut().zip(&other.bins).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Running range of one tensor, overall and per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub min: f64,
    pub max: f64,
    pub count: u64,
    /// `(min, max)` per channel.
    pub channels: Vec<(f64, f64)>,
    pub histogram: Option<Histogram>,
}

impl RangeStats {
    /// Ranges of `t` with channels along `axis` (axis 1 for activations,
    /// 0 for weights).
    pub fn of(t: &Tensor, axis: usize) -> Self {
        let shape = t.shape();
        let c = shape.get(axis).copied().unwrap_or(1);
        let inner: usize = shape.iter().skip(axis + 1).product();
        let mut channels = vec![(f64::INFINITY, f64::NEG_INFINITY); c];
        for (i, &v) in t.data().iter().enumerate() {
            let ch = &mut channels[(i / inner.max(1)) % c.max(1)];
            ch.0 = ch.0.min(v);
            ch.1 = ch.1.max(v);
        }
        RangeStats {
            min: channels.iter().map(|c| c.0).fold(f64::INFINITY, f64::min),
            max: channels.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max),
            count: t.numel() as u64,
            channels,
            histogram: None,
        }
    }

    /// Min of mins, max of maxes, summed counts and histograms.
    pub fn merge(&mut self, other: &RangeStats) -> Result<()> {
        if self.channels.len() != other.channels.len() {
            return Err(Error::invalid("range_stats", "cannot merge stats with different channel counts"));
        }
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
        for (a, b) in self.channels.iter_mut().zip(&other.channels) {
            a.0 = a.0.min(b.0);
            a.1 = a.1.max(b.1);
        }
        match (&mut self.histogram, &other.histogram) {
            (Some(a), Some(b)) => a.merge(b)?,
            (None, None) => {}
            _ => return Err(Error::invalid("range_stats", "cannot merge stats with and without histogram")),
        }
        Ok(())
    }

    /// `[lo, hi]` dropping at most `(100 - p)%` of the mass from each tail,
    /// at bin resolution.
    pub fn percentile_range(&self, p: f64) -> Result<(f64, f64)> {
        let h = self.histogram.as_ref().ok_or_else(|| Error::invalid("percentile_range", "no histogram recorded"))?;
        if !(p > 50.0 && p <= 100.0) {
            return Err(Error::invalid("percentile_range", format!("percentile {p} outside (50, 100]")));
        }
        let tail = ((100.0 - p) / 100.0 * h.total() as f64).floor() as u64;
        let (mut acc, mut lo_bin) = (0u64, 0);
        for (k, &b) in h.bins.iter().enumerate() {
            acc += b;
            if acc > tail {
                lo_bin = k;
                break;
            }
        }
        let (mut acc, mut hi_bin) = (0u64, h.bins.len() - 1);
        for (k, &b) in h.bins.iter().enumerate().rev() {
            acc += b;
            if acc > tail {
                hi_bin = k;
                break;
            }
        }
        let lo = (h.lo + lo_bin as f64 * h.width()).max(self.min);
        let hi = (h.lo + (hi_bin + 1) as f64 * h.width()).min(self.max);
        Ok((lo, hi))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Graph input ("input") and every node output, in execution order.
    pub activations: IndexMap<String, RangeStats>,
    pub weights: IndexMap<String, RangeStats>,
}

type Observed = IndexMap<String, RangeStats>;

fn observe(model: &ModelGraph, batch: &Tensor, ranges: Option<&Observed>) -> Result<Observed> {
    let mut seen = Observed::new();
    let mut hook = |name: &str, tape: &mut crate::autograd::Tape, v| {
        let t = tape.value(v);
        let mut st = RangeStats::of(t, 1);
        if let Some(r) = ranges {
            let g = &r[name];
            let mut h = Histogram::new(g.min, g.max);
            h.add(t.data());
            st.histogram = Some(h);
        }
        seen.insert(name.to_string(), st);
        Ok(v)
    };
    model.infer_hooked(batch, &mut hook)?;
    Ok(seen)
}

fn merge_all(parts: Vec<Observed>) -> Result<Observed> {
    let mut it = parts.into_iter();
    let mut acc = it.next().ok_or(Error::EmptyCalibrationStream)?;
    for p in it {
        for (k, v) in p {
            match acc.get_mut(&k) {
                Some(a) => a.merge(&v)?,
                None => {
                    acc.insert(k, v);
                }
            }
        }
    }
    Ok(acc)
}

/// Observes every activation over `batches` and records the range of
/// every weight tensor. Two passes: min/max, then a histogram over the
/// final range. Batches are processed in parallel and merged in order.
pub fn calibrate(model: &ModelGraph, batches: &[Tensor]) -> Result<Calibration> {
    if batches.is_empty() {
        return Err(Error::EmptyCalibrationStream);
    }
    let first = merge_all(batches.par_iter().map(|b| observe(model, b, None)).collect::<Result<_>>()?)?;
    let activations = merge_all(batches.par_iter().map(|b| observe(model, b, Some(&first))).collect::<Result<_>>()?)?;
    let weights = model
        .params
        .iter()
        .filter(|(n, _)| is_weight(n))
        .map(|(n, p)| (n.to_string(), RangeStats::of(&p.value, 0)))
        .collect();
    Ok(Calibration { activations, weights })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRange {
    pub name: String,
    pub channels: usize,
    pub range_width: f64,
    /// Population variance of the per-channel range widths.
    pub cross_channel_variance: f64,
    pub scale: f64,
    pub saturation_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub layers: Vec<LayerRange>,
    /// Mean of `cross_channel_variance` over layers with two or more channels.
    pub mean_cross_channel_variance: f64,
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Fraction of histogram mass whose bin center rounds outside
/// `[qmin, qmax]`, i.e. would be clamped.
fn saturation(h: &Histogram, qp: &QuantParams) -> f64 {
    let s = qp.scale[0];
    let lo = (qp.qmin - qp.zero_point) as f64 * s - 0.5 * s;
    let hi = (qp.qmax - qp.zero_point) as f64 * s + 0.5 * s;
    let total = h.total();
    if total == 0 {
        return 0.0;
    }
    let clipped: u64 = h
        .bins
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let c = h.center(*k);
            c < lo || c > hi
        })
        .map(|(_, b)| b)
        .sum();
    clipped as f64 / total as f64
}

pub fn dynamic_range_report(cal: &Calibration, manifest: &Manifest) -> Result<QuantReport> {
    let mut layers = Vec::with_capacity(cal.activations.len());
    for (name, st) in &cal.activations {
        let qp = manifest.get(name).ok_or_else(|| Error::MissingQuantParams(name.clone()))?;
        let widths: Vec<f64> = st.channels.iter().map(|(a, b)| b - a).collect();
        layers.push(LayerRange {
            name: name.clone(),
            channels: widths.len(),
            range_width: st.max - st.min,
            cross_channel_variance: variance(&widths),
            scale: qp.scale[0],
            saturation_fraction: st.histogram.as_ref().map_or(0.0, |h| saturation(h, qp)),
        });
    }
    let multi: Vec<f64> = layers.iter().filter(|l| l.channels >= 2).map(|l| l.cross_channel_variance).collect();
    Ok(QuantReport {
        mean_cross_channel_variance: if multi.is_empty() { 0.0 } else { multi.iter().sum::<f64>() / multi.len() as f64 },
        layers,
    })
}
