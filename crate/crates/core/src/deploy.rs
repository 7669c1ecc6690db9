//! Static memory and compute accounting for the build-order schedule.
//!
//! All counts are integers. Every operation writes a fresh buffer (no
//! in-place execution, no reuse), the graph input is live from step 0,
//! and a value dies after the step of its last consumer; the two graph
//! outputs stay live to the end. Scratch buffers such as the im2col
//! patch matrix are not counted. KB means 1024 bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelGraph, Op, ValueRef};
use crate::quant::is_weight;

pub const KB: u64 = 1024;
pub const MB: u64 = 1024 * KB;
/// 4.2 MB of on-chip SRAM, rounded down to whole bytes.
pub const DEFAULT_BUDGET_BYTES: u64 = 42 * MB / 10;
/// Bytes per stored quantization scale (f32).
pub const SCALE_BYTES: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Float32,
    Int8,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Precision::Float32 => 4,
            Precision::Int8 => 1,
        }
    }
}

/// Converts a kilobyte figure (1 KB = 1024 B) to bytes, rounding to nearest.
pub fn kb_to_bytes(kb: f64) -> u64 {
    (kb * KB as f64).round() as u64
}

/// `Σ params × width`; at INT8 each weight tensor also stores one f32
/// scale per output channel.
pub fn weights_size(model: &ModelGraph, precision: Precision) -> u64 {
    let mut total = model.params.count() as u64 * precision.bytes();
    if precision == Precision::Int8 {
        for (name, p) in model.params.iter() {
            if is_weight(name) {
                total += p.value.shape()[0] as u64 * SCALE_BYTES;
            }
        }
    }
    total
}

/// One execution step in liveness terms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub name: String,
    pub inputs: Vec<ValueRef>,
    pub out_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub input_bytes: u64,
    pub steps: Vec<Step>,
    /// Values that must survive to the end.
    pub outputs: Vec<ValueRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveRow {
    pub step: usize,
    pub node: String,
    pub live: Vec<String>,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Liveness {
    pub peak_bytes: u64,
    /// First step reaching the peak.
    pub peak_step: usize,
    pub table: Vec<LiveRow>,
}

fn slot(r: ValueRef) -> usize {
    match r {
        ValueRef::Input => 0,
        ValueRef::Node(i) => i + 1,
    }
}

impl Schedule {
    pub fn of(model: &ModelGraph, input_shape: &[usize], bytes_per_elem: u64) -> Result<Schedule> {
        let shapes = model.graph.infer_shapes(input_shape, &model.params)?;
        let elems = |s: &[usize]| s.iter().product::<usize>() as u64;
        Ok(Schedule {
            input_bytes: elems(input_shape) * bytes_per_elem,
            steps: model
                .graph
                .nodes
                .iter()
                .zip(&shapes)
                .map(|(n, s)| Step {
                    name: n.name.clone(),
                    inputs: n.inputs.clone(),
                    out_bytes: elems(s) * bytes_per_elem,
                })
                .collect(),
            outputs: vec![model.graph.heatmap, model.graph.descmap],
        })
    }

    fn validate(&self) -> Result<()> {
        for (i, s) in self.steps.iter().enumerate() {
            if s.inputs.iter().any(|r| matches!(r, ValueRef::Node(j) if *j >= i)) {
                return Err(Error::invalid("liveness", format!("step {i} reads a value not yet produced")));
            }
        }
        if self.outputs.iter().any(|r| matches!(r, ValueRef::Node(j) if *j >= self.steps.len())) {
            return Err(Error::invalid("liveness", "output refers to a missing step"));
        }
        Ok(())
    }

    /// `(produced, last live step)` per value slot (0 = input).
    fn lifetimes(&self) -> Vec<(usize, usize)> {
        let end = self.steps.len().saturating_sub(1);
        let mut life: Vec<(usize, usize)> = std::iter::once((0, 0)).chain((0..self.steps.len()).map(|i| (i, i))).collect();
        for (i, s) in self.steps.iter().enumerate() {
            for &r in &s.inputs {
                life[slot(r)].1 = life[slot(r)].1.max(i);
            }
        }
        for &r in &self.outputs {
            life[slot(r)].1 = end;
        }
        life
    }

    fn bytes(&self, k: usize) -> u64 {
        if k == 0 {
            self.input_bytes
        } else {
            self.steps[k - 1].out_bytes
        }
    }

    fn value_name(&self, k: usize) -> String {
        if k == 0 {
            "input".into()
        } else {
            self.steps[k - 1].name.clone()
        }
    }

    /// Sweep over allocation and release events.
    pub fn liveness(&self) -> Result<Liveness> {
        self.validate()?;
        let life = self.lifetimes();
        let n = self.steps.len();
        let mut alloc = vec![0u64; n + 1];
        let mut free = vec![0u64; n + 1];
        let mut born: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        let mut dies: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for (k, &(p, d)) in life.iter().enumerate() {
            alloc[p] += self.bytes(k);
            free[d] += self.bytes(k);
            born[p].push(k);
            dies[d].push(k);
        }
        let mut live_set: Vec<usize> = Vec::new();
        let (mut cur, mut peak, mut peak_step) = (0u64, 0u64, 0usize);
        let mut table = Vec::with_capacity(n);
        for i in 0..n {
            cur += alloc[i];
            live_set.extend(&born[i]);
            if cur > peak {
                peak = cur;
                peak_step = i;
            }
            table.push(LiveRow {
                step: i,
                node: self.steps[i].name.clone(),
                live: live_set.iter().map(|&k| self.value_name(k)).collect(),
                bytes: cur,
            });
            cur -= free[i];
            live_set.retain(|k| !dies[i].contains(k));
        }
        Ok(Liveness {
            peak_bytes: peak,
            peak_step,
            table,
        })
    }
}

/// Step-by-step simulation: at each step, sum every value whose lifetime
/// covers it. Quadratic; used as a reference.
pub fn peak_brute_force(s: &Schedule) -> Result<u64> {
    s.validate()?;
    let n = s.steps.len();
    let mut peak = 0;
    for step in 0..n {
        let mut total = 0;
        for k in 0..=n {
            let produced = if k == 0 { 0 } else { k - 1 };
            let mut last = produced;
            for (j, st) in s.steps.iter().enumerate() {
                if st.inputs.iter().any(|&r| slot(r) == k) {
                    last = last.max(j);
                }
            }
            if s.outputs.iter().any(|&r| slot(r) == k) {
                last = n - 1;
            }
            if produced <= step && step <= last {
                total += s.bytes(k);
            }
        }
        peak = peak.max(total);
    }
    Ok(peak)
}

pub fn peak_activation(model: &ModelGraph, input_shape: &[usize], bytes_per_elem: u64) -> Result<Liveness> {
    Schedule::of(model, input_shape, bytes_per_elem)?.liveness()
}

/// Multiply-accumulates per node: convolution `N F H' W' C kh kw`,
/// affine and batch norm one per element, mixtures one per element per
/// candidate, L2 normalization one per input element (the sum of
/// squares). Activations, sigmoid, addition, concatenation and pixel
/// shuffle count zero.
pub fn mac_count(model: &ModelGraph, input_shape: &[usize]) -> Result<u64> {
    let shapes = model.graph.infer_shapes(input_shape, &model.params)?;
    let elems = |s: &[usize]| s.iter().product::<usize>() as u64;
    let mut total = 0u64;
    for (node, out) in model.graph.nodes.iter().zip(&shapes) {
        total += match node.op {
            Op::Conv { .. } => {
                let w = model.params.get(&format!("{}.weight", node.name))?.shape();
                elems(out) * (w[1] * w[2] * w[3]) as u64
            }
            Op::Affine | Op::BatchNorm | Op::L2Normalize => elems(out),
            Op::Mix { .. } => elems(out) * node.inputs.len() as u64,
            _ => 0,
        };
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub fits: bool,
    /// `budget - (weights + peak activations)`; negative when over.
    pub margin: i64,
}

pub fn check_budget(weights_bytes: u64, peak_activation_bytes: u64, budget_bytes: u64) -> Budget {
    let margin = budget_bytes as i64 - (weights_bytes + peak_activation_bytes) as i64;
    Budget { fits: margin >= 0, margin }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub precision: Precision,
    pub input_shape: Vec<usize>,
    pub param_count: u64,
    pub weights_bytes: u64,
    pub peak_activation_bytes: u64,
    pub mac_count: u64,
    pub budget_bytes: u64,
    pub fits: bool,
    pub margin: i64,
    pub live_table: Vec<LiveRow>,
}

pub fn memory_report(model: &ModelGraph, input_shape: &[usize], precision: Precision, budget_bytes: u64) -> Result<MemoryReport> {
    let weights_bytes = weights_size(model, precision);
    let live = peak_activation(model, input_shape, precision.bytes())?;
    let b = check_budget(weights_bytes, live.peak_bytes, budget_bytes);
    Ok(MemoryReport {
        precision,
        input_shape: input_shape.to_vec(),
        param_count: model.params.count() as u64,
        weights_bytes,
        peak_activation_bytes: live.peak_bytes,
        mac_count: mac_count(model, input_shape)?,
        budget_bytes,
        fits: b.fits,
        margin: b.margin,
        live_table: live.table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(sizes: &[u64]) -> Schedule {
        Schedule {
            input_bytes: sizes[0],
            steps: sizes[1..]
                .iter()
                .enumerate()
                .map(|(i, &b)| Step {
                    name: format!("n{i}"),
                    inputs: vec![if i == 0 { ValueRef::Input } else { ValueRef::Node(i - 1) }],
                    out_bytes: b,
                })
                .collect(),
            outputs: vec![ValueRef::Node(sizes.len() - 2)],
        }
    }

    #[test]
    fn linear_chain_peak() {
        let s = chain(&[400, 200, 100]);
        let l = s.liveness().unwrap();
        assert_eq!((l.peak_bytes, l.peak_step), (600, 0));
        assert_eq!(l.table[1].live, vec!["n0", "n1"]);
        assert_eq!(peak_brute_force(&s).unwrap(), 600);
    }

    #[test]
    fn budget_arithmetic() {
        assert_eq!(DEFAULT_BUDGET_BYTES, 4_404_019);
        assert_eq!(check_budget(10, 20, 30), Budget { fits: true, margin: 0 });
        assert!(!check_budget(1000, 1000, KB).fits);
    }
}
