//! Flat graph IR shared by the trainer, the quantizer and the memory report.
//!
//! Nodes are stored in execution order and may only reference earlier
//! nodes or the graph input. Parameterized nodes find their tensors under
//! their own name: `{name}.weight`, `{name}.bias`, `{name}.scale`,
//! `{name}.gamma`, `{name}.beta`, and batch-norm buffers at `{name}`.

use crate::autograd::{conv_output_size, BatchNormMode, BatchNormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::arch::ActKind;
use crate::nn::params::{ParamStore, ParamVars};
use crate::tensor::Tensor;

pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValueRef {
    Input,
    Node(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Conv { stride: usize, pad: usize },
    Affine,
    BatchNorm,
    Act(ActKind),
    Add,
    Concat,
    PixelShuffle(usize),
    Sigmoid,
    L2Normalize,
    Zero { channels: usize },
    /// Convex mixture of the inputs with externally supplied slot weights.
    Mix { slot: usize },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv",
            Op::Affine => "affine",
            Op::BatchNorm => "batchnorm",
            Op::Act(ActKind::Relu) => "relu",
            Op::Act(ActKind::Pwl) => "hardtanh",
            Op::Add => "add",
            Op::Concat => "concat",
            Op::PixelShuffle(_) => "pixel_shuffle",
            Op::Sigmoid => "sigmoid",
            Op::L2Normalize => "l2_normalize",
            Op::Zero { .. } => "zero",
            Op::Mix { .. } => "mix",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<ValueRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub heatmap: ValueRef,
    pub descmap: ValueRef,
}

/// Called with the name of each produced value ("input" for the graph
/// input); may replace the value, e.g. with a fake-quantized copy.
pub type Hook<'a> = dyn FnMut(&str, &mut Tape, Var) -> Result<Var> + 'a;

pub struct ExecOptions<'a> {
    pub mode: BatchNormMode,
    /// One weight vector per mixture slot.
    pub slot_weights: &'a [Var],
}

impl Default for ExecOptions<'_> {
    fn default() -> Self {
        ExecOptions {
            mode: BatchNormMode::Eval,
            slot_weights: &[],
        }
    }
}

pub struct Executed {
    pub input: Var,
    pub values: Vec<Var>,
    pub heatmap: Var,
    pub descmap: Var,
    /// Running statistics after a train-mode pass, for the caller to commit.
    pub stats: Vec<(String, BatchNormStats)>,
}

fn apply_act(tape: &mut Tape, kind: ActKind, x: Var) -> Result<Var> {
    match kind {
        ActKind::Relu => Ok(tape.relu(x)),
        ActKind::Pwl => tape.hardtanh(x, -1.0, 1.0),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            heatmap: ValueRef::Input,
            descmap: ValueRef::Input,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, op: Op, inputs: Vec<ValueRef>) -> ValueRef {
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs,
        });
        ValueRef::Node(self.nodes.len() - 1)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn execute(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        store: &ParamStore,
        x: Var,
        opts: &ExecOptions<'_>,
        mut hook: Option<&mut Hook<'_>>,
    ) -> Result<Executed> {
        let input = match hook.as_mut() {
            Some(h) => h("input", tape, x)?,
            None => x,
        };
        let mut values: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let mut stats = Vec::new();
        for node in &self.nodes {
            let arg = |k: usize| match node.inputs[k] {
                ValueRef::Input => input,
                ValueRef::Node(i) => values[i],
            };
            let p = |suffix: &str| vars.get(&format!("{}.{suffix}", node.name));
            let out = match &node.op {
                Op::Conv { stride, pad } => {
                    let (w, b) = (p("weight")?, p("bias")?);
                    tape.conv2d(arg(0), w, Some(b), *stride, *pad)?
                }
                Op::Affine => tape.affine_channel(arg(0), p("scale")?, p("bias")?)?,
                Op::BatchNorm => {
                    let mut s = store.stats(&node.name)?.clone();
                    let y = tape.batchnorm2d(arg(0), p("gamma")?, p("beta")?, &mut s, opts.mode)?;
                    if opts.mode == BatchNormMode::Train {
                        stats.push((node.name.clone(), s));
                    }
                    y
                }
                Op::Act(kind) => apply_act(tape, *kind, arg(0))?,
                Op::Add => tape.add(arg(0), arg(1))?,
                Op::Concat => {
                    let parts: Vec<Var> = (0..node.inputs.len()).map(arg).collect();
                    tape.concat_channels(&parts)?
                }
                Op::PixelShuffle(r) => tape.pixel_shuffle(arg(0), *r)?,
                Op::Sigmoid => tape.sigmoid(arg(0)),
                Op::L2Normalize => tape.l2_normalize(arg(0), 1, L2_EPS)?,
                Op::Zero { channels } => {
                    let (n, _, h, w) = tape.value(arg(0)).dims4("zero")?;
                    tape.constant(Tensor::zeros(&[n, *channels, h, w]))
                }
                Op::Mix { slot } => {
                    let weights = *opts
                        .slot_weights
                        .get(*slot)
                        .ok_or_else(|| Error::invalid("mix", format!("no weights supplied for slot {slot}")))?;
                    let parts: Vec<Var> = (0..node.inputs.len()).map(arg).collect();
                    tape.mix(weights, &parts)?
                }
            };
            let out = match hook.as_mut() {
                Some(h) => h(&node.name, tape, out)?,
                None => out,
            };
            values.push(out);
        }
        let pick = |r: ValueRef| match r {
            ValueRef::Input => input,
            ValueRef::Node(i) => values[i],
        };
        Ok(Executed {
            input,
            heatmap: pick(self.heatmap),
            descmap: pick(self.descmap),
            values,
            stats,
        })
    }

    /// Output shape of every node for an `[N, C, H, W]` input, without
    /// running the graph.
    pub fn infer_shapes(&self, input: &[usize], store: &ParamStore) -> Result<Vec<Vec<usize>>> {
        if input.len() != 4 {
            return Err(Error::shape("infer_shapes", "rank", format!("expected 4-d input, got {input:?}")));
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let arg = |k: usize| -> &[usize] {
                match node.inputs[k] {
                    ValueRef::Input => input,
                    ValueRef::Node(i) => &shapes[i],
                }
            };
            let s = match &node.op {
                Op::Conv { stride, pad } => {
                    let w = store.get(&format!("{}.weight", node.name))?.shape();
                    let a = arg(0);
                    let oh = conv_output_size(a[2], w[2], *stride, *pad);
                    let ow = conv_output_size(a[3], w[3], *stride, *pad);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => vec![a[0], w[0], oh, ow],
                        _ => return Err(Error::shape("infer_shapes", "spatial", format!("node {}", node.name))),
                    }
                }
                Op::Concat => {
                    let mut s = arg(0).to_vec();
                    s[1] = (0..node.inputs.len()).map(|k| arg(k)[1]).sum();
                    s
                }
                Op::PixelShuffle(r) => {
                    let a = arg(0);
                    vec![a[0], a[1] / (r * r), a[2] * r, a[3] * r]
                }
                Op::Zero { channels } => {
                    let a = arg(0);
                    vec![a[0], *channels, a[2], a[3]]
                }
                _ => arg(0).to_vec(),
            };
            shapes.push(s);
        }
        Ok(shapes)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
