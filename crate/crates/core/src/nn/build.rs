//! Graph construction: stem, block region, detector and descriptor heads.

use crate::autograd::BatchNormStats;
use crate::nn::arch::{ActKind, ArchSpec, BlockChoice, BlockKind, NormKind, StemSpec, TEACHER_DESCRIPTOR_DIM};
use crate::nn::graph::{Graph, Op, ValueRef};
use crate::nn::model::ModelGraph;
use crate::nn::params::ParamStore;
use crate::error::Result;
use crate::tensor::Tensor;

pub(crate) struct Builder {
    pub graph: Graph,
    pub params: ParamStore,
    seed: u64,
    norm: NormKind,
    act: ActKind,
}

impl Builder {
    pub fn new(seed: u64, norm: NormKind, act: ActKind) -> Self {
        Builder {
            graph: Graph::new(),
            params: ParamStore::new(),
            seed,
            norm,
            act,
        }
    }

    pub fn conv(&mut self, name: &str, x: ValueRef, cin: usize, cout: usize, k: usize, stride: usize) -> ValueRef {
        self.params.init_conv(self.seed, name, cout, cin, k);
        self.graph.push(name, Op::Conv { stride, pad: k / 2 }, vec![x])
    }

    pub fn norm(&mut self, name: &str, x: ValueRef, c: usize) -> ValueRef {
        match self.norm {
            NormKind::Affine => {
                self.params.insert(format!("{name}.scale"), Tensor::ones(&[c]), true);
                self.params.insert(format!("{name}.bias"), Tensor::zeros(&[c]), true);
                self.graph.push(name, Op::Affine, vec![x])
            }
            NormKind::BatchNorm => {
                self.params.insert(format!("{name}.gamma"), Tensor::ones(&[c]), true);
                self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]), true);
                self.params.insert_stats(name, BatchNormStats::new(c));
                self.graph.push(name, Op::BatchNorm, vec![x])
            }
        }
    }

    pub fn act(&mut self, name: &str, x: ValueRef) -> ValueRef {
        self.graph.push(name, Op::Act(self.act), vec![x])
    }

    fn conv_norm_act(&mut self, p: &str, x: ValueRef, cin: usize, cout: usize, k: usize, stride: usize) -> ValueRef {
        let y = self.conv(&format!("{p}.conv"), x, cin, cout, k, stride);
        let y = self.norm(&format!("{p}.norm"), y, cout);
        self.act(&format!("{p}.act"), y)
    }

    fn shortcut(&mut self, p: &str, x: ValueRef, cin: usize, cout: usize) -> ValueRef {
        if cin == cout {
            x
        } else {
            self.conv(&format!("{p}.proj"), x, cin, cout, 1, 1)
        }
    }

    /// Appends one block reading `x` with `cin` channels; returns its output.
    pub fn block(&mut self, p: &str, x: ValueRef, cin: usize, b: &BlockChoice) -> ValueRef {
        let (k, c) = (b.kernel, b.channels);
        match b.kind {
            BlockKind::StandardConv => self.conv_norm_act(p, x, cin, c, k, 1),
            BlockKind::Residual => {
                let y = self.conv_norm_act(&format!("{p}.a"), x, cin, c, k, 1);
                let y = self.conv(&format!("{p}.b.conv"), y, c, c, k, 1);
                let y = self.norm(&format!("{p}.b.norm"), y, c);
                let s = self.shortcut(p, x, cin, c);
                let y = self.graph.push(format!("{p}.add"), Op::Add, vec![y, s]);
                self.act(&format!("{p}.act"), y)
            }
            BlockKind::Bottleneck => {
                let mid = (c / 4).max(1);
                let y = self.conv_norm_act(&format!("{p}.reduce"), x, cin, mid, 1, 1);
                let y = self.conv_norm_act(&format!("{p}.mid"), y, mid, mid, k, 1);
                let y = self.conv(&format!("{p}.expand.conv"), y, mid, c, 1, 1);
                let y = self.norm(&format!("{p}.expand.norm"), y, c);
                let s = self.shortcut(p, x, cin, c);
                let y = self.graph.push(format!("{p}.add"), Op::Add, vec![y, s]);
                self.act(&format!("{p}.act"), y)
            }
            BlockKind::InceptionLike => {
                let half = c / 2;
                let a = self.conv_norm_act(&format!("{p}.b1"), x, cin, half, 1, 1);
                let b = self.conv_norm_act(&format!("{p}.bk"), x, cin, c - half, k, 1);
                self.graph.push(format!("{p}.concat"), Op::Concat, vec![a, b])
            }
            BlockKind::Zero => self.graph.push(format!("{p}.zero"), Op::Zero { channels: c }, vec![x]),
        }
    }

    /// Stride-2 convolutions: the first at half width, the rest at full width.
    pub fn stem(&mut self, stem: &StemSpec, depth: usize) -> ValueRef {
        let mut x = ValueRef::Input;
        let mut cin = 1;
        for i in 0..depth {
            let cout = if i == 0 && depth > 1 {
                (stem.channels / 2).max(1)
            } else {
                stem.channels
            };
            x = self.conv_norm_act(&format!("stem.{i}"), x, cin, cout, 3, 2);
            cin = cout;
        }
        x
    }

    pub fn heads(&mut self, x: ValueRef, cin: usize, spec: &ArchSpec) {
        let r = spec.detector_upscale;
        let d = self.conv("det.conv", x, cin, r * r, 3, 1);
        let d = self.graph.push("det.shuffle", Op::PixelShuffle(r), vec![d]);
        self.graph.heatmap = self.graph.push("det.sigmoid", Op::Sigmoid, vec![d]);
        let e = self.conv("desc.conv", x, cin, spec.descriptor_dim, 3, 1);
        self.graph.descmap = self.graph.push("desc.l2", Op::L2Normalize, vec![e]);
    }

    pub fn finish(self, spec: ArchSpec) -> ModelGraph {
        ModelGraph {
            spec,
            graph: self.graph,
            params: self.params,
        }
    }
}

/// Student network for `spec`, parameters initialized from `seed`.
pub fn build_student(spec: &ArchSpec, seed: u64) -> Result<ModelGraph> {
    spec.validate()?;
    let mut b = Builder::new(seed, spec.norm_kind, spec.act_kind);
    let mut x = b.stem(&spec.stem, spec.stem_depth());
    let mut cin = spec.stem.channels;
    for (i, choice) in spec.blocks.iter().enumerate() {
        x = b.block(&format!("blocks.{i}"), x, cin, choice);
        cin = choice.channels;
    }
    b.heads(x, cin, spec);
    Ok(b.finish(spec.clone()))
}

pub const TEACHER_WIDTH: usize = 64;

pub fn teacher_spec() -> ArchSpec {
    ArchSpec {
        stem: StemSpec {
            channels: TEACHER_WIDTH,
            ..ArchSpec::default().stem
        },
        blocks: vec![BlockChoice::new(BlockKind::StandardConv, 3, TEACHER_WIDTH); 2],
        descriptor_dim: TEACHER_DESCRIPTOR_DIM,
        ..ArchSpec::default()
    }
}

/// Wider frozen random network with a 256-dim descriptor head.
pub fn build_teacher(seed: u64) -> ModelGraph {
    let mut m = build_student(&teacher_spec(), seed).expect("teacher spec is valid");
    m.params.freeze();
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_student_parameter_count() {
        // stem 192 + 4704 + 9312, blocks 3 * 9312, heads 2 * 18496
        let m = build_student(&ArchSpec::default(), 0).unwrap();
        assert_eq!(m.count_params(), 79136);
        let bn = build_student(&ArchSpec::with_kinds(NormKind::BatchNorm, ActKind::Relu), 0).unwrap();
        assert_eq!(bn.count_params(), 79136);
    }

    #[test]
    fn block_kinds_build_and_project() {
        for kind in [BlockKind::Residual, BlockKind::Bottleneck, BlockKind::InceptionLike] {
            let mut spec = ArchSpec::default();
            spec.blocks = vec![BlockChoice::new(kind, 5, 24), BlockChoice::new(kind, 3, 24)];
            let m = build_student(&spec, 1).unwrap();
            let has_proj = m.params.get("blocks.0.proj.weight").is_ok();
            assert_eq!(has_proj, kind != BlockKind::InceptionLike, "{kind:?}");
            assert!(m.params.get("blocks.1.proj.weight").is_err());
        }
    }
}
