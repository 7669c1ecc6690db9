use crate::autograd::{BatchNormMode, BatchNormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::arch::ArchSpec;
use crate::nn::graph::{ExecOptions, Executed, Graph, Hook};
use crate::nn::params::{ParamStore, ParamVars};
use crate::tensor::Tensor;

/// Anything that maps a grayscale batch `[N,1,H,W]` to a heatmap
/// `[N,1,H,W]` and a descriptor map `[N,D,H/s,W/s]`.
pub trait FeatureModel: Sync {
    fn descriptor_dim(&self) -> usize;

    fn downsample(&self) -> usize {
        8
    }

    fn infer(&self, image: &Tensor) -> Result<(Tensor, Tensor)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub spec: ArchSpec,
    pub graph: Graph,
    pub params: ParamStore,
}

/// Checks a `[N,1,H,W]` input whose spatial size is divisible by `s`.
pub fn check_image(op: &'static str, x: &Tensor, s: usize) -> Result<()> {
    let (_, c, h, w) = x.dims4(op)?;
    if c != 1 {
        return Err(Error::shape(op, "channels", format!("expected 1 input channel, got {c}")));
    }
    if h % s != 0 {
        return Err(Error::shape(op, "height", format!("{h} not divisible by {s}")));
    }
    if w % s != 0 {
        return Err(Error::shape(op, "width", format!("{w} not divisible by {s}")));
    }
    Ok(())
}

impl ModelGraph {
    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Records a forward pass on `tape` with the given parameter handles.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var, mode: BatchNormMode) -> Result<Executed> {
        check_image("forward", tape.value(x), self.spec.stem.downsample_factor)?;
        let opts = ExecOptions { mode, slot_weights: &[] };
        self.graph.execute(tape, vars, &self.params, x, &opts, None)
    }

    pub fn commit_stats(&mut self, stats: Vec<(String, BatchNormStats)>) -> Result<()> {
        for (name, s) in stats {
            *self.params.stats_mut(&name)? = s;
        }
        Ok(())
    }

    /// Eval-mode forward in which `hook` sees (and may replace) every value.
    pub fn infer_hooked(&self, x: &Tensor, hook: &mut Hook<'_>) -> Result<(Tensor, Tensor)> {
        check_image("infer", x, self.spec.stem.downsample_factor)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self
            .graph
            .execute(&mut tape, &vars, &self.params, xv, &ExecOptions::default(), Some(hook))?;
        Ok((tape.value(out.heatmap).clone(), tape.value(out.descmap).clone()))
    }
}

impl FeatureModel for ModelGraph {
    fn descriptor_dim(&self) -> usize {
        self.spec.descriptor_dim
    }

    fn downsample(&self) -> usize {
        self.spec.stem.downsample_factor
    }

    fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_image("infer", x, self.spec.stem.downsample_factor)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_constant(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self
            .graph
            .execute(&mut tape, &vars, &self.params, xv, &ExecOptions::default(), None)?;
        Ok((tape.value(out.heatmap).clone(), tape.value(out.descmap).clone()))
    }
}
