//! Differentiable block search. Each searchable slot of the supernet runs
//! all of its candidate blocks and mixes their outputs with Gumbel-softmax
//! weights; weights and logits are trained jointly by one optimizer and the
//! temperature is annealed until the choice per slot is effectively fixed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchNormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{uncertainty_weighted_total, validation_total};
use crate::nn::build::Builder;
use crate::nn::graph::{ExecOptions, Executed, Graph, Op};
use crate::nn::model::check_image;
use crate::nn::{build_student, ArchSpec, BlockChoice, BlockKind, ModelGraph, ParamStore, ParamVars, ProceduralTeacher};
use crate::optim::{AdamW, ParamGroup};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{apply_gradients, epoch_images, labelled_batches, loss_terms, make_batch, validate, Dataset, Extra, LossConfig, TrainConfig};

pub const DEFAULT_TAU_START: f64 = 5.0;
pub const DEFAULT_TAU_DECAY: f64 = 0.9;
pub const DEFAULT_TAU_MIN: f64 = 0.1;
pub const DEFAULT_SEARCH_EPOCHS: usize = 20;
/// Logits learn this many times faster than network weights.
pub const DEFAULT_LOGIT_LR_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub tau_start: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            tau_start: DEFAULT_TAU_START,
            tau_min: DEFAULT_TAU_MIN,
            decay: DEFAULT_TAU_DECAY,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(self.tau_min > 0.0) {
            v.push(format!("tau_min must be positive, got {}", self.tau_min));
        }
        if !(self.tau_start >= self.tau_min) {
            v.push(format!("tau_start ({}) must be >= tau_min ({})", self.tau_start, self.tau_min));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            v.push(format!("decay must lie in (0, 1), got {}", self.decay));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(v))
        }
    }

    /// `tau_start * decay^epoch`, floored at `tau_min`; `epoch` counts from 0.
    pub fn tau(&self, epoch: usize) -> f64 {
        (self.tau_start * self.decay.powi(epoch as i32)).max(self.tau_min)
    }
}

/// Search-space defaults: 3x3 and 5x5 convolutions, a 3x3 residual block
/// and a 1x1/3x3 inception block, all at `channels`.
pub fn default_candidates(channels: usize) -> Vec<BlockChoice> {
    vec![
        BlockChoice::new(BlockKind::StandardConv, 3, channels),
        BlockChoice::new(BlockKind::StandardConv, 5, channels),
        BlockChoice::new(BlockKind::Residual, 3, channels),
        BlockChoice::new(BlockKind::InceptionLike, 3, channels),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NasConfig {
    pub slots: usize,
    /// Candidate list shared by every slot.
    pub candidates: Vec<BlockChoice>,
    pub tau_start: f64,
    pub decay: f64,
    pub tau_min: f64,
    pub epochs: usize,
    pub logit_lr_scale: f64,
}

impl Default for NasConfig {
    fn default() -> Self {
        let s = AnnealSchedule::default();
        NasConfig {
            slots: crate::nn::arch::DEFAULT_BLOCK_COUNT,
            candidates: default_candidates(crate::nn::arch::DEFAULT_BLOCK_CHANNELS),
            tau_start: s.tau_start,
            decay: s.decay,
            tau_min: s.tau_min,
            epochs: DEFAULT_SEARCH_EPOCHS,
            logit_lr_scale: DEFAULT_LOGIT_LR_SCALE,
        }
    }
}

impl NasConfig {
    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            tau_start: self.tau_start,
            tau_min: self.tau_min,
            decay: self.decay,
        }
    }
}

/// `softmax((logits + noise) / tau)` along the only axis.
pub fn gumbel_softmax(tape: &mut Tape, logits: Var, tau: f64, noise: &Tensor) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid("gumbel_softmax", format!("temperature must be positive, got {tau}")));
    }
    if tape.value(logits).ndim() != 1 {
        return Err(Error::shape("gumbel_softmax", "logits", format!("expected 1-d, got {:?}", tape.value(logits).shape())));
    }
    let y = tape.add_constant(logits, noise)?;
    tape.softmax(y, 0, tau)
}

/// `k` independent standard Gumbel samples.
pub fn gumbel_noise(rng: &mut ChaCha8Rng, k: usize) -> Tensor {
    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    Tensor::from_fn(&[k], |_| g.sample(rng))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy (nats) of `softmax(logits)`.
pub fn softmax_entropy(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub candidates: Vec<BlockChoice>,
    /// `[K]` architecture logits.
    pub logits: Tensor,
}

/// Fixed stem and heads around mixture slots. Candidate `k` of slot `i`
/// keeps its parameters under `blocks.{i}.cand{k}.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperNet {
    /// Stem, norm, activation and head settings; `blocks` is ignored.
    pub base: ArchSpec,
    pub slots: Vec<Slot>,
    pub graph: Graph,
    pub params: ParamStore,
}

fn cand_prefix(slot: usize, k: usize) -> String {
    format!("blocks.{slot}.cand{k}")
}

impl SuperNet {
    pub fn build(base: &ArchSpec, slots: &[Vec<BlockChoice>], seed: u64) -> Result<Self> {
        let mut flat = base.clone();
        flat.blocks = slots.iter().flatten().copied().collect();
        let mut problems = match flat.validate() {
            Ok(()) => Vec::new(),
            Err(Error::InvalidSpec(v)) => v,
            Err(e) => return Err(e),
        };
        for (i, s) in slots.iter().enumerate() {
            match s.first() {
                None => problems.push(format!("slot {i} has no candidates")),
                Some(c0) if s.iter().any(|c| c.channels != c0.channels) => {
                    problems.push(format!("slot {i}: candidates disagree on output channels"))
                }
                _ => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::InvalidSpec(problems));
        }
        let mut b = Builder::new(seed, base.norm_kind, base.act_kind);
        let mut x = b.stem(&base.stem, base.stem_depth());
        let mut cin = base.stem.channels;
        for (i, cands) in slots.iter().enumerate() {
            let outs: Vec<_> = cands.iter().enumerate().map(|(k, c)| b.block(&cand_prefix(i, k), x, cin, c)).collect();
            x = b.graph.push(format!("blocks.{i}.mix"), Op::Mix { slot: i }, outs);
            cin = cands[0].channels;
        }
        b.heads(x, cin, base);
        Ok(SuperNet {
            base: base.clone(),
            slots: slots
                .iter()
                .map(|c| Slot {
                    candidates: c.clone(),
                    logits: Tensor::zeros(&[c.len()]),
                })
                .collect(),
            graph: b.graph,
            params: b.params,
        })
    }

    pub fn from_config(base: &ArchSpec, nas: &NasConfig, seed: u64) -> Result<Self> {
        Self::build(base, &vec![nas.candidates.clone(); nas.slots], seed)
    }

    pub fn logits(&self) -> Vec<Vec<f64>> {
        self.slots.iter().map(|s| s.logits.data().to_vec()).collect()
    }

    /// Forward pass with one weight vector per slot already on `tape`.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var, mode: BatchNormMode, weights: &[Var]) -> Result<Executed> {
        check_image("supernet", tape.value(x), self.base.stem.downsample_factor)?;
        let opts = ExecOptions {
            mode,
            slot_weights: weights,
        };
        self.graph.execute(tape, vars, &self.params, x, &opts, None)
    }

    /// Eval-mode forward with explicit mixture weights.
    pub fn forward_with_weights(&self, input: &Tensor, weights: &[Tensor]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.params.bind_constant(&mut tape);
        let w: Vec<Var> = weights.iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &vars, x, BatchNormMode::Eval, &w)?;
        Ok((tape.value(out.heatmap).clone(), tape.value(out.descmap).clone()))
    }

    /// Gumbel noise for every slot, drawn in slot order from `rng`.
    pub fn sample_noise(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        self.slots.iter().map(|s| gumbel_noise(rng, s.candidates.len())).collect()
    }

    /// Mixture weights of every slot at temperature `tau`.
    pub fn mixture_weights(&self, tau: f64, noise: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        self.slots
            .iter()
            .zip(noise)
            .map(|(s, n)| {
                let l = tape.constant(s.logits.clone());
                let w = gumbel_softmax(&mut tape, l, tau, n)?;
                Ok(tape.value(w).clone())
            })
            .collect()
    }

    /// Eval-mode forward with Gumbel-softmax weights whose noise comes from
    /// `rng_seed`.
    pub fn mixed_forward(&self, input: &Tensor, tau: f64, rng_seed: u64) -> Result<(Tensor, Tensor)> {
        let noise = self.sample_noise(&mut rng::stream(rng_seed, "gumbel"));
        let w = self.mixture_weights(tau, &noise)?;
        self.forward_with_weights(input, &w)
    }

    /// Per-slot argmax of the logits, lowest index on ties.
    pub fn choice(&self) -> Vec<usize> {
        self.slots.iter().map(|s| argmax(s.logits.data())).collect()
    }

    pub fn chosen_spec(&self) -> ArchSpec {
        let mut spec = self.base.clone();
        spec.blocks = self.slots.iter().zip(self.choice()).map(|(s, k)| s.candidates[k]).collect();
        spec
    }

    /// Discrete student of the chosen candidates, initialized with their
    /// trained parameters and statistics.
    pub fn discretize(&self) -> Result<ModelGraph> {
        let spec = self.chosen_spec();
        let choice = self.choice();
        let mut model = build_student(&spec, 0)?;
        let source = |name: &str| -> String {
            if let Some(rest) = name.strip_prefix("blocks.") {
                if let Some((i, tail)) = rest.split_once('.') {
                    if let Ok(i) = i.parse::<usize>() {
                        return format!("{}.{tail}", cand_prefix(i, choice[i]));
                    }
                }
            }
            name.to_string()
        };
        for (name, p) in model.params.iter_mut() {
            let src = self.params.get(&source(name))?;
            if src.shape() != p.value.shape() {
                return Err(Error::MalformedModel(format!("shape mismatch copying `{name}`")));
            }
            p.value = src.clone();
        }
        let names: Vec<String> = model.params.stats_iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            *model.params.stats_mut(&name)? = self.params.stats(&source(&name))?.clone();
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchEpoch {
    pub epoch: usize,
    pub tau: f64,
    pub logits: Vec<Vec<f64>>,
    /// Entropy of `softmax(logits)` per slot, in nats.
    pub entropy: Vec<f64>,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct SearchOutcome {
    pub spec: ArchSpec,
    pub history: Vec<SearchEpoch>,
}

/// Joint optimization of network weights and logits under the
/// distillation losses, one optimizer with two parameter groups.
#[allow(clippy::too_many_arguments)]
pub fn search(
    net: &mut SuperNet,
    data: &Dataset,
    train_cfg: &TrainConfig,
    loss: &LossConfig,
    schedule: &AnnealSchedule,
    epochs: usize,
    logit_lr_scale: f64,
    seed: u64,
    mut on_epoch: impl FnMut(&SearchEpoch) -> Result<()>,
) -> Result<SearchOutcome> {
    schedule.validate()?;
    let teacher = ProceduralTeacher::new(rng::sub_seed(seed, "teacher"));
    let val = labelled_batches(&teacher, &data.val, train_cfg.batch, loss)?;
    let mut opt = AdamW::new(train_cfg.optimizer());
    let mut noise_rng = rng::stream(seed, "gumbel");
    let mut s_det = Tensor::scalar(0.0);
    let mut s_desc = Tensor::scalar(0.0);
    let no_decay = ParamGroup {
        lr_scale: 1.0,
        weight_decay: 0.0,
    };
    let logit_group = ParamGroup {
        lr_scale: logit_lr_scale,
        weight_decay: 0.0,
    };
    let names: Vec<String> = (0..net.slots.len()).map(|i| format!("blocks.{i}.logits")).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let tau = schedule.tau(epoch);
        let images = epoch_images(data, train_cfg, seed, epoch);
        let (mut sum, mut steps) = (0.0, 0usize);
        for chunk in images.chunks(train_cfg.batch.max(1)) {
            let batch = make_batch(&teacher, chunk, loss)?;
            let noise = net.sample_noise(&mut noise_rng);
            let mut tape = Tape::new();
            let vars = net.params.bind(&mut tape);
            let logit_vars: Vec<Var> = net.slots.iter().map(|s| tape.param(s.logits.clone())).collect();
            let weights: Vec<Var> = logit_vars
                .iter()
                .zip(&noise)
                .map(|(&l, n)| gumbel_softmax(&mut tape, l, tau, n))
                .collect::<Result<_>>()?;
            let x = tape.constant(batch.images.clone());
            let out = net.forward(&mut tape, &vars, x, BatchNormMode::Train, &weights)?;
            let (ld, le) = loss_terms(&mut tape, out.heatmap, out.descmap, &batch, loss)?;
            let sd = tape.param(s_det.clone());
            let se = tape.param(s_desc.clone());
            let total = uncertainty_weighted_total(&mut tape, ld, le, sd, se)?;
            let value = tape.value(total).item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let grads = tape.backward(total)?;
            let SuperNet { slots, params, .. } = &mut *net;
            let mut extras = vec![
                Extra {
                    name: "loss.s_det",
                    var: sd,
                    value: &mut s_det,
                    group: no_decay,
                },
                Extra {
                    name: "loss.s_desc",
                    var: se,
                    value: &mut s_desc,
                    group: no_decay,
                },
            ];
            for ((slot, &var), name) in slots.iter_mut().zip(&logit_vars).zip(&names) {
                extras.push(Extra {
                    name,
                    var,
                    value: &mut slot.logits,
                    group: logit_group,
                });
            }
            apply_gradients(&mut opt, &grads, &vars, params, extras, train_cfg.clip)?;
            for (name, s) in out.stats {
                *net.params.stats_mut(&name)? = s;
            }
            if net.slots.iter().any(|s| !s.logits.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            sum += value;
            steps += 1;
        }
        let zero: Vec<Tensor> = net.slots.iter().map(|s| Tensor::zeros(s.logits.shape())).collect();
        let w = net.mixture_weights(tau, &zero)?;
        let (vd, ve) = validate(&val, loss, |tape, x| {
            let vars = net.params.bind_constant(tape);
            let wv: Vec<Var> = w.iter().map(|t| tape.constant(t.clone())).collect();
            let out = net.forward(tape, &vars, x, BatchNormMode::Eval, &wv)?;
            Ok((out.heatmap, out.descmap))
        })?;
        let val_loss = validation_total(vd, ve);
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let logits = net.logits();
        let rec = SearchEpoch {
            epoch,
            tau,
            entropy: logits.iter().map(|l| softmax_entropy(l)).collect(),
            logits,
            train_loss: sum / steps.max(1) as f64,
            val_loss,
        };
        on_epoch(&rec)?;
        history.push(rec);
    }
    Ok(SearchOutcome {
        spec: net.chosen_spec(),
        history,
    })
}

/// Random logits for tests and warm starts.
pub fn randomize_logits(net: &mut SuperNet, rng: &mut ChaCha8Rng, scale: f64) {
    for s in &mut net.slots {
        s.logits.data_mut().iter_mut().for_each(|v| *v = scale * (rng.random::<f64>() - 0.5));
    }
}
