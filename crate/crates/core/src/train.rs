//! Distillation of a student from the procedural teacher on synthetic
//! scenes: AdamW, global-norm clipping, reduce-on-plateau and learned
//! uncertainty weighting of the two loss terms.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchNormMode, Gradients, Tape, Var};
use crate::bench::synth::render_scene;
use crate::error::{Error, Result};
use crate::image::Plane;
use crate::keypoints::NMS_RADIUS;
use crate::losses::{
    focal_loss, mse_baseline, preprocess_teacher, relational_loss, uncertainty_weighted_total, validation_total,
    TeacherTargets, UncertaintyWeights, FOCAL_ALPHA, FOCAL_BETA, SIGMA_G, TAU_REL, TEACHER_THRESHOLD,
};
use crate::nn::{FeatureModel, ModelGraph, ParamStore, ParamVars, ProceduralTeacher};
use crate::optim::{
    clip_global_norm, AdamW, AdamWConfig, ParamGroup, ParamUpdate, ReduceLrOnPlateau, DEFAULT_CLIP_NORM, DEFAULT_LR,
    DEFAULT_PLATEAU_FACTOR, DEFAULT_PLATEAU_PATIENCE, DEFAULT_WEIGHT_DECAY,
};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub sigma_g: f64,
    pub tau_rel: f64,
    pub nms_radius: usize,
    pub teacher_threshold: f64,
    /// Replace both terms by plain regression onto the teacher outputs.
    pub mse_baseline: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: FOCAL_ALPHA,
            beta: FOCAL_BETA,
            sigma_g: SIGMA_G,
            tau_rel: TAU_REL,
            nms_radius: NMS_RADIUS,
            teacher_threshold: TEACHER_THRESHOLD,
            mse_baseline: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: DEFAULT_PLATEAU_FACTOR,
            patience: DEFAULT_PLATEAU_PATIENCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub plateau: PlateauConfig,
    /// Random flips and quarter turns of each training image.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            batch: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            clip: DEFAULT_CLIP_NORM,
            plateau: PlateauConfig::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Square grayscale scenes for training and validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Plane>,
    pub val: Vec<Plane>,
}

impl Dataset {
    pub fn synthetic(seed: u64, n_train: usize, n_val: usize, size: usize) -> Result<Self> {
        if size == 0 || size % 8 != 0 {
            return Err(Error::invalid("dataset", format!("size {size} must be a nonzero multiple of 8")));
        }
        let render = |label: &str, n: usize| -> Vec<Plane> {
            (0..n)
                .into_par_iter()
                .map(|i| render_scene(rng::sub_seed(seed, &format!("{label}.{i}")), size, size).image)
                .collect()
        };
        Ok(Dataset {
            train: render("train", n_train),
            val: render("val", n_val),
        })
    }
}

/// Images plus teacher outputs and the targets derived from them.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Vec<TeacherTargets>,
    pub teacher_heat: Tensor,
    pub teacher_desc: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Runs the teacher on each image. Targets are recomputed from the
/// (possibly augmented) image itself rather than transformed.
pub fn make_batch(teacher: &ProceduralTeacher, images: &[Plane], loss: &LossConfig) -> Result<Batch> {
    let items: Vec<(Tensor, Tensor, TeacherTargets)> = images
        .par_iter()
        .map(|img| {
            let x = img.to_tensor();
            let (heat, desc) = teacher.infer(&x)?;
            let t = preprocess_teacher(&heat, desc, loss.nms_radius, loss.teacher_threshold, loss.sigma_g)?;
            Ok((x, heat, t))
        })
        .collect::<Result<_>>()?;
    let images: Vec<Tensor> = items.iter().map(|i| i.0.clone()).collect();
    let heats: Vec<Tensor> = items.iter().map(|i| i.1.clone()).collect();
    let descs: Vec<Tensor> = items.iter().map(|i| i.2.teacher_desc.clone()).collect();
    Ok(Batch {
        images: Tensor::stack_batch(&images)?,
        teacher_heat: Tensor::stack_batch(&heats)?,
        teacher_desc: Tensor::stack_batch(&descs)?,
        targets: items.into_iter().map(|i| i.2).collect(),
    })
}

/// `(detection, descriptor)` loss terms for one batch.
pub fn loss_terms(tape: &mut Tape, heat: Var, desc: Var, batch: &Batch, loss: &LossConfig) -> Result<(Var, Var)> {
    if loss.mse_baseline {
        return mse_baseline(tape, heat, desc, &batch.teacher_heat, &batch.teacher_desc);
    }
    let refs: Vec<&TeacherTargets> = batch.targets.iter().collect();
    let det = focal_loss(tape, heat, &refs, loss.alpha, loss.beta)?;
    let des = relational_loss(tape, desc, &batch.teacher_desc, loss.tau_rel)?;
    Ok((det, des))
}

/// Extra trainable scalar or tensor outside a [`ParamStore`].
pub struct Extra<'a> {
    pub name: &'a str,
    pub var: Var,
    pub value: &'a mut Tensor,
    pub group: ParamGroup,
}

/// Clips the joint gradient of every trainable parameter and `extras`, then
/// takes one optimizer step. Parameters the loss did not reach get a zero
/// gradient. Returns the norm before clipping.
pub fn apply_gradients(
    opt: &mut AdamW,
    grads: &Gradients,
    vars: &ParamVars,
    params: &mut ParamStore,
    extras: Vec<Extra<'_>>,
    clip: f64,
) -> Result<f64> {
    let mut g: Vec<Tensor> = Vec::new();
    for (name, p) in params.iter() {
        if p.trainable {
            let v = vars.get(name)?;
            g.push(grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())));
        }
    }
    for e in &extras {
        g.push(grads.get(e.var).cloned().unwrap_or_else(|| Tensor::zeros(e.value.shape())));
    }
    let norm = {
        let mut refs: Vec<&mut Tensor> = g.iter_mut().collect();
        clip_global_norm(&mut refs, clip)
    };
    let group = opt.default_group();
    let mut gi = g.iter();
    let mut updates: Vec<ParamUpdate<'_>> = Vec::with_capacity(g.len());
    for (name, p) in params.iter_mut() {
        if p.trainable {
            updates.push(ParamUpdate {
                name,
                value: &mut p.value,
                grad: gi.next().expect("one gradient per trainable parameter"),
                group,
            });
        }
    }
    for e in extras {
        updates.push(ParamUpdate {
            name: e.name,
            value: e.value,
            grad: gi.next().expect("one gradient per extra"),
            group: e.group,
        });
    }
    opt.step(updates)?;
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean uncertainty-weighted objective over the epoch's steps.
    pub train_loss: f64,
    pub val_det: f64,
    pub val_desc: f64,
    /// Plain sum `val_det + val_desc`.
    pub val_total: f64,
    pub s_det: f64,
    pub s_desc: f64,
    pub max_grad_norm: f64,
}

pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub weights: UncertaintyWeights,
}

/// Splits `images` into teacher-labelled batches.
pub fn labelled_batches(teacher: &ProceduralTeacher, images: &[Plane], batch: usize, loss: &LossConfig) -> Result<Vec<Batch>> {
    images.chunks(batch.max(1)).map(|c| make_batch(teacher, c, loss)).collect()
}

/// Eval-mode `(det, desc)` averaged over items.
pub fn validate<F>(batches: &[Batch], loss: &LossConfig, mut forward: F) -> Result<(f64, f64)>
where
    F: FnMut(&mut Tape, Var) -> Result<(Var, Var)>,
{
    let (mut det, mut des, mut n) = (0.0, 0.0, 0usize);
    for b in batches {
        let mut tape = Tape::new();
        let x = tape.constant(b.images.clone());
        let (heat, desc) = forward(&mut tape, x)?;
        let (ld, le) = loss_terms(&mut tape, heat, desc, b, loss)?;
        det += tape.value(ld).item() * b.len() as f64;
        des += tape.value(le).item() * b.len() as f64;
        n += b.len();
    }
    let n = n.max(1) as f64;
    Ok((det / n, des / n))
}

/// Training images for one epoch: shuffled, and augmented when enabled.
pub fn epoch_images(data: &Dataset, cfg: &TrainConfig, seed: u64, epoch: usize) -> Vec<Plane> {
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng::stream(seed, &format!("shuffle.{epoch}")));
    let mut aug = rng::stream(seed, &format!("augment.{epoch}"));
    order
        .into_iter()
        .map(|i| {
            let img = &data.train[i];
            if cfg.augment {
                // quarter turns only keep the batch shape for square images
                let ops = if img.h == img.w { 8 } else { 4 };
                img.d4(aug.random_range(0..ops))
            } else {
                img.clone()
            }
        })
        .collect()
}

pub fn train(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    let teacher = ProceduralTeacher::new(rng::sub_seed(seed, "teacher"));
    let val = labelled_batches(&teacher, &data.val, cfg.batch, loss)?;
    let mut opt = AdamW::new(cfg.optimizer());
    let mut plateau = ReduceLrOnPlateau::new(cfg.plateau.factor, cfg.plateau.patience);
    let mut s_det = Tensor::scalar(0.0);
    let mut s_desc = Tensor::scalar(0.0);
    let no_decay = ParamGroup {
        lr_scale: 1.0,
        weight_decay: 0.0,
    };
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let images = epoch_images(data, cfg, seed, epoch);
        let (mut sum, mut steps, mut max_norm) = (0.0, 0usize, 0.0f64);
        for chunk in images.chunks(cfg.batch.max(1)) {
            let batch = make_batch(&teacher, chunk, loss)?;
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let x = tape.constant(batch.images.clone());
            let out = model.forward(&mut tape, &vars, x, BatchNormMode::Train)?;
            let (ld, le) = loss_terms(&mut tape, out.heatmap, out.descmap, &batch, loss)?;
            let sd = tape.param(s_det.clone());
            let se = tape.param(s_desc.clone());
            let total = uncertainty_weighted_total(&mut tape, ld, le, sd, se)?;
            let value = tape.value(total).item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let grads = tape.backward(total)?;
            let extras = vec![
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
            let norm = apply_gradients(&mut opt, &grads, &vars, &mut model.params, extras, cfg.clip)?;
            model.commit_stats(out.stats)?;
            sum += value;
            steps += 1;
            max_norm = max_norm.max(norm);
        }
        let (val_det, val_desc) = validate(&val, loss, |tape, x| {
            let vars = model.params.bind_constant(tape);
            let out = model.forward(tape, &vars, x, BatchNormMode::Eval)?;
            Ok((out.heatmap, out.descmap))
        })?;
        let val_total = validation_total(val_det, val_desc);
        if !val_total.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let lr = opt.lr;
        plateau.step(val_total, &mut opt.lr);
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: sum / steps.max(1) as f64,
            val_det,
            val_desc,
            val_total,
            s_det: s_det.item(),
            s_desc: s_desc.item(),
            max_grad_norm: max_norm,
        };
        on_epoch(&m)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        metrics,
        weights: UncertaintyWeights {
            s_det: s_det.item(),
            s_desc: s_desc.item(),
        },
    })
}
