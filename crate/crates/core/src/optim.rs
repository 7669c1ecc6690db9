//! AdamW with decoupled weight decay, global-norm clipping and a
//! reduce-on-plateau learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;
pub const DEFAULT_PLATEAU_FACTOR: f64 = 0.5;
pub const DEFAULT_PLATEAU_PATIENCE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: DEFAULT_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-group overrides: a multiplier on the shared learning rate and the
/// group's own decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamGroup {
    pub lr_scale: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// One parameter's slot in an optimizer step.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Current learning rate (only ever lowered by the scheduler).
    pub lr: f64,
    step_count: u64,
    moments: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            lr: config.lr,
            config,
            step_count: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn default_group(&self) -> ParamGroup {
        ParamGroup {
            lr_scale: 1.0,
            weight_decay: self.config.weight_decay,
        }
    }

    /// Applies one update. Fails before touching any parameter if a gradient
    /// is non-finite.
    pub fn step(&mut self, updates: Vec<ParamUpdate<'_>>) -> Result<()> {
        for u in &updates {
            if u.grad.shape() != u.value.shape() {
                return Err(Error::shape("adamw_step", "gradient", format!("`{}`", u.name)));
            }
            if !u.grad.is_finite() {
                return Err(Error::NonFiniteGradient(u.name.to_string()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamWConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for u in updates {
            let lr = self.lr * u.group.lr_scale;
            let n = u.value.numel();
            let st = self
                .moments
                .entry(u.name.to_string())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let decay = 1.0 - lr * u.group.weight_decay;
            for (((p, &g), m), v) in u
                .value
                .data_mut()
                .iter_mut()
                .zip(u.grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[&mut Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
    norm
}

/// Halves (by `factor`) the learning rate once the monitored loss has not
/// improved for more than `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub wait: usize,
    /// Relative improvement needed to reset `wait`.
    pub threshold: f64,
}

impl ReduceLrOnPlateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        ReduceLrOnPlateau {
            factor,
            patience,
            best: f64::INFINITY,
            wait: 0,
            threshold: 1e-4,
        }
    }

    /// Feeds one validation loss; returns true when `lr` was reduced.
    pub fn step(&mut self, val_loss: f64, lr: &mut f64) -> bool {
        if val_loss < self.best * (1.0 - self.threshold) || self.best.is_infinite() {
            self.best = val_loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        if self.wait > self.patience {
            *lr *= self.factor;
            self.wait = 0;
            return true;
        }
        false
    }
}

impl Default for ReduceLrOnPlateau {
    fn default() -> Self {
        Self::new(DEFAULT_PLATEAU_FACTOR, DEFAULT_PLATEAU_PATIENCE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(opt: &mut AdamW, x: &mut Tensor, g: f64) {
        let grad = Tensor::scalar(g);
        let group = opt.default_group();
        opt.step(vec![ParamUpdate { name: "x", value: x, grad: &grad, group }]).unwrap();
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = x.clone();
        for _ in 0..10 {
            let g = Tensor::zeros(&[3]);
            let group = opt.default_group();
            opt.step(vec![ParamUpdate { name: "x", value: &mut x, grad: &g, group }]).unwrap();
        }
        assert_eq!(x, before);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() });
        let mut x = Tensor::scalar(2.0);
        scalar_step(&mut opt, &mut x, 0.0);
        // zero gradient: only the multiplicative decay acts
        assert!((x.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    /// Independent scalar re-statement of the AdamW recurrence.
    fn oracle(x0: f64, steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let step = (m / (1.0 - b1.powi(t as i32))) / ((v / (1.0 - b2.powi(t as i32))).sqrt() + eps);
            x -= lr * step;
        }
        x
    }

    #[test]
    fn quadratic_converges() {
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
        let mut x = Tensor::scalar(0.0);
        for _ in 0..200 {
            let g = 2.0 * (x.item() - 3.0);
            scalar_step(&mut opt, &mut x, g);
        }
        let expected = oracle(0.0, 200, 0.1);
        assert!((x.item() - expected).abs() < 1e-12);
        assert!((x.item() - 3.0).abs() < 1e-2, "x = {}", x.item());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut x = Tensor::scalar(1.0);
        let g = Tensor::scalar(f64::NAN);
        let group = opt.default_group();
        let err = opt
            .step(vec![ParamUpdate { name: "blocks.0.conv.weight", value: &mut x, grad: &g, group }])
            .unwrap_err();
        assert!(err.to_string().contains("blocks.0.conv.weight"));
        assert_eq!(x.item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn clip_scales_norm_ten_by_half() {
        let mut a = Tensor::new(vec![2], vec![6.0, 0.0]).unwrap();
        let mut b = Tensor::new(vec![1], vec![8.0]).unwrap();
        let norm = clip_global_norm(&mut [&mut a, &mut b], 5.0);
        assert_eq!(norm, 10.0);
        assert_eq!(a.data(), &[3.0, 0.0]);
        assert_eq!(b.data(), &[4.0]);
    }

    #[test]
    fn plateau_halves_after_patience_exceeded() {
        let mut sched = ReduceLrOnPlateau::default();
        let mut lr = 1e-3;
        assert!(!sched.step(1.0, &mut lr));
        for epoch in 1..=5 {
            assert!(!sched.step(1.0, &mut lr), "epoch {epoch}");
        }
        assert!(sched.step(1.0, &mut lr));
        assert_eq!(lr, 5e-4);
        // improvement resets the counter
        assert!(!sched.step(0.5, &mut lr));
        assert_eq!(sched.wait, 0);
    }
}
