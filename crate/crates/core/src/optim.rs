//! AdamW optimizer and the two learning-rate schedules used by the
//! training recipes.
//!
//! * Distillation pre-training uses a **multi-step** schedule: constant
//!   base LR, reduced by 10x when 90% and again when 95% of the total
//!   steps have completed.
//! * Fine-tuning uses a **cosine** schedule from the base LR down to a
//!   floor LR, preceded by a short linear warm-up.
//!
//! The optimizer owns first/second-moment state per parameter, keyed by
//! parameter name, so checkpoints can serialize it next to the weights
//! (`optim.<param>.m`, `optim.<param>.v`, plus the step counter
//! `optim.t`). Updates use the decoupled weight-decay formulation, so a
//! zero learning rate leaves parameter values bitwise unchanged no
//! matter what the gradients or decay are.

use crate::nn::ParamStore;
use crate::{Error, Result};
use ndarray::ArrayD;
use std::collections::BTreeMap;

/// Hyper-parameters of [`AdamW`].
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW over every parameter of a [`ParamStore`].
///
/// Gradients are read from each parameter's accumulated `.grad` buffer
/// (populated by `Graph::backward`); callers are responsible for calling
/// `store.zero_grads()` before building the next step's graph.
pub struct AdamW {
    pub config: AdamWConfig,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for p in store.params() {
            let zeros = ArrayD::zeros(p.borrow().value.raw_dim());
            m.insert(p.name(), zeros.clone());
            v.insert(p.name(), zeros);
        }
        AdamW { config, t: 0, m, v }
    }

    /// Number of completed steps.
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update with the given learning rate.
    ///
    /// Moment estimates advance even when `lr == 0`, but parameter values
    /// are then left bitwise unchanged (`p - 0.0 * u == p` for finite `u`).
    pub fn step(&mut self, store: &ParamStore, lr: f64) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for p in store.params() {
            let name = p.name();
            let m = self.m.get_mut(&name).expect("optimizer state for param");
            let v = self.v.get_mut(&name).expect("optimizer state for param");
            let mut inner = p.borrow_mut();
            let g = inner.grad.clone();
            m.zip_mut_with(&g, |mi, &gi| *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi);
            v.zip_mut_with(&g, |vi, &gi| *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi);
            if lr == 0.0 {
                continue;
            }
            let decay = lr * c.weight_decay;
            ndarray::Zip::from(&mut inner.value)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    *pi -= decay * *pi + lr * m_hat / (v_hat.sqrt() + c.eps);
                });
        }
    }

    /// Serializable state: `optim.<param>.m`, `optim.<param>.v`, and the
    /// step counter as a one-element array `optim.t`.
    pub fn state(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        out.push((
            "optim.t".to_string(),
            ArrayD::from_shape_vec(ndarray::IxDyn(&[1]), vec![self.t as f64]).unwrap(),
        ));
        for (name, m) in &self.m {
            out.push((format!("optim.{name}.m"), m.clone()));
        }
        for (name, v) in &self.v {
            out.push((format!("optim.{name}.v"), v.clone()));
        }
        out
    }

    /// Restore state written by [`AdamW::state`]. Every tracked parameter
    /// must be covered; shapes must match.
    pub fn load_state(&mut self, entries: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        let t = entries
            .get("optim.t")
            .ok_or_else(|| Error::Checkpoint("missing optimizer entry optim.t".into()))?;
        if t.len() != 1 {
            return Err(Error::Checkpoint("optim.t must hold one scalar".into()));
        }
        let t_val = t.iter().next().copied().unwrap_or(0.0);
        if t_val < 0.0 || t_val.fract() != 0.0 {
            return Err(Error::Checkpoint(format!(
                "optim.t must be a non-negative integer, got {t_val}"
            )));
        }
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, old) in &self.m {
            let key = format!("optim.{name}.m");
            let arr = entries
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer entry {key}")))?;
            if arr.shape() != old.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer entry {key}: shape {:?} does not match parameter shape {:?}",
                    arr.shape(),
                    old.shape()
                )));
            }
            m.insert(name.clone(), arr.clone());
        }
        for (name, old) in &self.v {
            let key = format!("optim.{name}.v");
            let arr = entries
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer entry {key}")))?;
            if arr.shape() != old.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer entry {key}: shape {:?} does not match parameter shape {:?}",
                    arr.shape(),
                    old.shape()
                )));
            }
            v.insert(name.clone(), arr.clone());
        }
        self.t = t_val as u64;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Learning-rate schedule; `lr(step)` takes the 0-based step index.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `base_lr`, multiplied by `gamma` once per milestone reached.
    /// A milestone at step `s` means steps `s, s+1, ...` use the reduced rate
    /// (i.e. the drop lands once `s` steps have completed).
    MultiStep {
        base_lr: f64,
        gamma: f64,
        milestones: Vec<usize>,
    },
    /// Linear warm-up to `base_lr` over `warmup` steps, then cosine decay
    /// to exactly `min_lr` at step `total_steps - 1`.
    Cosine {
        base_lr: f64,
        min_lr: f64,
        warmup: usize,
        total_steps: usize,
    },
}

impl LrSchedule {
    /// Distillation recipe: base 1e-4, reduced by 10 at 90% and 95% of
    /// the total step count.
    pub fn distill_default(total_steps: usize) -> Self {
        LrSchedule::MultiStep {
            base_lr: 1e-4,
            gamma: 0.1,
            milestones: vec![total_steps * 9 / 10, total_steps * 19 / 20],
        }
    }

    /// Fine-tuning recipe: cosine from 1e-4 to 1e-6 with 10 warm-up
    /// iterations.
    pub fn finetune_default(total_steps: usize) -> Self {
        LrSchedule::Cosine {
            base_lr: 1e-4,
            min_lr: 1e-6,
            warmup: 10,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::MultiStep {
                base_lr,
                gamma,
                milestones,
            } => {
                let drops = milestones.iter().filter(|&&s| step >= s).count();
                base_lr * gamma.powi(drops as i32)
            }
            LrSchedule::Cosine {
                base_lr,
                min_lr,
                warmup,
                total_steps,
            } => {
                if step < *warmup {
                    return base_lr * (step + 1) as f64 / *warmup as f64;
                }
                let denom = total_steps.saturating_sub(warmup + 1).max(1);
                let progress = ((step - warmup) as f64 / denom as f64).min(1.0);
                min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}
