use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::diff::{GradStore, ParamId, ParameterStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Moments and step count for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F> {
    pub step: u64,
    pub m: Tensor<F>,
    pub v: Tensor<F>,
}

/// Classic Adam with L2 weight decay folded into the gradient. Parameters
/// that receive no gradient in a step are left untouched, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub state: Vec<Option<Moments<F>>>,
    pub frozen: BTreeSet<ParamId>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, store: &ParameterStore<F>) -> Self {
        Self {
            cfg,
            state: vec![None; store.len()],
            frozen: BTreeSet::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParameterStore<F>, grads: &GradStore<F>, lr: f64) -> Result<(), TrainError> {
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if self.frozen.contains(&id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let w = store.get(id);
            let slot = self.state[id.0].get_or_insert_with(|| Moments {
                step: 0,
                m: Tensor::zeros(w.shape()),
                v: Tensor::zeros(w.shape()),
            });
            slot.step += 1;
            let c1 = 1.0 - b1.powi(slot.step as i32);
            let c2 = 1.0 - b2.powi(slot.step as i32);
            let (fb1, fb2) = (F::lit(b1), F::lit(b2));
            let wd = F::lit(self.cfg.weight_decay);
            let mut next = w.clone();
            for (((p, gi), m), v) in next
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.data_mut())
                .zip(slot.v.data_mut())
            {
                let gi = *gi + wd * *p;
                *m = fb1 * *m + (F::one() - fb1) * gi;
                *v = fb2 * *v + (F::one() - fb2) * gi * gi;
                let mh = m.to_f64().unwrap_or(f64::NAN) / c1;
                let vh = v.to_f64().unwrap_or(f64::NAN) / c2;
                let upd = lr * mh / (vh.sqrt() + self.cfg.eps);
                *p = *p - F::lit(upd);
            }
            if !next.is_finite() {
                return Err(TrainError::NonFiniteUpdate(store.name(id).to_string()));
            }
            store.set(id, next).expect("shape preserved");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, gamma: f64) -> Result<Self, TrainError> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrainError::Config("milestones must be strictly increasing".into()));
        }
        if !(base_lr >= 0.0 && gamma >= 0.0) {
            return Err(TrainError::Config("base_lr and gamma must be nonnegative".into()));
        }
        Ok(Self {
            base_lr,
            milestones,
            gamma,
        })
    }

    pub fn standard(base_lr: f64) -> Self {
        Self {
            base_lr,
            milestones: vec![15, 25, 35, 40],
            gamma: 0.1,
        }
    }

    /// `base_lr * gamma^k`, k = milestones passed, rounded once from the
    /// exact decimal product of the shortest representations.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        decimal_scaled(self.base_lr, self.gamma, k)
    }
}

/// Shortest decimal form of `x` as (digits, exponent).
fn decimal_parts(x: f64) -> (u128, i32) {
    let s = format!("{x:e}");
    let (mant, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (int, frac) = mant.split_once('.').unwrap_or((mant, ""));
    let digits: u128 = format!("{int}{frac}").parse().expect("digits");
    (digits, exp - frac.len() as i32)
}

fn decimal_scaled(base: f64, gamma: f64, k: usize) -> f64 {
    if k == 0 || base == 0.0 || !base.is_finite() || !gamma.is_finite() || gamma <= 0.0 {
        return base * gamma.powi(k as i32);
    }
    let (mut digits, mut exp) = decimal_parts(base);
    let (gd, ge) = decimal_parts(gamma);
    for _ in 0..k {
        match digits.checked_mul(gd) {
            Some(d) => {
                digits = d;
                exp += ge;
            }
            None => return base * gamma.powi(k as i32),
        }
    }
    format!("{digits}e{exp}").parse().expect("decimal literal")
}
