//! AdamW with decoupled weight decay, and the one-cycle learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers, one pair per registry entry.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = |p: &crate::model::Param<T>| Tensor::zeros(p.value.shape());
        Self {
            cfg,
            m: store.params().iter().map(zeros).collect(),
            v: store.params().iter().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One AdamW update. `grads[i]` belongs to `store.params()[i]`; a missing
/// gradient counts as zero. Frozen tensors and their moments are untouched.
///
/// All gradients are checked before anything changes, so a non-finite
/// gradient aborts the step with the store and state intact.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::dim("adamw_step", &[store.len()], &[grads.len(), state.m.len()]));
    }
    if !(lr > 0.0) {
        return Err(Error::Precondition(format!("learning rate must be positive, got {lr}")));
    }
    for (p, g) in store.params().iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::dim("adamw_step", p.value.shape(), g.shape()));
            }
            if !p.frozen && !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                    step: state.step + 1,
                });
            }
        }
    }
    state.step += 1;
    let c = state.cfg;
    let t = state.step as i32;
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (lr_t, eps, decay) = (T::of(lr), T::of(c.eps), T::of(lr * c.weight_decay));
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        if p.frozen {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].as_ref().map(|g| g.data());
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w = *w - lr_t * mhat / (vhat.sqrt() + eps) - decay * *w;
        }
    }
    Ok(())
}

/// One-cycle schedule: cosine warmup from `max_lr / div_factor` to `max_lr`
/// over the first `pct_start` of the steps, then cosine decay to
/// `max_lr / final_div_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub max_lr: f64,
    pub total_steps: u64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Schedule {
    pub fn new(max_lr: f64, total_steps: u64) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0) || self.total_steps == 0 {
            return Err(Error::Config("schedule needs max_lr > 0 and at least one step".into()));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(Error::Config(format!("pct_start {} outside (0, 1)", self.pct_start)));
        }
        if !(self.div_factor > 1.0 && self.final_div_factor > 1.0) {
            return Err(Error::Config("schedule divisors must exceed 1".into()));
        }
        Ok(())
    }
}

fn cosine(from: f64, to: f64, frac: f64) -> f64 {
    to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

pub fn one_cycle_lr(step: u64, s: &Schedule) -> f64 {
    let step = if step > s.total_steps {
        log::warn!("schedule step {step} past the end ({}), clamping", s.total_steps);
        s.total_steps
    } else {
        step
    };
    let start = s.max_lr / s.div_factor;
    let end = s.max_lr / s.final_div_factor;
    let warm = s.pct_start * s.total_steps as f64;
    let x = step as f64;
    if x <= warm {
        cosine(start, s.max_lr, x / warm)
    } else {
        cosine(s.max_lr, end, (x - warm) / (s.total_steps as f64 - warm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64], frozen: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[values.len()], values).unwrap()).unwrap();
        s.get_mut("w").unwrap().frozen = frozen;
        s
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut s = store_with(&[1.0, -2.0], false);
        let mut st = OptimState::new(&s, AdamWConfig::default());
        adamw_step(&mut s, &[Some(Tensor::zeros(&[2]))], &mut st, 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().value.data(), &[1.0 * (1.0 - 0.001), -2.0 * (1.0 - 0.001)]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut s = store_with(&[0.5], false);
        let mut st = OptimState::new(&s, cfg);
        adamw_step(&mut s, &[Some(Tensor::full(&[1], 1.0))], &mut st, 0.01).unwrap();
        let delta = s.get("w").unwrap().value.data()[0] - 0.5;
        assert!((delta + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn frozen_is_untouched_and_nan_aborts() {
        let mut s = store_with(&[3.0], true);
        let mut st = OptimState::new(&s, AdamWConfig::default());
        for _ in 0..100 {
            adamw_step(&mut s, &[Some(Tensor::full(&[1], 0.7))], &mut st, 0.1).unwrap();
        }
        assert_eq!(s.get("w").unwrap().value.data(), &[3.0]);

        let mut s = store_with(&[3.0], false);
        let mut st = OptimState::new(&s, AdamWConfig::default());
        let err = adamw_step(&mut s, &[Some(Tensor::full(&[1], f64::NAN))], &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 1, .. }));
        assert_eq!((s.get("w").unwrap().value.data()[0], st.step), (3.0, 0));
        assert!(adamw_step(&mut s, &[Some(Tensor::full(&[1], 1.0))], &mut st, 0.0).is_err());
    }

    #[test]
    fn schedule_landmarks() {
        let s = Schedule::new(0.002, 1000);
        assert!((one_cycle_lr(0, &s) - 8e-5).abs() < 1e-18);
        assert!((one_cycle_lr(300, &s) - 0.002).abs() < 1e-18);
        assert!((one_cycle_lr(1000, &s) - 0.002 / 1e4).abs() < 1e-18);
        assert_eq!(one_cycle_lr(5000, &s), one_cycle_lr(1000, &s));
        let min = (0..=1000).map(|t| one_cycle_lr(t, &s)).fold(f64::INFINITY, f64::min);
        assert_eq!(min, one_cycle_lr(1000, &s));
        assert!(Schedule { pct_start: 1.0, ..s }.validate().is_err());
        assert!(Schedule { div_factor: 1.0, ..s }.validate().is_err());
    }
}
