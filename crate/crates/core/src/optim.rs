//! Adam with decoupled weight decay, the one-cycle learning-rate schedule,
//! and an exponential moving average of the parameters.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};

use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> = store.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads[i]` belongs to parameter `i` of `store`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

/// Cosine one-cycle schedule: warm up from `max_lr / 25` to `max_lr` over
/// the first `pct_start` of the steps, then anneal to `start / 1e4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

fn cos_anneal(from: f64, to: f64, frac: f64) -> f64 {
    to + (from - to) * 0.5 * (1.0 + (PI * frac).cos())
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize, pct_start: f64) -> Self {
        OneCycle {
            max_lr,
            total_steps,
            pct_start,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.initial_lr() / self.final_div_factor
    }

    /// Index of the step that runs at exactly `max_lr`.
    pub fn peak_step(&self) -> usize {
        let last = self.total_steps.saturating_sub(1);
        ((self.pct_start * last as f64).round() as usize).min(last)
    }

    pub fn lr(&self, step: usize) -> f64 {
        let last = self.total_steps.saturating_sub(1);
        let peak = self.peak_step();
        if step <= peak {
            if peak == 0 {
                return self.max_lr;
            }
            cos_anneal(self.initial_lr(), self.max_lr, step as f64 / peak as f64)
        } else {
            let frac = ((step - peak) as f64 / (last - peak) as f64).min(1.0);
            cos_anneal(self.max_lr, self.final_lr(), frac)
        }
    }
}

/// Shadow copy of the parameters, `shadow ← d·shadow + (1−d)·param`.
///
/// With warm-up the effective decay is `min(decay, (1+n)/(10+n))` after `n`
/// previous updates, so early shadows are not dominated by the random
/// initialisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub warmup: bool,
    pub updates: u64,
    pub shadow: ParamStore,
}

impl Ema {
    pub fn new(store: &ParamStore, decay: f64, warmup: bool) -> Self {
        Ema {
            decay,
            warmup,
            updates: 0,
            shadow: store.clone(),
        }
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    pub fn update(&mut self, store: &ParamStore) {
        let d = self.effective_decay();
        for (s, p) in self.shadow.values_mut().iter_mut().zip(store.values()) {
            if d == 1.0 {
                continue;
            }
            Zip::from(s).and(p).for_each(|s, &p| *s = d * *s + (1.0 - d) * p);
        }
        self.updates += 1;
    }
}
