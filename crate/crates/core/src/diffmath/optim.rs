//! ADAM with bias correction and the One-Cycle learning-rate schedule.

use super::DiffError;
use ndarray::Array2;
use std::collections::BTreeMap;

/// Per-parameter first/second moment accumulators and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One ADAM update over keyed parameters. Missing gradients leave the
/// parameter untouched; a non-finite gradient aborts.
pub fn adam_step(
    params: &mut BTreeMap<String, Array2<f64>>,
    grads: &BTreeMap<String, Array2<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), DiffError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (key, grad) in grads {
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFiniteGradient { key: key.clone() });
        }
        let Some(param) = params.get_mut(key) else {
            continue;
        };
        let m = state
            .m
            .entry(key.clone())
            .or_insert_with(|| Array2::zeros(grad.dim()));
        let v = state
            .v
            .entry(key.clone())
            .or_insert_with(|| Array2::zeros(grad.dim()));
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = state.beta1 * *m + (1.0 - state.beta1) * g;
                *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
            });
    }
    Ok(())
}

/// One-Cycle schedule: cosine warmup from `max_lr / div_start` to `max_lr`
/// over the warmup fraction of steps, then cosine annealing down to
/// `max_lr / div_final`. Steps beyond the end clamp to the final rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub div_start: f64,
    pub div_final: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize) -> OneCycleSchedule {
        OneCycleSchedule {
            max_lr,
            total_steps,
            warmup_frac: 0.3,
            div_start: 25.0,
            div_final: 1e4,
        }
    }

    fn peak_step(&self) -> usize {
        if self.total_steps < 2 {
            return 0;
        }
        ((self.warmup_frac * (self.total_steps - 1) as f64).round() as usize)
            .clamp(1, self.total_steps - 1)
    }

    pub fn lr(&self, step: usize) -> f64 {
        let start = self.max_lr / self.div_start;
        let fin = self.max_lr / self.div_final;
        if self.total_steps < 2 {
            return self.max_lr;
        }
        let peak = self.peak_step();
        let last = self.total_steps - 1;
        if step >= last {
            return fin;
        }
        let cos_blend = |from: f64, to: f64, frac: f64| {
            from + (to - from) * (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0
        };
        if step <= peak {
            cos_blend(start, self.max_lr, step as f64 / peak as f64)
        } else {
            cos_blend(self.max_lr, fin, (step - peak) as f64 / (last - peak) as f64)
        }
    }
}
