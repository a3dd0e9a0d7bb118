//! Adam with L2 weight decay and the one-cycle learning-rate policy.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    OneCycle,
    Constant,
}

/// Cosine one-cycle: warm up from `max/div` to `max` over the first `pct_start`
/// of the steps, then anneal to `max/(div·final_div)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self { max_lr, total_steps, pct_start: 0.3, div: 25.0, final_div: 1e4 }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let start = self.max_lr / self.div;
        let end = start / self.final_div;
        let up = ((self.pct_start * self.total_steps as f64) - 1.0).max(1.0);
        let last = (self.total_steps.max(2) - 1) as f64;
        let s = step as f64;
        let cos = |from: f64, to: f64, t: f64| to + (from - to) * (1.0 + (PI * t.clamp(0.0, 1.0)).cos()) / 2.0;
        if s <= up {
            cos(start, self.max_lr, s / up)
        } else {
            cos(self.max_lr, end, (s - up) / (last - up).max(1.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-7 }
    }
}

struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Per-parameter Adam state keyed by parameter name.
pub struct Adam<F> {
    cfg: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, state: BTreeMap::new() }
    }

    /// Advances the shared step counter; call once per optimizer step before [`Adam::update`].
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<F>, grad: &Tensor<F>, lr: f64) {
        let c = self.cfg;
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments { m: vec![F::zero(); param.len()], v: vec![F::zero(); param.len()] });
        let t = self.step.max(1) as i32;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let bc1 = F::lit(1.0 - c.beta1.powi(t));
        let bc2 = F::lit(1.0 - c.beta2.powi(t)).sqrt();
        let (lr, eps, wd) = (F::lit(lr), F::lit(c.eps), F::lit(c.weight_decay));
        let one = F::one();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut st.m).zip(&mut st.v) {
            let g = g + wd * *p;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= lr * (*m / bc1) / ((*v).sqrt() / bc2 + eps);
        }
    }
}
