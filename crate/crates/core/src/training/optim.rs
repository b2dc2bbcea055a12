//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    /// Peak rate for the latent head.
    pub peak_lr_latent: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).ceil() as u64
    }

    /// Multiplier applied to the peak rate before update `step` (0-based).
    pub fn factor(&self, step: u64) -> f64 {
        let warmup = self.warmup_steps();
        if step < warmup {
            return step as f64 / warmup.max(1) as f64;
        }
        let span = self.total_steps.saturating_sub(warmup).max(1) as f64;
        let progress = (step - warmup) as f64 / span;
        (0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
    }

    pub fn lr(&self, step: u64, group: ParamGroup) -> f64 {
        let peak = match group {
            ParamGroup::Backbone => self.peak_lr,
            ParamGroup::LatentHead => self.peak_lr_latent,
        };
        peak * self.factor(step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// One AdamW update on a flat slice. `t` is the 1-based update count.
pub fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64, cfg: &AdamWConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..p.len() {
        p[i] *= decay;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: ModelParams,
    pub v: ModelParams,
    /// Updates applied so far.
    pub step: u64,
    pub config: AdamWConfig,
    pub schedule: Schedule,
}

impl OptimState {
    pub fn new(params: &ModelParams, config: AdamWConfig, schedule: Schedule) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            config,
            schedule,
        }
    }

    /// Backbone learning rate for the next update.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step, ParamGroup::Backbone)
    }
}

/// Applies one update and returns the backbone rate that was used. A
/// non-finite gradient leaves both `params` and `state` untouched.
pub fn optimizer_step(params: &mut ModelParams, state: &mut OptimState, grads: &ModelParams) -> Result<f64> {
    for t in grads.tensors() {
        if t.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(t.name));
        }
    }
    if grads.parameter_count() != params.parameter_count() {
        return Err(Error::InvalidArgument("gradient shape does not match parameters".into()));
    }
    let step = state.step;
    let t = step + 1;
    let cfg = state.config;
    let sched = state.schedule;
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
        let lr = sched.lr(step, p.group);
        adamw_update(p.data, g.data, m.data, v.data, lr, t, &cfg);
    }
    state.step = t;
    Ok(sched.lr(step, ParamGroup::Backbone))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn schedule(total: u64) -> Schedule {
        Schedule {
            peak_lr: 1e-3,
            peak_lr_latent: 2e-3,
            warmup_ratio: 0.03,
            total_steps: total,
        }
    }

    #[test]
    fn schedule_shape() {
        let s = schedule(100);
        assert_eq!(s.warmup_steps(), 3);
        assert_eq!(s.factor(0), 0.0);
        assert!((s.factor(1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.factor(3), 1.0);
        assert!((s.factor(100) - 0.0).abs() < 1e-15);
        assert!((s.lr(3, ParamGroup::LatentHead) - 2e-3).abs() < 1e-18);
        let mid = 3 + 97 / 2;
        assert!(s.factor(mid) > 0.49 && s.factor(mid) < 0.52);
        for k in 3..100 {
            assert!(s.factor(k + 1) <= s.factor(k));
        }
    }

    /// Hand-stepped AdamW on f(x) = (x − 3)²/2.
    #[test]
    fn scalar_quadratic_trace() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let lr = 0.05;
        let mut x = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        let (mut xr, mut mr, mut vr) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=25u64 {
            let g = [x[0] - 3.0];
            adamw_update(&mut x, &g, &mut m, &mut v, lr, t, &cfg);

            let gr = xr - 3.0;
            xr -= lr * 0.1 * xr;
            mr = 0.9 * mr + 0.1 * gr;
            vr = 0.999 * vr + 0.001 * gr * gr;
            let mh = mr / (1.0 - 0.9f64.powi(t as i32));
            let vh = vr / (1.0 - 0.999f64.powi(t as i32));
            xr -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((x[0] - xr).abs() < 1e-10, "step {t}: {} vs {xr}", x[0]);
        }
        assert!(x[0] > 1.5);
    }

    fn tiny() -> ModelParams {
        ModelParams::init(ModelConfig {
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            vocab_size: 10,
            latent_k: 2,
            adapter_width: 2,
            max_seq_len: 8,
            rms_eps: 1e-6,
            rope_base: 10_000.0,
            init_seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut p = tiny();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(&p, cfg, schedule(10));
        for _ in 0..5 {
            optimizer_step(&mut p, &mut st, &before.zeros_like()).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_has_zero_rate() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.data.fill(1.0);
        }
        let mut st = OptimState::new(&p, AdamWConfig::default(), schedule(100));
        let lr = optimizer_step(&mut p, &mut st, &g).unwrap();
        assert_eq!(lr, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_refused() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.blocks[0].wq.as_mut_slice()[3] = f64::NAN;
        let mut st = OptimState::new(&p, AdamWConfig::default(), schedule(10));
        match optimizer_step(&mut p, &mut st, &g) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "blocks.0.wq"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }
}
