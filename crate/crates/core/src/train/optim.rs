//! Warmup + cosine learning-rate schedule and AdamW.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::HeadParams;

/// Linear ramp from 0 to `lr` over `warmup` steps, then cosine decay to 0 at
/// `total`.
pub fn lr_at(step: usize, lr: f64, warmup: usize, total: usize) -> Result<f64> {
    if total <= warmup {
        return Err(Error::InvalidSchedule { total, warmup });
    }
    let step = step.min(total);
    if step < warmup {
        return Ok(lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(lr * 0.5 * (1.0 + (PI * progress).cos()))
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
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moments, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub m: HeadParams,
    pub v: HeadParams,
}

impl OptimizerState {
    pub fn new(params: &HeadParams) -> Self {
        Self { step: 0, m: HeadParams::zeros(params.config), v: HeadParams::zeros(params.config) }
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
/// A non-finite gradient aborts before anything is modified.
pub fn adamw_step(
    params: &mut HeadParams,
    grads: &HeadParams,
    state: &mut OptimizerState,
    lr_now: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if let Some(block) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient { block });
    }
    if params.config != grads.config || params.config != state.m.config {
        return Err(Error::DimensionMismatch { expected: params.num_params(), got: grads.num_params() });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr_now * cfg.weight_decay;
    let blocks = params.blocks_mut().into_iter().zip(grads.blocks());
    let moments = state.m.blocks_mut().into_iter().zip(state.v.blocks_mut());
    for ((p, g), (m, v)) in blocks.zip(moments) {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] * decay - lr_now * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadConfig;

    fn cfg() -> HeadConfig {
        HeadConfig { dim: 4, heads: 2, out_dim: 3, tokens: 5 }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 1e-3, 100, 1000).unwrap(), 0.0);
        assert_eq!(lr_at(100, 1e-3, 100, 1000).unwrap(), 1e-3);
        assert!(lr_at(1000, 1e-3, 100, 1000).unwrap().abs() < 1e-12);
        assert!(matches!(lr_at(0, 1e-3, 100, 100), Err(Error::InvalidSchedule { .. })));
        let mid = lr_at(550, 1.0, 100, 1000).unwrap();
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_at_the_junction() {
        let before = lr_at(99, 1.0, 100, 100_000).unwrap();
        let at = lr_at(100, 1.0, 100, 100_000).unwrap();
        let after = lr_at(101, 1.0, 100, 100_000).unwrap();
        assert!((at - before).abs() <= 0.0101 && (at - after).abs() < 1e-6);
    }

    #[test]
    fn zero_gradients_without_decay_leave_params() {
        let mut p = HeadParams::init(cfg(), 1).unwrap();
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        let c = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &HeadParams::zeros(cfg()), &mut st, 1e-2, &c).unwrap();
        assert_eq!(p.blocks(), before.blocks());
    }

    #[test]
    fn zero_gradients_with_decay_shrink_multiplicatively() {
        let mut p = HeadParams::init(cfg(), 2).unwrap();
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        let c = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        adamw_step(&mut p, &HeadParams::zeros(cfg()), &mut st, 0.5, &c).unwrap();
        for (a, b) in p.blocks().iter().zip(before.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, y * (1.0 - 0.5 * 0.1));
            }
        }
    }

    #[test]
    fn single_step_matches_hand_trace() {
        let mut p = HeadParams::zeros(cfg());
        p.bp[0] = 0.3;
        let mut g = HeadParams::zeros(cfg());
        g.bp[0] = 1.0;
        let mut st = OptimizerState::new(&p);
        let c = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &g, &mut st, 0.01, &c).unwrap();
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1
        let expected = 0.3 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p.bp[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = HeadParams::init(cfg(), 3).unwrap();
        let before = p.clone();
        let mut g = HeadParams::zeros(cfg());
        g.w1[[0, 1]] = f64::NAN;
        let mut st = OptimizerState::new(&p);
        let r = adamw_step(&mut p, &g, &mut st, 0.1, &AdamWConfig::default());
        assert!(matches!(r, Err(Error::NonFiniteGradient { block: "w1" })));
        assert_eq!(p.blocks(), before.blocks());
        assert_eq!(st.step, 0);
    }
}
