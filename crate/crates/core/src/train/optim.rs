use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    /// Sequences per batch.
    pub batch: usize,
    /// Tokens per sequence.
    pub seq: usize,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Upper bound on dev rows evaluated at each evaluation.
    #[serde(default = "default_eval_rows")]
    pub eval_max_rows: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_eval_rows() -> usize {
    256
}

impl TrainConfig {
    /// Published BERT/GPT settings.
    pub fn paper() -> Self {
        Self {
            peak_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 10_000,
            max_steps: 100_000,
            batch: 128,
            seq: 128,
            eval_every: 5_000,
            checkpoint_every: 5_000,
            eval_max_rows: 1024,
            seed: 0,
        }
    }

    /// Published MoE settings.
    pub fn paper_moe() -> Self {
        Self {
            peak_lr: 5e-4,
            beta2: 0.95,
            warmup_steps: 2_500,
            ..Self::paper()
        }
    }

    /// Desk-scale budget: 2k steps with the warmup fraction kept at 10%.
    pub fn desk() -> Self {
        Self {
            peak_lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 200,
            max_steps: 2_000,
            batch: 8,
            seq: 32,
            eval_every: 100,
            checkpoint_every: 500,
            eval_max_rows: 64,
            seed: 0,
        }
    }

    pub fn desk_moe() -> Self {
        Self {
            beta2: 0.95,
            warmup_steps: 50,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Invalid(m.to_string()));
        if self.warmup_steps > self.max_steps {
            return bad("warmup_steps must not exceed max_steps");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return bad("weight_decay must be non-negative and adam_eps positive");
        }
        if self.max_steps == 0 || self.batch == 0 || self.seq == 0 || self.eval_every == 0 {
            return bad("max_steps, batch, seq and eval_every must be positive");
        }
        if self.checkpoint_every == 0 || self.eval_max_rows == 0 {
            return bad("checkpoint_every and eval_max_rows must be positive");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then linear decay to 0 at `max_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.max_steps);
    // fractions first so both ramps hit the peak exactly at the warmup step
    if step < cfg.warmup_steps {
        cfg.peak_lr * (step as f64 / cfg.warmup_steps as f64)
    } else if cfg.max_steps == cfg.warmup_steps {
        cfg.peak_lr
    } else {
        cfg.peak_lr * ((cfg.max_steps - step) as f64 / (cfg.max_steps - cfg.warmup_steps) as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
    /// Updates taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// Weight decay applies to rank-2 tensors only, so norms and biases are
/// left alone.
pub fn decays(t: &Tensor) -> bool {
    t.shape().len() == 2
}

/// One bias-corrected Adam update with decoupled weight decay
/// (`θ ← θ − lr·wd·θ`, then the Adam step).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(LabError::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| LabError::Invalid(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(LabError::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state.m.get_mut(name).expect("moment per parameter");
        let v = state.v.get_mut(name).expect("moment per parameter");
        let wd = if decays(p) { cfg.weight_decay } else { 0.0 };
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *x -= lr * wd * *x;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            warmup_steps: 100,
            max_steps: 1000,
            peak_lr: 1e-4,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(100, &c), 1e-4);
        assert!((lr_at(50, &c) - 5e-5).abs() < 1e-20);
        assert_eq!(lr_at(1000, &c), 0.0);
        assert!((lr_at(550, &c) - 5e-5).abs() < 1e-18);
    }

    fn store(vals: &[(&str, Tensor)]) -> ParamStore {
        let mut p = ParamStore::new();
        for (n, t) in vals {
            p.insert(*n, t.clone()).unwrap();
        }
        p
    }

    #[test]
    fn zero_gradient_only_decays_matrices() {
        let mut p = store(&[
            ("w", Tensor::filled(&[2, 2], 1.0)),
            ("b", Tensor::filled(&[2], 1.0)),
        ]);
        let mut s = AdamState::new(&p);
        let grads: IndexMap<String, Tensor> = p
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        let c = TrainConfig {
            weight_decay: 0.1,
            ..cfg()
        };
        adam_step(&mut p, &grads, &mut s, 0.5, &c).unwrap();
        assert!(p
            .get("w")
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 1.0 - 0.5 * 0.1));
        assert!(p.get("b").unwrap().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn scalar_quadratic_matches_hand_steps() {
        // f(θ) = ½θ², gradient θ
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        let mut p = store(&[("x", Tensor::filled(&[1], 2.0))]);
        let mut s = AdamState::new(&p);
        let (mut theta, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        let lr = 0.01;
        for t in 1..=5 {
            let g = theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
            let grads = IndexMap::from([("x".to_string(), p.get("x").unwrap().clone())]);
            adam_step(&mut p, &grads, &mut s, lr, &c).unwrap();
            assert!((p.get("x").unwrap().data()[0] - theta).abs() < 1e-15);
            if t == 1 {
                // first step is lr in magnitude
                assert!((2.0 - theta - lr).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = store(&[("enc.w", Tensor::filled(&[1], 1.0))]);
        let mut s = AdamState::new(&p);
        let grads = IndexMap::from([("enc.w".to_string(), Tensor::filled(&[1], f64::NAN))]);
        let e = adam_step(&mut p, &grads, &mut s, 0.1, &cfg()).unwrap_err();
        assert!(e.to_string().contains("enc.w"));
    }
}
