//! Adam with weight decay, cosine annealing, and the full-batch epoch loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{IndicatorPanel, TimeScale};
use crate::model::{ModelError, PovertyModel};
use crate::odeint::SolverConfig;
use crate::params::ParamLayout;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite gradient in {view}")]
    NonFiniteGradient { view: String },
    #[error("length mismatch: {params} parameters, {grads} gradients, {state} optimizer slots")]
    Length {
        params: usize,
        grads: usize,
        state: usize,
    },
    #[error("diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("epoch {epoch}: {source}")]
    Model { epoch: usize, source: ModelError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loss above this (or non-finite) aborts training.
pub const DIVERGENCE_LOSS: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Decay parameters directly instead of adding `wd·θ` to the gradient.
    pub decoupled_weight_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 0.0,
            weight_decay: 1e-5,
            epochs: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            decoupled_weight_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(TrainError::Config("betas must lie in (0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(TrainError::Config("eps must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0 && self.lr_max.is_finite()) {
            return Err(TrainError::Config("need 0 <= lr_min <= lr_max".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/epochs))`.
pub fn cosine_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    let phase = std::f64::consts::PI * epoch as f64 / cfg.epochs as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decoupled: bool,
}

impl AdamState {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            decoupled: cfg.decoupled_weight_decay,
        }
    }
}

fn offending_view(layout: &ParamLayout, index: usize) -> String {
    layout
        .views()
        .iter()
        .find(|v| v.range().contains(&index))
        .map(|v| v.name.clone())
        .unwrap_or_else(|| format!("parameter {index}"))
}

/// One Adam update in place. Gradients are checked before anything changes.
pub fn adam_step(
    state: &mut AdamState,
    layout: &ParamLayout,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Length {
            params: params.len(),
            grads: grads.len(),
            state: state.m.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            view: offending_view(layout, i),
        });
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = if state.decoupled {
            grads[i]
        } else {
            grads[i] + weight_decay * params[i]
        };
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        if state.decoupled {
            params[i] -= lr * weight_decay * params[i];
        }
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,lr,wall_ms")?;
        for r in &self.records {
            writeln!(w, "{},{:e},{:e},{}", r.epoch, r.loss, r.lr, r.wall_ms)?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Trailing moving average with window `w`; entry `i` averages losses
/// `i+1-w ..= i`, so the result has `len - w + 1` entries.
pub fn moving_average(losses: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || losses.len() < w {
        return Vec::new();
    }
    losses
        .windows(w)
        .map(|win| win.iter().sum::<f64>() / w as f64)
        .collect()
}

/// Full-batch training. Epoch `e` (1-based) uses `cosine_lr(e − 1)` and
/// logs the loss evaluated before its update.
pub fn fit(
    mut model: PovertyModel,
    panel: &IndicatorPanel,
    ts: &TimeScale,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(PovertyModel, TrainLog), TrainError> {
    cfg.validate()?;
    solver
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    model
        .check_panel(panel)
        .map_err(|e| TrainError::Model { epoch: 0, source: e })?;
    let mut state = AdamState::new(model.params().len(), cfg);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let (loss, grad) = model
            .loss_and_gradient(panel, ts, solver)
            .map_err(|e| TrainError::Model { epoch, source: e })?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(TrainError::Diverged { epoch, loss });
        }
        let lr = cosine_lr(cfg, epoch - 1);
        let layout = model.layout().clone();
        adam_step(
            &mut state,
            &layout,
            model.params_mut(),
            grad.values(),
            lr,
            cfg.weight_decay,
        )?;
        let record = EpochRecord {
            epoch,
            loss,
            lr,
            wall_ms: start.elapsed().as_millis(),
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_panel;
    use crate::model::ModelConfig;
    use crate::params::Init;

    fn one_view(n: usize) -> ParamLayout {
        let mut l = ParamLayout::new();
        l.push("w", &[n], Init::Zeros);
        l
    }

    #[test]
    fn cosine_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(&cfg, 0), 1e-3);
        assert_eq!(cosine_lr(&cfg, 1000), 0.0);
        assert_eq!(cosine_lr(&cfg, 500), 5e-4);
        let lrs: Vec<f64> = (0..=1000).map(|e| cosine_lr(&cfg, e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = TrainConfig::default();
        let l = one_view(3);
        let mut state = AdamState::new(3, &cfg);
        let mut p = vec![0.3, -1.0, 2.0];
        for _ in 0..5 {
            adam_step(&mut state, &l, &mut p, &[0.0; 3], 1e-3, 0.0).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.0, 2.0]);
        assert_eq!(state.t, 5);
    }

    #[test]
    fn first_step_magnitude() {
        let cfg = TrainConfig::default();
        let l = one_view(1);
        let mut state = AdamState::new(1, &cfg);
        let mut p = vec![0.0];
        adam_step(&mut state, &l, &mut p, &[10.0], 1e-3, 0.0).unwrap();
        // m̂ = 10, v̂ = 100, so the step is lr·10/(10 + 1e-8)
        let want = 1e-3 * 10.0 / (10.0 + 1e-8);
        assert!((p[0] + want).abs() < 1e-18);
        assert!((want - 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn first_step_is_scale_invariant() {
        let cfg = TrainConfig::default();
        let l = one_view(4);
        // invariance holds while eps/|g| stays below the tolerance
        let g = [0.3, -2.0, 0.05, 10.0];
        let big: Vec<f64> = g.iter().map(|x| x * 1000.0).collect();
        let step = |grads: &[f64]| {
            let mut s = AdamState::new(4, &cfg);
            let mut p = vec![1.0; 4];
            adam_step(&mut s, &l, &mut p, grads, 1e-3, 0.0).unwrap();
            p.iter().map(|x| x - 1.0).collect::<Vec<_>>()
        };
        for (a, b) in step(&g).iter().zip(step(&big)) {
            assert!(((a - b) / a).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_names_view() {
        let cfg = TrainConfig::default();
        let mut l = ParamLayout::new();
        l.push("decoder.0.weight", &[2], Init::Zeros);
        l.push("decoder.0.bias", &[2], Init::Zeros);
        let mut s = AdamState::new(4, &cfg);
        let mut p = vec![0.0; 4];
        let err = adam_step(&mut s, &l, &mut p, &[0.0, 0.0, 0.0, f64::NAN], 1e-3, 0.0).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient in decoder.0.bias");
        assert_eq!(s.t, 0);
        assert_eq!(p, vec![0.0; 4]);
    }

    #[test]
    fn adam_keeps_second_moment_nonnegative() {
        let cfg = TrainConfig::default();
        let l = one_view(2);
        let mut s = AdamState::new(2, &cfg);
        let mut p = vec![0.5, 0.5];
        for k in 0..50 {
            let g = [(k as f64).sin() * 1e3, -(k as f64).cos()];
            adam_step(&mut s, &l, &mut p, &g, 1e-2, 1e-5).unwrap();
            assert!(s.v.iter().all(|&v| v >= 0.0 && v.is_finite()));
            assert!(s.m.iter().all(|m| m.is_finite()));
        }
    }

    #[test]
    fn coupled_and_decoupled_decay_differ() {
        let l = one_view(1);
        let run = |decoupled: bool| {
            let cfg = TrainConfig {
                decoupled_weight_decay: decoupled,
                ..TrainConfig::default()
            };
            let mut s = AdamState::new(1, &cfg);
            let mut p = vec![2.0];
            adam_step(&mut s, &l, &mut p, &[0.0], 1e-3, 0.1).unwrap();
            p[0]
        };
        // coupled: the decay term is the whole gradient, so Adam normalizes it
        assert!((run(false) - (2.0 - 1e-3 * 0.2 / (0.2 + 1e-8))).abs() < 1e-15);
        assert!((run(true) - (2.0 - 1e-3 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_zero_epochs() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }

    #[test]
    fn short_fit_is_deterministic_and_decreases() {
        let panel = synthetic_panel(3, 0);
        let ts = TimeScale::default();
        let solver = SolverConfig::default();
        let cfg = TrainConfig {
            epochs: 20,
            lr_max: 1e-2,
            ..TrainConfig::default()
        };
        let run = || {
            let m = PovertyModel::new(ModelConfig::small(3), 0).unwrap();
            fit(m, &panel, &ts, &cfg, &solver, |_| {}).unwrap()
        };
        let (m1, log1) = run();
        let (m2, log2) = run();
        assert_eq!(log1.losses(), log2.losses());
        assert_eq!(m1.params(), m2.params());
        let losses = log1.losses();
        assert!(losses[19] < losses[0]);
        assert_eq!(log1.records[0].epoch, 1);
        assert_eq!(log1.records[0].lr, 1e-2);

        let mut buf = Vec::new();
        log1.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,loss,lr,wall_ms\n1,"));
        assert_eq!(text.lines().count(), 21);
    }
}
