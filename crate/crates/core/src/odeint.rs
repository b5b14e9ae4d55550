//! Initial-value solvers: fixed-step forward Euler and the adaptive
//! Dormand–Prince 5(4) pair.
//!
//! States are flat `f64` slices. Integration may run backwards in time
//! (`t1 < t0`). There is no dense output: every reported state is an exact
//! solver endpoint.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("non-finite state at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },
    #[error("exceeded {max_steps} steps at t = {t}")]
    MaxSteps { max_steps: usize, t: f64 },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("query times must be sorted and start at or after t0 (index {index})")]
    Unsorted { index: usize },
    #[error("invalid solver config: {0}")]
    Config(&'static str),
    #[error("zero step size")]
    ZeroStep,
    #[error("dynamics: {0}")]
    Dynamics(String),
}

/// Right-hand side `dz/dt = f(t, z)`. The returned vector has the length of
/// `z`.
pub trait Dynamics {
    fn eval(&self, t: f64, z: &[f64]) -> Result<Vec<f64>, OdeError>;
}

impl<F> Dynamics for F
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    fn eval(&self, t: f64, z: &[f64]) -> Result<Vec<f64>, OdeError> {
        Ok(self(t, z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Fixed-step forward Euler with `steps` steps per integration interval.
    Euler { steps: usize },
    Dopri5,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// Defaults to 1% of the interval length.
    pub initial_step: Option<f64>,
    /// Bound on accepted plus rejected steps per interval.
    pub max_steps: usize,
    pub safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            rtol: 1e-3,
            atol: 1e-4,
            initial_step: None,
            max_steps: 10_000,
            safety: 0.9,
        }
    }
}

impl SolverConfig {
    pub fn euler(steps: usize) -> Self {
        Self {
            method: Method::Euler { steps },
            ..Self::default()
        }
    }

    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        if !(self.rtol > 0.0) {
            return Err(OdeError::Config("rtol must be positive"));
        }
        if !(self.atol > 0.0) {
            return Err(OdeError::Config("atol must be positive"));
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return Err(OdeError::Config("safety must lie in (0, 1)"));
        }
        if self.max_steps == 0 {
            return Err(OdeError::Config("max_steps must be positive"));
        }
        if matches!(self.method, Method::Euler { steps: 0 }) {
            return Err(OdeError::Config("euler needs at least one step"));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(OdeError::Config("initial_step must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub n_accepted: usize,
    pub n_rejected: usize,
    pub n_fevals: usize,
}

impl std::ops::AddAssign for SolverStats {
    fn add_assign(&mut self, o: Self) {
        self.n_accepted += o.n_accepted;
        self.n_rejected += o.n_rejected;
        self.n_fevals += o.n_fevals;
    }
}

/// `states[i]` is the solution at `times[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub stats: SolverStats,
}

impl Solution {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("solution has at least one state")
    }

    pub fn into_last(mut self) -> Vec<f64> {
        self.states.pop().expect("solution has at least one state")
    }
}

fn check_finite(z: &[f64], step: usize, t: f64) -> Result<(), OdeError> {
    if z.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(OdeError::NonFinite { step, t })
    }
}

/// `z ← z + c·k`, in place.
fn axpy(z: &mut [f64], c: f64, k: &[f64]) {
    for (zi, ki) in z.iter_mut().zip(k) {
        *zi += c * ki;
    }
}

/// Forward Euler with `n_steps` equal steps from `t0` to `t1`.
pub fn euler_solve<F: Dynamics + ?Sized>(
    f: &F,
    z0: &[f64],
    t0: f64,
    t1: f64,
    n_steps: usize,
) -> Result<Solution, OdeError> {
    if n_steps == 0 {
        return Err(OdeError::Config("euler needs at least one step"));
    }
    let dt = (t1 - t0) / n_steps as f64;
    let mut z = z0.to_vec();
    for k in 0..n_steps {
        let t = t0 + k as f64 * dt;
        let dz = f.eval(t, &z)?;
        axpy(&mut z, dt, &dz);
        check_finite(&z, k, t + dt)?;
    }
    Ok(Solution {
        times: vec![t1],
        states: vec![z],
        stats: SolverStats {
            n_accepted: n_steps,
            n_rejected: 0,
            n_fevals: n_steps,
        },
    })
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
/// Fifth-order weights; also row 7 of the tableau (FSAL).
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
/// Fifth-order minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Result of one Dormand–Prince step.
#[derive(Clone, Debug, PartialEq)]
pub struct Dopri5Step {
    /// Fifth-order solution.
    pub z_next: Vec<f64>,
    /// Fifth-order minus embedded fourth-order solution.
    pub error: Vec<f64>,
    /// `f(t + h, z_next)`, the first stage of the next step.
    pub f_last: Vec<f64>,
}

/// One step from `(t, z)` with signed step `h`.
pub fn dopri5_step<F: Dynamics + ?Sized>(
    f: &F,
    t: f64,
    z: &[f64],
    h: f64,
) -> Result<Dopri5Step, OdeError> {
    if h == 0.0 {
        return Err(OdeError::ZeroStep);
    }
    let k1 = f.eval(t, z)?;
    check_finite(&k1, 0, t)?;
    dopri5_step_fsal(f, t, z, h, &k1)
}

fn stage(z: &[f64], h: f64, coeffs: &[f64], ks: &[Vec<f64>]) -> Vec<f64> {
    let mut y = z.to_vec();
    for (a, k) in coeffs.iter().zip(ks) {
        if *a != 0.0 {
            axpy(&mut y, h * a, k);
        }
    }
    y
}

fn dopri5_step_fsal<F: Dynamics + ?Sized>(
    f: &F,
    t: f64,
    z: &[f64],
    h: f64,
    k1: &[f64],
) -> Result<Dopri5Step, OdeError> {
    let mut ks: Vec<Vec<f64>> = Vec::with_capacity(7);
    ks.push(k1.to_vec());
    let rows: [&[f64]; 5] = [&A2, &A3, &A4, &A5, &A6];
    for (i, row) in rows.iter().enumerate() {
        let y = stage(z, h, row, &ks);
        let k = f.eval(t + C[i + 1] * h, &y)?;
        check_finite(&k, i + 1, t)?;
        ks.push(k);
    }
    let z_next = stage(z, h, &B, &ks);
    check_finite(&z_next, 6, t + h)?;
    let k7 = f.eval(t + h, &z_next)?;
    check_finite(&k7, 6, t + h)?;
    ks.push(k7);
    let mut error = vec![0.0; z.len()];
    for (e, k) in E.iter().zip(&ks) {
        if *e != 0.0 {
            axpy(&mut error, h * e, k);
        }
    }
    let f_last = ks.pop().expect("seven stages");
    Ok(Dopri5Step {
        z_next,
        error,
        f_last,
    })
}

/// RMS over components of `err_i / (atol + rtol·max(|z_i|, |z_next_i|))`.
pub fn error_norm(error: &[f64], z: &[f64], z_next: &[f64], rtol: f64, atol: f64) -> f64 {
    let n = error.len().max(1) as f64;
    let sum: f64 = error
        .iter()
        .zip(z.iter().zip(z_next))
        .map(|(e, (a, b))| {
            let scale = atol + rtol * a.abs().max(b.abs());
            (e / scale).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

/// Adaptive Dormand–Prince integration from `t0` to `t1`.
pub fn dopri5_solve<F: Dynamics + ?Sized>(
    f: &F,
    z0: &[f64],
    t0: f64,
    t1: f64,
    config: &SolverConfig,
) -> Result<Solution, OdeError> {
    config.validate()?;
    let mut stats = SolverStats::default();
    let span = (t1 - t0).abs();
    if span == 0.0 {
        return Ok(Solution {
            times: vec![t1],
            states: vec![z0.to_vec()],
            stats,
        });
    }
    let dir = (t1 - t0).signum();
    let min_step = 1e-14 * span;
    let mut h = config.initial_step.unwrap_or(1e-2 * span).min(span);
    let mut t = t0;
    let mut z = z0.to_vec();
    let mut k1 = f.eval(t, &z)?;
    check_finite(&k1, 0, t)?;
    stats.n_fevals = 1;

    loop {
        if stats.n_accepted + stats.n_rejected >= config.max_steps {
            return Err(OdeError::MaxSteps {
                max_steps: config.max_steps,
                t,
            });
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let step = dopri5_step_fsal(f, t, &z, dir * h, &k1)?;
        stats.n_fevals += 6;
        let err = error_norm(&step.error, &z, &step.z_next, config.rtol, config.atol);
        let factor = if err == 0.0 {
            5.0
        } else {
            (config.safety * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        if err <= 1.0 {
            stats.n_accepted += 1;
            t = if last { t1 } else { t + dir * h };
            z = step.z_next;
            k1 = step.f_last;
            if last {
                break;
            }
        } else {
            stats.n_rejected += 1;
        }
        h *= factor;
        if h < min_step {
            return Err(OdeError::StepUnderflow { t, h });
        }
    }
    Ok(Solution {
        times: vec![t1],
        states: vec![z],
        stats,
    })
}

/// Integrates one interval with the configured method.
pub fn integrate<F: Dynamics + ?Sized>(
    f: &F,
    z0: &[f64],
    t0: f64,
    t1: f64,
    config: &SolverConfig,
) -> Result<Solution, OdeError> {
    match config.method {
        Method::Euler { steps } => {
            config.validate()?;
            if t0 == t1 {
                return Ok(Solution {
                    times: vec![t1],
                    states: vec![z0.to_vec()],
                    stats: SolverStats::default(),
                });
            }
            euler_solve(f, z0, t0, t1, steps)
        }
        Method::Dopri5 => dopri5_solve(f, z0, t0, t1, config),
    }
}

/// Solution at each of `times` (ascending, first `>= t0`), integrating
/// segment by segment so each state is an exact solver endpoint.
pub fn solve_at<F: Dynamics + ?Sized>(
    f: &F,
    z0: &[f64],
    t0: f64,
    times: &[f64],
    config: &SolverConfig,
) -> Result<Solution, OdeError> {
    config.validate()?;
    if let Some(index) = times
        .iter()
        .enumerate()
        .position(|(i, &t)| !t.is_finite() || if i == 0 { t < t0 } else { t < times[i - 1] })
    {
        return Err(OdeError::Unsorted { index });
    }
    let mut stats = SolverStats::default();
    let mut states = Vec::with_capacity(times.len());
    let mut t = t0;
    let mut z = z0.to_vec();
    for &target in times {
        if target != t {
            let seg = integrate(f, &z, t, target, config)?;
            stats += seg.stats;
            z = seg.into_last();
            t = target;
        }
        states.push(z.clone());
    }
    Ok(Solution {
        times: times.to_vec(),
        states,
        stats,
    })
}
