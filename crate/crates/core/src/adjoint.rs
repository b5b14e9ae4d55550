//! Gradients through the ODE solver.
//!
//! [`adjoint_backward`] integrates the augmented state `S = [z; a; g]`
//! backwards in time with
//!
//! ```text
//! dz/dt =  f(t, z, θ)
//! da/dt = −aᵀ ∂f/∂z
//! dg/dt = −aᵀ ∂f/∂θ
//! ```
//!
//! starting from `z(t1)`, `a(t1) = ∂L/∂z(t1)` and `g(t1) = 0`. Both
//! vector–Jacobian products come from one taped evaluation of `f` and one
//! reverse sweep, so memory does not grow with the number of solver steps.
//!
//! [`bptt_gradients`] is the reference: it records every Euler step on a
//! single tape and backpropagates through all of them.

use thiserror::Error;

use crate::odeint::{self, Dynamics, OdeError, SolverConfig};
use crate::tape::{AdError, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdjointError {
    #[error("{phase} solve failed: {source}")]
    Solver { phase: Phase, source: OdeError },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unrolled tape would exceed the step cap of {cap} (requested {requested})")]
    StepCap { cap: usize, requested: usize },
    #[error("observation times must be non-decreasing and start at or after t0")]
    ObservationOrder,
}

impl AdjointError {
    fn solver(phase: Phase) -> impl FnOnce(OdeError) -> Self {
        move |source| AdjointError::Solver { phase, source }
    }
}

/// Dynamics `f(t, z; θ)` that can be recorded on a tape. `θ` is the list of
/// parameter tensors returned by [`ParamDynamics::params`].
pub trait ParamDynamics {
    fn state_dim(&self) -> usize;
    fn params(&self) -> &[Tensor];
    fn build(&self, tape: &mut Tape, t: f64, z: Var, params: &[Var]) -> Result<Var, AdError>;

    fn param_len(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }
}

/// Plain (untaped-gradient) evaluation of a [`ParamDynamics`], usable by the
/// solvers.
pub struct Frozen<'a, D: ?Sized>(pub &'a D);

impl<D: ParamDynamics + ?Sized> Dynamics for Frozen<'_, D> {
    fn eval(&self, t: f64, z: &[f64]) -> Result<Vec<f64>, OdeError> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .0
            .params()
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let zv = tape.constant(Tensor::from_parts(vec![z.len()], z.to_vec()));
        let out = self
            .0
            .build(&mut tape, t, zv, &params)
            .map_err(|e| OdeError::Dynamics(e.to_string()))?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// `f(t, z)`, `aᵀ ∂f/∂z` and `aᵀ ∂f/∂θ` (flattened in parameter order) from
/// one taped forward and one reverse sweep.
pub fn dynamics_vjp<D: ParamDynamics + ?Sized>(
    f: &D,
    t: f64,
    z: &[f64],
    a: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), AdError> {
    let mut tape = Tape::new();
    let params: Vec<Var> = f.params().iter().map(|p| tape.input(p.clone())).collect();
    let zv = tape.input(Tensor::from_parts(vec![z.len()], z.to_vec()));
    let out = f.build(&mut tape, t, zv, &params)?;
    let value = tape.value(out).data().to_vec();
    let grads = tape.backward(out, &Tensor::from_parts(vec![a.len()], a.to_vec()))?;
    let a_dz = grads.get_or_zeros(&tape, zv).into_data();
    let mut a_dtheta = Vec::with_capacity(f.param_len());
    for &p in &params {
        match grads.get(p) {
            Some(g) => a_dtheta.extend_from_slice(g.data()),
            None => a_dtheta.extend(std::iter::repeat_n(0.0, tape.value(p).len())),
        }
    }
    Ok((value, a_dz, a_dtheta))
}

/// `[z; a; g]` packed into one vector of length `2L + P`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub g: Vec<f64>,
}

impl AugmentedState {
    pub fn flatten(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.z.len() + self.a.len() + self.g.len());
        s.extend_from_slice(&self.z);
        s.extend_from_slice(&self.a);
        s.extend_from_slice(&self.g);
        s
    }

    pub fn unflatten(flat: &[f64], latent: usize) -> Self {
        let (z, rest) = flat.split_at(latent);
        let (a, g) = rest.split_at(latent);
        Self {
            z: z.to_vec(),
            a: a.to_vec(),
            g: g.to_vec(),
        }
    }
}

/// Right-hand side of the augmented system.
pub struct Augmented<'a, D: ?Sized> {
    f: &'a D,
    latent: usize,
}

impl<'a, D: ParamDynamics + ?Sized> Augmented<'a, D> {
    pub fn new(f: &'a D) -> Self {
        Self {
            f,
            latent: f.state_dim(),
        }
    }
}

impl<D: ParamDynamics + ?Sized> Dynamics for Augmented<'_, D> {
    fn eval(&self, t: f64, s: &[f64]) -> Result<Vec<f64>, OdeError> {
        let l = self.latent;
        let (z, a) = (&s[..l], &s[l..2 * l]);
        let (fz, a_dz, a_dtheta) =
            dynamics_vjp(self.f, t, z, a).map_err(|e| OdeError::Dynamics(e.to_string()))?;
        let mut out = fz;
        out.extend(a_dz.iter().map(|x| -x));
        out.extend(a_dtheta.iter().map(|x| -x));
        Ok(out)
    }
}

/// `dL/dθ` (flattened in parameter order) and `dL/dz0`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    pub dtheta: Vec<f64>,
    pub dz0: Vec<f64>,
}

impl GradResult {
    /// `dtheta` cut into tensors shaped like `params`.
    pub fn dtheta_views(&self, params: &[Tensor]) -> Vec<Tensor> {
        let mut offset = 0;
        params
            .iter()
            .map(|p| {
                let t = Tensor::from_parts(
                    p.shape().to_vec(),
                    self.dtheta[offset..offset + p.len()].to_vec(),
                );
                offset += p.len();
                t
            })
            .collect()
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), AdjointError> {
    if expected == got {
        Ok(())
    } else {
        Err(AdjointError::Length {
            what,
            expected,
            got,
        })
    }
}

/// Gradients of a loss that depends on `z(t1)` only, given
/// `a_t1 = ∂L/∂z(t1)`. Only the forward end state is carried over; `z` is
/// re-integrated backwards alongside `a` and `g`.
pub fn adjoint_backward<D: ParamDynamics + ?Sized>(
    f: &D,
    z_t1: &[f64],
    a_t1: &[f64],
    t1: f64,
    t0: f64,
    config: &SolverConfig,
) -> Result<GradResult, AdjointError> {
    let l = f.state_dim();
    check_len("z(t1)", l, z_t1.len())?;
    check_len("a(t1)", l, a_t1.len())?;
    let start = AugmentedState {
        z: z_t1.to_vec(),
        a: a_t1.to_vec(),
        g: vec![0.0; f.param_len()],
    };
    let end = integrate_augmented(f, &start, t1, t0, config)?;
    Ok(GradResult {
        dtheta: end.g,
        dz0: end.a,
    })
}

fn integrate_augmented<D: ParamDynamics + ?Sized>(
    f: &D,
    s: &AugmentedState,
    from: f64,
    to: f64,
    config: &SolverConfig,
) -> Result<AugmentedState, AdjointError> {
    let aug = Augmented::new(f);
    let sol = odeint::integrate(&aug, &s.flatten(), from, to, config)
        .map_err(AdjointError::solver(Phase::Backward))?;
    Ok(AugmentedState::unflatten(sol.last(), f.state_dim()))
}

/// One observation of the latent path: its time, the forward solution there
/// and the loss cotangent `∂L_j/∂z(t_j)`.
#[derive(Clone, Debug)]
pub struct Observation<'a> {
    pub time: f64,
    pub state: &'a [f64],
    pub cotangent: &'a [f64],
}

/// Adjoint pass for a loss summed over several observation times.
///
/// Works segment by segment from the last observation to `t0`. At each
/// observation the adjoint jumps by that observation's cotangent and `z` is
/// reset to the stored forward state before integrating the next segment.
pub fn adjoint_observations<D: ParamDynamics + ?Sized>(
    f: &D,
    t0: f64,
    observations: &[Observation<'_>],
    config: &SolverConfig,
) -> Result<GradResult, AdjointError> {
    let l = f.state_dim();
    let mut prev = t0;
    for o in observations {
        if !(o.time >= prev) {
            return Err(AdjointError::ObservationOrder);
        }
        prev = o.time;
        check_len("observation state", l, o.state.len())?;
        check_len("observation cotangent", l, o.cotangent.len())?;
    }
    let mut s = AugmentedState {
        z: vec![0.0; l],
        a: vec![0.0; l],
        g: vec![0.0; f.param_len()],
    };
    for (j, o) in observations.iter().enumerate().rev() {
        s.z.copy_from_slice(o.state);
        for (a, c) in s.a.iter_mut().zip(o.cotangent) {
            *a += c;
        }
        let target = if j == 0 { t0 } else { observations[j - 1].time };
        if target != o.time {
            s = integrate_augmented(f, &s, o.time, target, config)?;
        }
    }
    Ok(GradResult {
        dtheta: s.g,
        dz0: s.a,
    })
}

/// Backpropagation through `n_steps` forward-Euler steps recorded on one
/// tape. Memory grows linearly with `n_steps`; `step_cap` bounds it.
pub fn bptt_gradients<D: ParamDynamics + ?Sized>(
    f: &D,
    z0: &[f64],
    t0: f64,
    t1: f64,
    n_steps: usize,
    cotangent: &[f64],
    step_cap: usize,
) -> Result<GradResult, AdjointError> {
    if n_steps == 0 {
        return Err(AdjointError::Solver {
            phase: Phase::Forward,
            source: OdeError::Config("euler needs at least one step"),
        });
    }
    if n_steps > step_cap {
        return Err(AdjointError::StepCap {
            cap: step_cap,
            requested: n_steps,
        });
    }
    let l = f.state_dim();
    check_len("z0", l, z0.len())?;
    check_len("cotangent", l, cotangent.len())?;
    let mut tape = Tape::new();
    let params: Vec<Var> = f.params().iter().map(|p| tape.input(p.clone())).collect();
    let z0v = tape.input(Tensor::from_parts(vec![l], z0.to_vec()));
    let dt = (t1 - t0) / n_steps as f64;
    let mut z = z0v;
    for k in 0..n_steps {
        let t = t0 + k as f64 * dt;
        let fz = f.build(&mut tape, t, z, &params)?;
        let inc = tape.scale(fz, dt)?;
        z = tape.add(z, inc)?;
    }
    let grads = tape.backward(z, &Tensor::from_parts(vec![l], cotangent.to_vec()))?;
    let mut dtheta = Vec::with_capacity(f.param_len());
    for &p in &params {
        dtheta.extend_from_slice(grads.get_or_zeros(&tape, p).data());
    }
    Ok(GradResult {
        dtheta,
        dz0: grads.get_or_zeros(&tape, z0v).into_data(),
    })
}

/// Seed `∂L/∂pred = 2(pred − target)/n_total` for an MSE over `n_total`
/// terms.
pub fn loss_output_cotangent(
    pred: &[f64],
    target: &[f64],
    n_total: usize,
) -> Result<Vec<f64>, AdjointError> {
    check_len("target", pred.len(), target.len())?;
    let n = n_total as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect())
}
