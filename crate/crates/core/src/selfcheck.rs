//! Finite-difference self-checks for the adjoint path and the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adjoint::{self, AdjointError, Frozen, ParamDynamics};
use crate::data::{synthetic_panel, TimeScale};
use crate::model::{ModelConfig, ModelError, ParamGroup, PovertyModel};
use crate::nn::{mlp_forward, Activation, DenseVars, MlpVars, NnError};
use crate::odeint::{self, SolverConfig};
use crate::tape::{AdError, Tape, Var};
use crate::tensor::Tensor;

pub const THRESHOLD: f64 = 1e-3;
pub const FD_EPS: f64 = 1e-5;
/// Euler steps used when comparing the adjoint with BPTT.
pub const BPTT_STEPS: usize = 20_000;

/// Tight tolerances so solver error stays far below finite-difference error.
pub fn tight_solver() -> SolverConfig {
    SolverConfig {
        max_steps: 1_000_000,
        ..SolverConfig::with_tolerances(1e-10, 1e-12)
    }
}

/// `max|a − b| / max|b|`, or `max|a − b|` when `b` is zero.
pub fn normwise_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// `dz/dt = θ·z` with scalar `θ`.
#[derive(Clone, Debug)]
pub struct ScalarLinear {
    theta: Vec<Tensor>,
}

impl ScalarLinear {
    pub fn new(theta: f64) -> Self {
        Self {
            theta: vec![Tensor::scalar(theta)],
        }
    }
}

impl ParamDynamics for ScalarLinear {
    fn state_dim(&self) -> usize {
        1
    }

    fn params(&self) -> &[Tensor] {
        &self.theta
    }

    fn build(&self, tape: &mut Tape, _t: f64, z: Var, params: &[Var]) -> Result<Var, AdError> {
        tape.mul(params[0], z)
    }
}

/// Small tanh MLP vector field with a linear output layer.
#[derive(Clone, Debug)]
pub struct MlpDynamics {
    params: Vec<Tensor>,
    dim: usize,
}

impl MlpDynamics {
    pub fn random(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = |rows: usize, cols: usize| {
            let b = 1.0 / (cols as f64).sqrt();
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-b..=b)).collect();
            let bias: Vec<f64> = (0..rows).map(|_| rng.gen_range(-b..=b)).collect();
            [
                Tensor::from_parts(vec![rows, cols], w),
                Tensor::from_parts(vec![rows], bias),
            ]
        };
        let mut params = Vec::with_capacity(4);
        params.extend(dense(hidden, dim));
        params.extend(dense(dim, hidden));
        Self { params, dim }
    }

    pub fn with_params(&self, params: Vec<Tensor>) -> Self {
        Self {
            params,
            dim: self.dim,
        }
    }
}

impl ParamDynamics for MlpDynamics {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn build(&self, tape: &mut Tape, _t: f64, z: Var, p: &[Var]) -> Result<Var, AdError> {
        let mlp = MlpVars::new(
            vec![
                DenseVars {
                    weight: p[0],
                    bias: Some(p[1]),
                },
                DenseVars {
                    weight: p[2],
                    bias: Some(p[3]),
                },
            ],
            vec![Activation::Tanh, Activation::None],
            self.dim,
        );
        mlp_forward(tape, &mlp, z).map_err(|e| match e {
            NnError::Ad(a) => a,
            NnError::Width { expected, got, .. } => AdError::ShapeMismatch {
                op: "mlp dynamics",
                left: vec![got],
                right: vec![expected],
            },
            other => unreachable!("dense chain cannot fail with {other}"),
        })
    }
}

/// One comparison in the report.
#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    pub expected: Option<f64>,
    pub error: f64,
    pub threshold: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.threshold
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.error).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("check,value,expected,rel_error,threshold,status\n");
        for r in &self.rows {
            let expected = r.expected.map(|e| format!("{e:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6e},{},{:.3e},{:e},{}\n",
                r.name,
                r.value,
                expected,
                r.error,
                r.threshold,
                if r.passed() { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SelfcheckError {
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("solver: {0}")]
    Solver(#[from] odeint::OdeError),
}

fn flip(values: &mut [f64], sabotage: bool) {
    if sabotage {
        values.iter_mut().for_each(|v| *v = -*v);
    }
}

/// `dL/dθ` for `dz/dt = θz`, `z0 = 1`, `L = z(1)`, against `e^θ`.
pub fn closed_form(theta: f64, sabotage: bool) -> Result<CheckRow, SelfcheckError> {
    let f = ScalarLinear::new(theta);
    let solver = tight_solver();
    let z1 = odeint::integrate(&Frozen(&f), &[1.0], 0.0, 1.0, &solver)?.into_last();
    let mut g = adjoint::adjoint_backward(&f, &z1, &[1.0], 1.0, 0.0, &solver)?.dtheta;
    flip(&mut g, sabotage);
    let expected = theta.exp();
    Ok(CheckRow {
        name: "closed_form_dtheta".into(),
        value: g[0],
        expected: Some(expected),
        error: ((g[0] - expected) / expected).abs(),
        threshold: 1e-4,
    })
}

fn end_loss<D: ParamDynamics>(f: &D, z0: &[f64], c: &[f64], solver: &SolverConfig) -> f64 {
    let z1 = odeint::integrate(&Frozen(f), z0, 0.0, 1.0, solver)
        .expect("smooth test dynamics")
        .into_last();
    z1.iter().zip(c).map(|(z, c)| z * c).sum()
}

fn mlp_problem(seed: u64) -> (MlpDynamics, Vec<f64>, Vec<f64>) {
    let f = MlpDynamics::random(3, 8, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let z0: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (f, z0, c)
}

/// Adjoint `dL/dθ` and `dL/dz0` of `L = c·z(1)` for a random 3-dim MLP
/// against central differences.
pub fn adjoint_vs_fd(seed: u64, sabotage: bool) -> Result<CheckRow, SelfcheckError> {
    let (f, z0, c) = mlp_problem(seed);
    let solver = tight_solver();
    let z1 = odeint::integrate(&Frozen(&f), &z0, 0.0, 1.0, &solver)?.into_last();
    let adj = adjoint::adjoint_backward(&f, &z1, &c, 1.0, 0.0, &solver)?;
    let mut analytic = adj.dtheta.clone();
    analytic.extend_from_slice(&adj.dz0);
    flip(&mut analytic, sabotage);

    let flat: Vec<f64> = f.params().iter().flat_map(|p| p.data().to_vec()).collect();
    let rebuild = |values: &[f64]| {
        let mut offset = 0;
        let params = f
            .params()
            .iter()
            .map(|p| {
                let t = Tensor::from_parts(p.shape().to_vec(), values[offset..offset + p.len()].to_vec());
                offset += p.len();
                t
            })
            .collect();
        f.with_params(params)
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[i] += FD_EPS;
        minus[i] -= FD_EPS;
        let lp = end_loss(&rebuild(&plus), &z0, &c, &solver);
        let lm = end_loss(&rebuild(&minus), &z0, &c, &solver);
        numeric.push((lp - lm) / (2.0 * FD_EPS));
    }
    for i in 0..z0.len() {
        let mut plus = z0.clone();
        let mut minus = z0.clone();
        plus[i] += FD_EPS;
        minus[i] -= FD_EPS;
        let lp = end_loss(&f, &plus, &c, &solver);
        let lm = end_loss(&f, &minus, &c, &solver);
        numeric.push((lp - lm) / (2.0 * FD_EPS));
    }
    Ok(CheckRow {
        name: "adjoint_vs_finite_difference".into(),
        value: analytic.iter().map(|a| a.abs()).fold(0.0, f64::max),
        expected: None,
        error: normwise_error(&analytic, &numeric),
        threshold: THRESHOLD,
    })
}

/// Adjoint run with fixed-step Euler against backpropagation through the
/// same number of Euler steps.
pub fn adjoint_vs_bptt(
    seed: u64,
    n_steps: usize,
    threshold: f64,
    sabotage: bool,
) -> Result<CheckRow, SelfcheckError> {
    let (f, z0, c) = mlp_problem(seed);
    let euler = SolverConfig::euler(n_steps);
    let z1 = odeint::integrate(&Frozen(&f), &z0, 0.0, 1.0, &euler)?.into_last();
    let adj = adjoint::adjoint_backward(&f, &z1, &c, 1.0, 0.0, &euler)?;
    let bptt = adjoint::bptt_gradients(&f, &z0, 0.0, 1.0, n_steps, &c, n_steps)?;
    let mut analytic = adj.dtheta;
    analytic.extend(adj.dz0);
    flip(&mut analytic, sabotage);
    let mut reference = bptt.dtheta;
    reference.extend(bptt.dz0);
    Ok(CheckRow {
        name: "adjoint_vs_bptt".into(),
        value: analytic.iter().map(|a| a.abs()).fold(0.0, f64::max),
        expected: None,
        error: normwise_error(&analytic, &reference),
        threshold,
    })
}

/// Per-group gradient check of the shrunken model on a two-district
/// synthetic panel.
pub fn model_gradcheck(seed: u64, sabotage: bool) -> Result<Vec<CheckRow>, SelfcheckError> {
    let panel = synthetic_panel(2, seed);
    let ts = TimeScale::default();
    let solver = tight_solver();
    let model = PovertyModel::new(ModelConfig::small(2), seed)?;
    let (_, grad) = model.loss_and_gradient(&panel, &ts, &solver)?;
    let mut analytic = grad.into_values();
    flip(&mut analytic, sabotage);

    let mut probe = model.clone();
    let mut rows = Vec::new();
    for group in ParamGroup::ALL {
        let mut a = Vec::new();
        let mut numeric = Vec::new();
        for v in model.group_views(group) {
            for i in model.layout().view(v).range() {
                let base = model.params()[i];
                probe.params_mut()[i] = base + FD_EPS;
                let lp = probe.batch_loss(&panel, &ts, &solver)?.loss;
                probe.params_mut()[i] = base - FD_EPS;
                let lm = probe.batch_loss(&panel, &ts, &solver)?.loss;
                probe.params_mut()[i] = base;
                numeric.push((lp - lm) / (2.0 * FD_EPS));
                a.push(analytic[i]);
            }
        }
        rows.push(CheckRow {
            name: format!("model_{}", group.name()),
            value: a.iter().map(|x| x.abs()).fold(0.0, f64::max),
            expected: None,
            error: normwise_error(&a, &numeric),
            threshold: THRESHOLD,
        });
    }
    Ok(rows)
}

/// The full suite behind `dnode gradcheck`.
pub fn run_suite(seed: u64, sabotage: bool) -> Result<GradcheckReport, SelfcheckError> {
    let mut rows = vec![
        closed_form(0.5, sabotage)?,
        adjoint_vs_fd(seed, sabotage)?,
        adjoint_vs_bptt(seed, BPTT_STEPS, THRESHOLD, sabotage)?,
    ];
    rows.extend(model_gradcheck(seed, sabotage)?);
    Ok(GradcheckReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normwise_error_examples() {
        assert_eq!(normwise_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((normwise_error(&[1.1, 2.0], &[1.0, 2.0]) - 0.05).abs() < 1e-15);
        assert_eq!(normwise_error(&[0.5], &[0.0]), 0.5);
    }

    #[test]
    fn closed_form_case() {
        let row = closed_form(0.5, false).unwrap();
        assert!((row.expected.unwrap() - 1.648721).abs() < 1e-6);
        assert!(row.passed(), "{row:?}");
        assert!(!closed_form(0.5, true).unwrap().passed());
    }

    #[test]
    fn mlp_adjoint_matches_finite_differences() {
        let row = adjoint_vs_fd(0, false).unwrap();
        assert!(row.passed(), "{row:?}");
        assert!(!adjoint_vs_fd(0, true).unwrap().passed());
    }

    #[test]
    fn random_mlp_is_deterministic() {
        let a = MlpDynamics::random(3, 8, 7);
        let b = MlpDynamics::random(3, 8, 7);
        assert_eq!(a.params(), b.params());
        assert_eq!(a.param_len(), 8 * 3 + 8 + 3 * 8 + 3);
    }

    #[test]
    fn report_rendering() {
        let report = GradcheckReport {
            rows: vec![CheckRow {
                name: "x".into(),
                value: 1.0,
                expected: Some(1.648721),
                error: 2e-3,
                threshold: 1e-3,
            }],
        };
        assert!(!report.passed());
        assert!(report.render().contains("x,1.000000e0,1.648721,2.000e-3,1e-3,FAIL"));
    }
}
