//! The district-embedded latent ODE.
//!
//! For district `d` with embedding `e_d`:
//!
//! ```text
//! z0     = readout(GRU([x(t_0); e_d], …, [x(t_{T-1}); e_d]))
//! dz/dt  = f_θ([z; e_d])              (tanh MLP, linear output)
//! x̂(t)   = g_φ([z(t); e_d])           (ReLU MLP, sigmoid output)
//! ```
//!
//! The latent path always starts at normalized time 0. Encoder, decoder and
//! embedding gradients come from tape backpropagation; the dynamics
//! parameters (and `e_d` as it enters `f_θ`) get theirs from the adjoint
//! pass.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjoint::{self, AdjointError, Frozen, Observation, ParamDynamics};
use crate::checkpoint::{self, CheckpointError};
use crate::data::{IndicatorPanel, TimeScale};
use crate::nn::{
    self, embed_lookup, gru_encode, mlp_forward, Activation, Dense, DenseVars, EmbeddingTable,
    GruParams, GruVars, MlpParams, MlpVars, NnError,
};
use crate::odeint::{self, OdeError, SolverConfig};
use crate::params::{init_params, GradientMap, Init, ParamLayout};
use crate::tape::{AdError, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    #[error("forward solve failed: {0}")]
    Solver(#[from] OdeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Dimension(String),
    #[error("district {index} out of range for {count} districts")]
    District { index: usize, count: usize },
    #[error("empty observation series")]
    EmptySeries,
    #[error("no observed cells")]
    NoObservations,
    #[error("query time {0} precedes the time origin")]
    BeforeOrigin(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_districts: usize,
    pub n_indicators: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub dynamics_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Bias on the GRU → latent readout.
    pub readout_bias: bool,
    /// Feed the encoder newest observation first.
    pub reverse_encoder: bool,
    /// Append `t` to the dynamics input.
    pub time_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_districts: 30,
            n_indicators: 6,
            embed_dim: 16,
            latent_dim: 8,
            encoder_hidden: 64,
            dynamics_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            readout_bias: true,
            reverse_encoder: false,
            time_input: false,
        }
    }
}

fn mlp_count(input: usize, hidden: &[usize], output: usize) -> usize {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl ModelConfig {
    /// Shrunken configuration used for gradient checks.
    pub fn small(n_districts: usize) -> Self {
        Self {
            n_districts,
            embed_dim: 4,
            latent_dim: 3,
            encoder_hidden: 8,
            dynamics_hidden: vec![8, 8],
            decoder_hidden: vec![8, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.n_districts,
            self.n_indicators,
            self.embed_dim,
            self.latent_dim,
            self.encoder_hidden,
        ];
        if dims.contains(&0) || self.dynamics_hidden.contains(&0) || self.decoder_hidden.contains(&0)
        {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        Ok(())
    }

    fn gru_input(&self) -> usize {
        self.n_indicators + self.embed_dim
    }

    fn dynamics_input(&self) -> usize {
        self.latent_dim + self.embed_dim + usize::from(self.time_input)
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (h, i, l, e) = (
            self.encoder_hidden,
            self.gru_input(),
            self.latent_dim,
            self.embed_dim,
        );
        let embeddings = self.n_districts * e;
        let gru = 3 * (h * i + h * h + h);
        let readout = l * h + if self.readout_bias { l } else { 0 };
        let dynamics = mlp_count(self.dynamics_input(), &self.dynamics_hidden, l);
        let decoder = mlp_count(l + e, &self.decoder_hidden, self.n_indicators);
        embeddings + gru + readout + dynamics + decoder
    }
}

/// Which part of the model a parameter view belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embeddings,
    Encoder,
    Dynamics,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Embeddings,
        ParamGroup::Encoder,
        ParamGroup::Dynamics,
        ParamGroup::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Dynamics => "dynamics",
            ParamGroup::Decoder => "decoder",
        }
    }

    pub fn of(view_name: &str) -> ParamGroup {
        match view_name.split('.').next() {
            Some("embeddings") => ParamGroup::Embeddings,
            Some("encoder") => ParamGroup::Encoder,
            Some("dynamics") => ParamGroup::Dynamics,
            _ => ParamGroup::Decoder,
        }
    }
}

/// View indices into the layout.
#[derive(Clone, Debug)]
struct Views {
    embeddings: usize,
    gru: [usize; 9],
    readout_weight: usize,
    readout_bias: Option<usize>,
    dynamics: Vec<(usize, usize)>,
    decoder: Vec<(usize, usize)>,
}

fn push_mlp(
    layout: &mut ParamLayout,
    prefix: &str,
    input: usize,
    hidden: &[usize],
    output: usize,
) -> Vec<(usize, usize)> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims.windows(2)
        .enumerate()
        .map(|(k, w)| {
            let weight = layout.push(
                format!("{prefix}.{k}.weight"),
                &[w[1], w[0]],
                Init::Uniform { fan_in: w[0] },
            );
            let bias = layout.push(format!("{prefix}.{k}.bias"), &[w[1]], Init::Zeros);
            (weight, bias)
        })
        .collect()
}

fn build_layout(cfg: &ModelConfig) -> (ParamLayout, Views) {
    let mut layout = ParamLayout::new();
    let (h, i) = (cfg.encoder_hidden, cfg.gru_input());
    let embeddings = layout.push(
        "embeddings",
        &[cfg.n_districts, cfg.embed_dim],
        Init::Normal { std: 0.1 },
    );
    let mut gru = [0; 9];
    for (slot, gate) in ["z", "r", "h"].iter().enumerate() {
        gru[3 * slot] = layout.push(
            format!("encoder.gru.w_{gate}"),
            &[h, i],
            Init::Uniform { fan_in: i },
        );
        gru[3 * slot + 1] = layout.push(
            format!("encoder.gru.u_{gate}"),
            &[h, h],
            Init::Uniform { fan_in: h },
        );
        gru[3 * slot + 2] = layout.push(format!("encoder.gru.b_{gate}"), &[h], Init::Zeros);
    }
    let readout_weight = layout.push(
        "encoder.readout.weight",
        &[cfg.latent_dim, h],
        Init::Uniform { fan_in: h },
    );
    let readout_bias = cfg
        .readout_bias
        .then(|| layout.push("encoder.readout.bias", &[cfg.latent_dim], Init::Zeros));
    let dynamics = push_mlp(
        &mut layout,
        "dynamics",
        cfg.dynamics_input(),
        &cfg.dynamics_hidden,
        cfg.latent_dim,
    );
    let decoder = push_mlp(
        &mut layout,
        "decoder",
        cfg.latent_dim + cfg.embed_dim,
        &cfg.decoder_hidden,
        cfg.n_indicators,
    );
    (
        layout,
        Views {
            embeddings,
            gru,
            readout_weight,
            readout_bias,
            dynamics,
            decoder,
        },
    )
}

/// Latent dynamics of one district: the shared MLP conditioned on `e_d`.
/// Its parameter list is the MLP tensors followed by `e_d`.
#[derive(Clone, Debug)]
pub struct DistrictDynamics {
    params: Vec<Tensor>,
    activations: Vec<Activation>,
    latent: usize,
    time_input: bool,
}

impl DistrictDynamics {
    pub fn embedding(&self) -> &Tensor {
        self.params.last().expect("embedding is the last parameter")
    }
}

impl ParamDynamics for DistrictDynamics {
    fn state_dim(&self) -> usize {
        self.latent
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn build(&self, tape: &mut Tape, t: f64, z: Var, params: &[Var]) -> Result<Var, AdError> {
        let (e_d, layers) = params.split_last().expect("embedding is the last parameter");
        let input = if self.time_input {
            let tv = tape.constant(Tensor::scalar(t));
            tape.concat(&[z, *e_d, tv])?
        } else {
            tape.concat(&[z, *e_d])?
        };
        let in_dim = tape.value(layers[0]).shape()[1];
        let mlp = MlpVars::new(
            layers
                .chunks(2)
                .map(|wb| DenseVars {
                    weight: wb[0],
                    bias: Some(wb[1]),
                })
                .collect(),
            self.activations.clone(),
            in_dim,
        );
        mlp_forward(tape, &mlp, input).map_err(|e| match e {
            NnError::Ad(a) => a,
            NnError::Width { expected, got, .. } => AdError::ShapeMismatch {
                op: "dynamics",
                left: vec![got],
                right: vec![expected],
            },
            other => unreachable!("dense chain cannot fail with {other}"),
        })
    }
}

/// Loss over a panel with per-cell predictions and residuals (`pred − obs`,
/// zero where masked), both `[districts, years, indicators]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub predictions: Vec<f64>,
    pub residuals: Vec<f64>,
    pub observed: usize,
}

impl LossReport {
    pub fn rmse(&self) -> f64 {
        self.loss.sqrt()
    }
}

/// Everything needed to rebuild a model from disk, stored as JSON next to the
/// checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub district_names: Vec<String>,
    pub time_scale: TimeScale,
    pub solver: SolverConfig,
}

#[derive(Clone, Debug)]
pub struct PovertyModel {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
    views: Views,
}

impl PovertyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, views) = build_layout(&config);
        let params = init_params(&layout, seed);
        Ok(Self {
            config,
            layout,
            params,
            views,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, views) = build_layout(&config);
        if params.len() != layout.total() {
            return Err(ModelError::Dimension(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::Dimension("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
            views,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Indices of every view in `group`.
    pub fn group_views(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.layout.views().len())
            .filter(|&i| ParamGroup::of(&self.layout.view(i).name) == group)
            .collect()
    }

    fn tensor(&self, view: usize) -> Tensor {
        self.layout.tensor(&self.params, view)
    }

    fn dense(&self, (w, b): (usize, usize)) -> Dense {
        Dense {
            weight: self.tensor(w),
            bias: Some(self.tensor(b)),
        }
    }

    pub fn embeddings(&self) -> EmbeddingTable {
        EmbeddingTable {
            table: self.tensor(self.views.embeddings),
        }
    }

    pub fn gru(&self) -> GruParams {
        let g = |k: usize| self.tensor(self.views.gru[k]);
        GruParams {
            w_z: g(0),
            u_z: g(1),
            b_z: g(2),
            w_r: g(3),
            u_r: g(4),
            b_r: g(5),
            w_h: g(6),
            u_h: g(7),
            b_h: g(8),
        }
    }

    pub fn readout(&self) -> Dense {
        Dense {
            weight: self.tensor(self.views.readout_weight),
            bias: self.views.readout_bias.map(|b| self.tensor(b)),
        }
    }

    fn mlp_activations(n_layers: usize, hidden: Activation, output: Activation) -> Vec<Activation> {
        let mut acts = vec![hidden; n_layers - 1];
        acts.push(output);
        acts
    }

    pub fn dynamics_mlp(&self) -> MlpParams {
        let layers: Vec<Dense> = self.views.dynamics.iter().map(|&v| self.dense(v)).collect();
        let acts = Self::mlp_activations(layers.len(), Activation::Tanh, Activation::None);
        MlpParams::new(layers, acts).expect("layout chains")
    }

    pub fn decoder_mlp(&self) -> MlpParams {
        let layers: Vec<Dense> = self.views.decoder.iter().map(|&v| self.dense(v)).collect();
        let acts = Self::mlp_activations(layers.len(), Activation::Relu, Activation::Sigmoid);
        MlpParams::new(layers, acts).expect("layout chains")
    }

    fn check_district(&self, d: usize) -> Result<(), ModelError> {
        if d >= self.config.n_districts {
            return Err(ModelError::District {
                index: d,
                count: self.config.n_districts,
            });
        }
        Ok(())
    }

    pub fn district_dynamics(&self, d: usize) -> Result<DistrictDynamics, ModelError> {
        self.check_district(d)?;
        let mut params = Vec::with_capacity(2 * self.views.dynamics.len() + 1);
        for &(w, b) in &self.views.dynamics {
            params.push(self.tensor(w));
            params.push(self.tensor(b));
        }
        let row = self.embeddings().row(d).expect("checked").to_vec();
        params.push(Tensor::vector(row));
        Ok(DistrictDynamics {
            params,
            activations: Self::mlp_activations(
                self.views.dynamics.len(),
                Activation::Tanh,
                Activation::None,
            ),
            latent: self.config.latent_dim,
            time_input: self.config.time_input,
        })
    }

    /// Records the encoder for district `d` on `tape` and returns `z0`.
    /// `series` is `[T, n_indicators]` row-major.
    fn encode_on(
        &self,
        tape: &mut Tape,
        table: Var,
        gru: &GruVars,
        readout: &DenseVars,
        series: &[f64],
        d: usize,
    ) -> Result<Var, ModelError> {
        let ni = self.config.n_indicators;
        if series.is_empty() {
            return Err(ModelError::EmptySeries);
        }
        if series.len() % ni != 0 {
            return Err(ModelError::Dimension(format!(
                "series length {} is not a multiple of {ni}",
                series.len()
            )));
        }
        let e_d = embed_lookup(tape, table, d)?;
        let mut rows: Vec<Var> = Vec::with_capacity(series.len() / ni);
        for x in series.chunks(ni) {
            let xv = tape.constant(Tensor::from_parts(vec![ni], x.to_vec()));
            rows.push(tape.concat(&[xv, e_d])?);
        }
        if self.config.reverse_encoder {
            rows.reverse();
        }
        let h0 = tape.constant(Tensor::zeros(&[self.config.encoder_hidden]));
        let h = gru_encode(tape, gru, &rows, h0)?;
        Ok(nn::dense_forward(tape, readout, h)?)
    }

    /// `z0` for district `d` from its `[T, n_indicators]` observation series
    /// (masked cells as 0).
    pub fn encode(&self, series: &[f64], d: usize) -> Result<Vec<f64>, ModelError> {
        self.check_district(d)?;
        let mut tape = Tape::new();
        let table = tape.constant(self.embeddings().table);
        let gru = self.gru().bind(&mut tape, false);
        let readout = self.readout().bind(&mut tape, false);
        let z0 = self.encode_on(&mut tape, table, &gru, &readout, series, d)?;
        Ok(tape.value(z0).data().to_vec())
    }

    pub fn dynamics(&self, z: &[f64], d: usize) -> Result<Vec<f64>, ModelError> {
        self.check_latent(z)?;
        let f = self.district_dynamics(d)?;
        Ok(odeint::Dynamics::eval(&Frozen(&f), 0.0, z)?)
    }

    fn check_latent(&self, z: &[f64]) -> Result<(), ModelError> {
        if z.len() != self.config.latent_dim {
            return Err(ModelError::Dimension(format!(
                "latent state has {} entries, expected {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    fn decode_on(
        &self,
        tape: &mut Tape,
        mlp: &MlpVars,
        e_d: Var,
        z: Var,
    ) -> Result<Var, ModelError> {
        let input = tape.concat(&[z, e_d])?;
        Ok(mlp_forward(tape, mlp, input)?)
    }

    /// Indicator estimates in (0, 1) for latent state `z` of district `d`.
    pub fn decode(&self, z: &[f64], d: usize) -> Result<Vec<f64>, ModelError> {
        self.check_district(d)?;
        self.check_latent(z)?;
        let mut tape = Tape::new();
        let table = tape.constant(self.embeddings().table);
        let e_d = embed_lookup(&mut tape, table, d)?;
        let mlp = self.decoder_mlp().bind(&mut tape, false);
        let zv = tape.constant(Tensor::vector(z.to_vec()));
        let out = self.decode_on(&mut tape, &mlp, e_d, zv)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Latent states at `query_times` starting from `z0` at time 0. The
    /// integration grid is the union of `grid_times` and `query_times`, so
    /// any two calls sharing a grid produce bit-identical states at shared
    /// points.
    pub fn latent_path(
        &self,
        d: usize,
        z0: &[f64],
        grid_times: &[f64],
        query_times: &[f64],
        solver: &SolverConfig,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        if let Some(&t) = query_times.iter().chain(grid_times).find(|&&t| !(t >= 0.0)) {
            return Err(ModelError::BeforeOrigin(t));
        }
        let mut grid: Vec<f64> = grid_times.iter().chain(query_times).copied().collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let f = self.district_dynamics(d)?;
        let sol = odeint::solve_at(&Frozen(&f), z0, 0.0, &grid, solver)?;
        Ok(query_times
            .iter()
            .map(|q| {
                let i = grid.iter().position(|g| g == q).expect("query is on the grid");
                sol.states[i].clone()
            })
            .collect())
    }

    /// Decoded indicators `[Q][n_indicators]` at `query_times` from a given
    /// `z0`.
    pub fn trajectory_from_z0(
        &self,
        d: usize,
        z0: &[f64],
        grid_times: &[f64],
        query_times: &[f64],
        solver: &SolverConfig,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_latent(z0)?;
        self.latent_path(d, z0, grid_times, query_times, solver)?
            .iter()
            .map(|z| self.decode(z, d))
            .collect()
    }

    /// Encode district `d` from `panel`, integrate from 0, decode at
    /// `query_times` (normalized). The panel's observation times are always
    /// on the integration grid.
    pub fn trajectory(
        &self,
        panel: &IndicatorPanel,
        ts: &TimeScale,
        d: usize,
        query_times: &[f64],
        solver: &SolverConfig,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_panel(panel)?;
        self.check_district(d)?;
        let z0 = self.encode(panel.district_values(d), d)?;
        self.trajectory_from_z0(d, &z0, &panel.times(ts), query_times, solver)
    }

    pub fn check_panel(&self, panel: &IndicatorPanel) -> Result<(), ModelError> {
        if panel.n_districts() != self.config.n_districts
            || panel.n_indicators() != self.config.n_indicators
        {
            return Err(ModelError::Dimension(format!(
                "panel has {} districts × {} indicators, model expects {} × {}",
                panel.n_districts(),
                panel.n_indicators(),
                self.config.n_districts,
                self.config.n_indicators
            )));
        }
        if panel.n_times() == 0 {
            return Err(ModelError::EmptySeries);
        }
        Ok(())
    }

    /// Mean squared residual over observed cells.
    pub fn batch_loss(
        &self,
        panel: &IndicatorPanel,
        ts: &TimeScale,
        solver: &SolverConfig,
    ) -> Result<LossReport, ModelError> {
        self.check_panel(panel)?;
        let observed = panel.observed_count();
        if observed == 0 {
            return Err(ModelError::NoObservations);
        }
        let times = panel.times(ts);
        let per_district: Vec<Vec<Vec<f64>>> = (0..panel.n_districts())
            .into_par_iter()
            .map(|d| self.trajectory(panel, ts, d, &times, solver))
            .collect::<Result<_, _>>()?;
        let predictions: Vec<f64> = per_district.into_iter().flatten().flatten().collect();
        let residuals: Vec<f64> = predictions
            .iter()
            .zip(panel.values().data())
            .zip(panel.mask())
            .map(|((p, x), &m)| if m { p - x } else { 0.0 })
            .collect();
        let sse: f64 = residuals.iter().map(|r| r * r).sum();
        Ok(LossReport {
            loss: sse / observed as f64,
            predictions,
            residuals,
            observed,
        })
    }

    /// Sum of squared residuals of district `d` and its contribution to the
    /// gradient of the panel MSE (which divides by `n_total`).
    pub fn district_gradient(
        &self,
        panel: &IndicatorPanel,
        ts: &TimeScale,
        d: usize,
        n_total: usize,
        solver: &SolverConfig,
    ) -> Result<(f64, GradientMap), ModelError> {
        self.check_district(d)?;
        let series = panel.district_values(d);
        let mask = panel.district_mask(d);
        let times = panel.times(ts);
        let mut grad = GradientMap::zeros(&self.layout);
        let emb = self.embeddings().table;

        // encoder, kept for the final backward sweep
        let mut enc = Tape::new();
        let table = enc.input(emb.clone());
        let gru_params = self.gru();
        let gru = gru_params.bind(&mut enc, true);
        let readout = self.readout().bind(&mut enc, true);
        let z0_var = self.encode_on(&mut enc, table, &gru, &readout, series, d)?;
        let z0 = enc.value(z0_var).data().to_vec();

        let dynamics = self.district_dynamics(d)?;
        let sol = odeint::solve_at(&Frozen(&dynamics), &z0, 0.0, &times, solver)?;

        // decoder at every observation time, one tape
        let mut dec = Tape::new();
        let dec_table = dec.input(emb);
        let e_d = embed_lookup(&mut dec, dec_table, d)?;
        let mlp_params = self.decoder_mlp();
        let mlp = mlp_params.bind(&mut dec, true);
        let mut z_vars = Vec::with_capacity(times.len());
        let mut outputs = Vec::with_capacity(times.len());
        for z in &sol.states {
            let zv = dec.input(Tensor::vector(z.clone()));
            outputs.push(self.decode_on(&mut dec, &mlp, e_d, zv)?);
            z_vars.push(zv);
        }
        let all = dec.concat(&outputs)?;
        let pred = dec.value(all).data();
        let mut sse = 0.0;
        let scale = 2.0 / n_total as f64;
        let cot: Vec<f64> = pred
            .iter()
            .zip(series)
            .zip(mask)
            .map(|((p, x), &m)| {
                if m {
                    sse += (p - x) * (p - x);
                    scale * (p - x)
                } else {
                    0.0
                }
            })
            .collect();
        let dg = dec.backward(all, &Tensor::vector(cot))?;
        grad.add_view(
            &self.layout,
            self.views.embeddings,
            dg.get_or_zeros(&dec, dec_table).data(),
        );
        for (layer, &(w, b)) in mlp.layers.iter().zip(&self.views.decoder) {
            grad.add_view(&self.layout, w, dg.get_or_zeros(&dec, layer.weight).data());
            let bias = layer.bias.expect("decoder layers have biases");
            grad.add_view(&self.layout, b, dg.get_or_zeros(&dec, bias).data());
        }
        let z_cots: Vec<Vec<f64>> = z_vars
            .iter()
            .map(|&zv| dg.get_or_zeros(&dec, zv).into_data())
            .collect();

        // adjoint through the latent ODE
        let obs: Vec<Observation<'_>> = times
            .iter()
            .zip(&sol.states)
            .zip(&z_cots)
            .map(|((&time, state), cot)| Observation {
                time,
                state,
                cotangent: cot,
            })
            .collect();
        let adj = adjoint::adjoint_observations(&dynamics, 0.0, &obs, solver)?;
        let mut offset = 0;
        for &(w, b) in &self.views.dynamics {
            for view in [w, b] {
                let n = self.layout.view(view).len();
                grad.add_view(&self.layout, view, &adj.dtheta[offset..offset + n]);
                offset += n;
            }
        }
        let e = self.config.embed_dim;
        let mut row_grad = vec![0.0; self.config.n_districts * e];
        row_grad[d * e..(d + 1) * e].copy_from_slice(&adj.dtheta[offset..offset + e]);
        grad.add_view(&self.layout, self.views.embeddings, &row_grad);

        // encoder
        let eg = enc.backward(z0_var, &Tensor::vector(adj.dz0))?;
        grad.add_view(
            &self.layout,
            self.views.embeddings,
            eg.get_or_zeros(&enc, table).data(),
        );
        let gru_vars = [
            gru.w_z, gru.u_z, gru.b_z, gru.w_r, gru.u_r, gru.b_r, gru.w_h, gru.u_h, gru.b_h,
        ];
        for (var, &view) in gru_vars.iter().zip(&self.views.gru) {
            grad.add_view(&self.layout, view, eg.get_or_zeros(&enc, *var).data());
        }
        grad.add_view(
            &self.layout,
            self.views.readout_weight,
            eg.get_or_zeros(&enc, readout.weight).data(),
        );
        if let (Some(view), Some(var)) = (self.views.readout_bias, readout.bias) {
            grad.add_view(&self.layout, view, eg.get_or_zeros(&enc, var).data());
        }
        Ok((sse, grad))
    }

    /// Panel MSE and its gradient. Districts are processed in parallel and
    /// reduced in index order.
    pub fn loss_and_gradient(
        &self,
        panel: &IndicatorPanel,
        ts: &TimeScale,
        solver: &SolverConfig,
    ) -> Result<(f64, GradientMap), ModelError> {
        self.check_panel(panel)?;
        let n_total = panel.observed_count();
        if n_total == 0 {
            return Err(ModelError::NoObservations);
        }
        let parts: Vec<(f64, GradientMap)> = (0..panel.n_districts())
            .into_par_iter()
            .map(|d| self.district_gradient(panel, ts, d, n_total, solver))
            .collect::<Result<_, _>>()?;
        let mut grad = GradientMap::zeros(&self.layout);
        let mut sse = 0.0;
        for (s, g) in &parts {
            sse += s;
            grad.accumulate(g);
        }
        Ok((sse / n_total as f64, grad))
    }

    /// Path of the JSON sidecar for a checkpoint at `path`.
    pub fn meta_path(path: &Path) -> PathBuf {
        path.with_extension("config.json")
    }

    pub fn save(&self, path: &Path, meta: &ModelMeta) -> Result<(), ModelError> {
        checkpoint::save(path, &self.layout, &self.params)?;
        let meta_path = Self::meta_path(path);
        let json = serde_json::to_string_pretty(meta).expect("meta serializes");
        std::fs::write(&meta_path, json + "\n").map_err(|e| ModelError::Io {
            path: meta_path,
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<(Self, ModelMeta), ModelError> {
        let meta_path = Self::meta_path(path);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| ModelError::Io {
            path: meta_path.clone(),
            source: e,
        })?;
        let meta: ModelMeta = serde_json::from_str(&text)
            .map_err(|e| ModelError::Config(format!("{}: {e}", meta_path.display())))?;
        let tensors = checkpoint::load(path)?;
        let (layout, _) = build_layout(&meta.config);
        let params = checkpoint::unpack(&layout, &tensors)?;
        Ok((Self::from_params(meta.config.clone(), params)?, meta))
    }
}
