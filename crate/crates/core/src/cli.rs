//! Command-line surface of the `dnode` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::data::{self, DataError, IndicatorPanel, TimeScale};
use crate::model::{ModelConfig, ModelError, ModelMeta, PovertyModel};
use crate::odeint::SolverConfig;
use crate::pca;
use crate::selfcheck::{self, SelfcheckError};
use crate::train::{self, TrainConfig, TrainError};

/// Final loss reported for the original survey panel, which is not public.
pub const REFERENCE_LOSS: f64 = 0.000479;
pub const REFERENCE_RMSE: f64 = 0.021885;

#[derive(Debug, Parser)]
#[command(name = "dnode", version, about = "District-embedded latent ODE forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a panel CSV.
    Train(TrainArgs),
    /// Per-indicator RMSE of a checkpoint on a panel.
    Evaluate(EvaluateArgs),
    /// Indicator forecasts for calendar years.
    Forecast(ForecastArgs),
    /// Finite-difference checks of the gradient code.
    Gradcheck(GradcheckArgs),
    /// Two-component PCA of the district embeddings.
    Embeddings(EmbeddingsArgs),
    /// Write the synthetic logistic panel.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub atol: Option<f64>,
}

impl SolverArgs {
    fn apply(&self, mut cfg: SolverConfig) -> SolverConfig {
        if let Some(r) = self.rtol {
            cfg.rtol = r;
        }
        if let Some(a) = self.atol {
            cfg.atol = a;
        }
        cfg
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to `<out>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub reverse_encoder: bool,
    #[arg(long)]
    pub decoupled_wd: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "2026,2030",
        value_parser = clap::value_parser!(u32).range(1900..)
    )]
    pub years: Vec<u32>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate every analytic gradient.
    #[arg(long, hide = true)]
    pub sabotage: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EmbeddingsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub districts: usize,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Selfcheck(#[from] SelfcheckError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("district {district}, year {year}: {source}")]
    Forecast {
        district: String,
        year: u32,
        source: ModelError,
    },
    #[error("checkpoint districts do not match the panel: {0}")]
    Districts(String),
    #[error("gradient check failed: max relative error {max_error:.3e}")]
    Gradcheck { max_error: f64 },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Short category used in the one-line error message.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Data(DataError::Io { .. }) | CliError::Io { .. } => "io",
            CliError::Data(_) => "data",
            CliError::Model(ModelError::Checkpoint(CheckpointError::Io { .. }))
            | CliError::Model(ModelError::Io { .. }) => "io",
            CliError::Model(_) | CliError::Districts(_) => "model",
            CliError::Train(_) => "train",
            CliError::Selfcheck(_) | CliError::Gradcheck { .. } => "gradcheck",
            CliError::Forecast { .. } => "solver",
            CliError::Usage(_) => "usage",
        }
    }

    /// `error[<code>]: <message>` on a single line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {msg}", self.code())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn load_model(path: &Path) -> Result<(PovertyModel, ModelMeta), CliError> {
    Ok(PovertyModel::load(path)?)
}

fn check_districts(meta: &ModelMeta, panel: &IndicatorPanel) -> Result<(), CliError> {
    if meta.district_names != panel.district_names() {
        let first = meta
            .district_names
            .iter()
            .zip(panel.district_names())
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("`{a}` vs `{b}`"))
            .unwrap_or_else(|| {
                format!(
                    "{} vs {} districts",
                    meta.district_names.len(),
                    panel.n_districts()
                )
            });
        return Err(CliError::Districts(first));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub rmse: f64,
    pub epochs: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl TrainSummary {
    pub fn line(&self) -> String {
        format!(
            "final_loss={:.6e} rmse={:.6} epochs={} (reference on the unpublished survey panel: loss {REFERENCE_LOSS}, rmse {REFERENCE_RMSE})",
            self.final_loss, self.rmse, self.epochs
        )
    }
}

pub fn cmd_train(args: &TrainArgs, progress: &mut dyn Write) -> Result<TrainSummary, CliError> {
    let panel = data::load_panel(&args.data)?;
    ensure_dir(&args.out)?;
    let ts = TimeScale::default();
    let solver = args.solver.apply(SolverConfig::default());
    let config = ModelConfig {
        n_districts: panel.n_districts(),
        n_indicators: panel.n_indicators(),
        reverse_encoder: args.reverse_encoder,
        ..ModelConfig::default()
    };
    let model = PovertyModel::new(config, args.seed)?;
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        lr_max: args.lr,
        seed: args.seed,
        decoupled_weight_decay: args.decoupled_wd,
        ..TrainConfig::default()
    };
    let (model, log) = train::fit(model, &panel, &ts, &train_cfg, &solver, |r| {
        if r.epoch % 100 == 0 || r.epoch == 1 {
            let _ = writeln!(progress, "epoch {} loss {:.6e} lr {:.3e}", r.epoch, r.loss, r.lr);
        }
    })?;
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.out.join("model.ckpt"));
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let meta = ModelMeta {
        config: model.config().clone(),
        district_names: panel.district_names().to_vec(),
        time_scale: ts,
        solver: solver.clone(),
    };
    model.save(&checkpoint, &meta)?;
    let log_path = args.out.join("train_log.csv");
    log.save(&log_path).map_err(io_err(&log_path))?;
    // the logged loss precedes each update, so report the trained model's
    let final_loss = model.batch_loss(&panel, &ts, &solver)?.loss;
    Ok(TrainSummary {
        final_loss,
        rmse: final_loss.sqrt(),
        epochs: args.epochs,
        checkpoint,
        log: log_path,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmseTable {
    /// `(indicator, rmse)`; indicators without observed cells are `NaN`.
    pub rows: Vec<(String, f64)>,
    pub overall: f64,
}

impl RmseTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("indicator,rmse\n");
        for (name, r) in &self.rows {
            out.push_str(&format!("{name},{r}\n"));
        }
        out.push_str(&format!("overall,{}\n", self.overall));
        out
    }
}

/// RMSE per indicator and overall over the observed cells of `panel`.
pub fn rmse_table(
    model: &PovertyModel,
    panel: &IndicatorPanel,
    ts: &TimeScale,
    solver: &SolverConfig,
) -> Result<RmseTable, CliError> {
    let report = model.batch_loss(panel, ts, solver)?;
    let ni = panel.n_indicators();
    let mut sums = vec![0.0; ni];
    let mut counts = vec![0usize; ni];
    for (i, (r, &m)) in report.residuals.iter().zip(panel.mask()).enumerate() {
        if m {
            sums[i % ni] += r * r;
            counts[i % ni] += 1;
        }
    }
    let rows = panel
        .indicator_names()
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(name, (s, &c))| (name.clone(), (s / c as f64).sqrt()))
        .collect();
    Ok(RmseTable {
        rows,
        overall: report.loss.sqrt(),
    })
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(RmseTable, PathBuf), CliError> {
    let panel = data::load_panel(&args.data)?;
    let (model, meta) = load_model(&args.checkpoint)?;
    model.check_panel(&panel)?;
    check_districts(&meta, &panel)?;
    let solver = args.solver.apply(meta.solver.clone());
    let table = rmse_table(&model, &panel, &meta.time_scale, &solver)?;
    ensure_dir(&args.out)?;
    let path = args.out.join("rmse.csv");
    write_file(&path, &table.to_csv())?;
    Ok((table, path))
}

/// Forecasts for one calendar year, one row per district.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub year: u32,
    pub districts: Vec<String>,
    pub indicators: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Forecast {
    fn header(&self) -> String {
        format!("district,{}\n", self.indicators.join(","))
    }

    /// Values rounded to three decimals.
    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        for (name, row) in self.districts.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }

    /// Shortest round-trip representation of every value.
    pub fn to_full_csv(&self) -> String {
        let mut out = self.header();
        for (name, row) in self.districts.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        out
    }
}

/// Encodes each district, integrates to `year` and decodes. Each year is
/// solved on the panel's observation grid plus that year alone, so a year
/// that coincides with an observation reproduces the fitted value exactly.
pub fn forecast_years(
    model: &PovertyModel,
    panel: &IndicatorPanel,
    ts: &TimeScale,
    years: &[u32],
    solver: &SolverConfig,
) -> Result<Vec<Forecast>, CliError> {
    if years.is_empty() {
        return Err(CliError::Usage("no forecast years given".into()));
    }
    model.check_panel(panel)?;
    let grid = panel.times(ts);
    let mut out = Vec::with_capacity(years.len());
    for &year in years {
        let t = ts.normalize(year as f64);
        let mut values = Vec::with_capacity(panel.n_districts());
        for d in 0..panel.n_districts() {
            let wrap = |source| CliError::Forecast {
                district: panel.district_names()[d].clone(),
                year,
                source,
            };
            let z0 = model.encode(panel.district_values(d), d).map_err(wrap)?;
            let mut rows = model
                .trajectory_from_z0(d, &z0, &grid, &[t], solver)
                .map_err(wrap)?;
            values.push(rows.remove(0));
        }
        out.push(Forecast {
            year,
            districts: panel.district_names().to_vec(),
            indicators: panel.indicator_names().to_vec(),
            values,
        });
    }
    Ok(out)
}

pub fn cmd_forecast(args: &ForecastArgs) -> Result<Vec<(Forecast, PathBuf)>, CliError> {
    let panel = data::load_panel(&args.data)?;
    let (model, meta) = load_model(&args.checkpoint)?;
    model.check_panel(&panel)?;
    check_districts(&meta, &panel)?;
    let solver = args.solver.apply(meta.solver.clone());
    let forecasts = forecast_years(&model, &panel, &meta.time_scale, &args.years, &solver)?;
    ensure_dir(&args.out)?;
    let mut written = Vec::with_capacity(forecasts.len());
    for f in forecasts {
        let path = args.out.join(format!("forecast_{}.csv", f.year));
        write_file(&path, &f.to_csv())?;
        let full = args.out.join(format!("forecast_{}_full.csv", f.year));
        write_file(&full, &f.to_full_csv())?;
        written.push((f, path));
    }
    Ok(written)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<selfcheck::GradcheckReport, CliError> {
    Ok(selfcheck::run_suite(args.seed, args.sabotage)?)
}

#[derive(Clone, Debug)]
pub struct EmbeddingProjection {
    pub districts: Vec<String>,
    pub projection: pca::Projection,
}

impl EmbeddingProjection {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("district,pc1,pc2\n");
        for (name, s) in self.districts.iter().zip(&self.projection.scores) {
            out.push_str(&format!("{name},{},{}\n", s[0], s[1]));
        }
        out
    }
}

pub fn cmd_embeddings(args: &EmbeddingsArgs) -> Result<(EmbeddingProjection, PathBuf), CliError> {
    let (model, meta) = load_model(&args.checkpoint)?;
    let table = model.embeddings();
    let projection = pca::project_2d(table.table.data(), table.dim());
    let result = EmbeddingProjection {
        districts: meta.district_names,
        projection,
    };
    ensure_dir(&args.out)?;
    let path = args.out.join("embeddings_pca.csv");
    write_file(&path, &result.to_csv())?;
    Ok((result, path))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf, CliError> {
    if args.districts == 0 {
        return Err(CliError::Usage("--districts must be positive".into()));
    }
    ensure_dir(&args.out)?;
    let path = args.out.join("synthetic_panel.csv");
    data::save_panel(&data::synthetic_panel(args.districts, args.seed), &path)?;
    Ok(path)
}

/// Runs one parsed command, writing human output to `out` and progress or
/// warnings to `err`.
pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let io = |e| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    match &cli.command {
        Command::Train(args) => {
            let s = cmd_train(args, err)?;
            writeln!(out, "checkpoint {}", s.checkpoint.display()).map_err(io)?;
            writeln!(out, "train_log {}", s.log.display()).map_err(io)?;
            writeln!(out, "{}", s.line()).map_err(io)?;
        }
        Command::Evaluate(args) => {
            let (table, path) = cmd_evaluate(args)?;
            for (name, r) in &table.rows {
                writeln!(out, "{name:<20} {r:.6}").map_err(io)?;
            }
            writeln!(out, "{:<20} {:.6}", "overall", table.overall).map_err(io)?;
            writeln!(out, "wrote {}", path.display()).map_err(io)?;
        }
        Command::Forecast(args) => {
            for (f, path) in cmd_forecast(args)? {
                writeln!(out, "{}: wrote {}", f.year, path.display()).map_err(io)?;
            }
        }
        Command::Gradcheck(args) => {
            let report = cmd_gradcheck(args)?;
            write!(out, "{}", report.render()).map_err(io)?;
            if !report.passed() {
                return Err(CliError::Gradcheck {
                    max_error: report.max_error(),
                });
            }
        }
        Command::Embeddings(args) => {
            let (proj, path) = cmd_embeddings(args)?;
            if proj.projection.rank_deficient {
                writeln!(
                    err,
                    "warning: embedding covariance has rank < 2; missing components are 0"
                )
                .map_err(io)?;
            }
            writeln!(out, "wrote {}", path.display()).map_err(io)?;
        }
        Command::Synth(args) => {
            let path = cmd_synth(args)?;
            writeln!(out, "wrote {}", path.display()).map_err(io)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn years_parse_as_comma_list() {
        let cli = Cli::try_parse_from([
            "dnode", "forecast", "--data", "p.csv", "--checkpoint", "m.ckpt", "--years",
            "2026,2030",
        ])
        .unwrap();
        let Command::Forecast(args) = cli.command else {
            panic!("wrong subcommand")
        };
        assert_eq!(args.years, vec![2026, 2030]);
        assert!(Cli::try_parse_from([
            "dnode", "forecast", "--data", "p", "--checkpoint", "m", "--years", "1850"
        ])
        .is_err());
    }

    #[test]
    fn error_lines_are_single_line() {
        let e = CliError::Usage("a\nb".into());
        assert_eq!(e.one_line(), "error[usage]: a b");
        let missing = data::load_panel(Path::new("/nonexistent/panel.csv")).unwrap_err();
        let line = CliError::from(missing).one_line();
        assert!(line.starts_with("error[io]: "));
        assert!(line.to_lowercase().contains("no such file"));
    }

    #[test]
    fn forecast_csv_rounds_to_three_decimals() {
        let f = Forecast {
            year: 2026,
            districts: vec!["Angul".into()],
            indicators: vec!["toilet".into(), "lpg".into()],
            values: vec![vec![0.86549, 0.1]],
        };
        assert_eq!(f.to_csv(), "district,toilet,lpg\nAngul,0.865,0.100\n");
        assert_eq!(f.to_full_csv(), "district,toilet,lpg\nAngul,0.86549,0.1\n");
    }

    /// A model whose encoder ignores the observations, with targets set to
    /// its own predictions.
    pub(crate) fn perfect_fit_fixture() -> (PovertyModel, IndicatorPanel) {
        let ts = TimeScale::default();
        let solver = SolverConfig::default();
        let base = data::synthetic_panel(2, 0);
        let mut model = PovertyModel::new(ModelConfig::small(2), 3).unwrap();
        let ni = model.config().n_indicators;
        for gate in ["z", "r", "h"] {
            let view = model.layout().find(&format!("encoder.gru.w_{gate}")).unwrap();
            let v = model.layout().view(view).clone();
            let cols = v.shape[1];
            for row in 0..v.shape[0] {
                let start = v.offset + row * cols;
                model.params_mut()[start..start + ni].fill(0.0);
            }
        }
        let report = model.batch_loss(&base, &ts, &solver).unwrap();
        let fixture = IndicatorPanel::new(
            crate::Tensor::new(vec![2, 3, 6], report.predictions).unwrap(),
            vec![true; 36],
            base.years().to_vec(),
            base.district_names().to_vec(),
            base.indicator_names().to_vec(),
        )
        .unwrap();
        (model, fixture)
    }

    #[test]
    fn rmse_of_self_generated_targets_is_zero() {
        let (model, fixture) = perfect_fit_fixture();
        let ts = TimeScale::default();
        let table = rmse_table(&model, &fixture, &ts, &SolverConfig::default()).unwrap();
        assert_eq!(table.overall, 0.0);
        assert_eq!(table.rows.len(), 6);
        assert!(table.rows.iter().all(|(_, r)| *r == 0.0));
    }

    #[test]
    fn overall_rmse_matches_batch_loss() {
        let ts = TimeScale::default();
        let solver = SolverConfig::default();
        let panel = data::synthetic_panel(2, 5);
        let model = PovertyModel::new(ModelConfig::small(2), 1).unwrap();
        let table = rmse_table(&model, &panel, &ts, &solver).unwrap();
        let loss = model.batch_loss(&panel, &ts, &solver).unwrap().loss;
        assert_eq!(table.overall, loss.sqrt());
        let mean_sq: f64 = table.rows.iter().map(|(_, r)| r * r).sum::<f64>() / 6.0;
        assert!((mean_sq - loss).abs() < 1e-15);
    }
}
