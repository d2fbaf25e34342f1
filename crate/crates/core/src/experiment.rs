//! Experiment configuration and end-to-end runs: synthetic data generation,
//! training, evaluation against the known infection function, case-data
//! fitting and the plot tables written for each run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    generate_synthetic, CaseSeries, CovidWindow, DataError, Dataset, DatasetMeta, Perturbation,
    ScaledCases, TrueBeta,
};
use crate::epimodels::{check_conditions, ConditionReport, EpidemicModel, ModelError};
use crate::nn::{Activation, Mlp, NnError};
use crate::ode::{grid_steps, integrate_steps, Method, OdeError};
use crate::train::{
    train_with_progress, vanishing_gradient_probe, IterationRecord, NeuralBeta, ProbeReport,
    Problem, TrainConfig, TrainError, TrainReport,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

impl ExperimentError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn default_one() -> f64 {
    1.0
}

fn default_sigma() -> f64 {
    0.02
}

fn default_substeps() -> usize {
    1
}

fn default_population() -> f64 {
    3.32e8
}

fn default_target_r0() -> f64 {
    0.5
}

fn default_seed_size() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Inputs are multiplied by this before entering the network.
    #[serde(default = "default_one")]
    pub input_scale: f64,
    /// Multiplies the freshly initialised output layer.
    #[serde(default = "default_one")]
    pub output_scale: f64,
    /// Fixed factor applied to the network output.
    #[serde(default = "default_one")]
    pub output_gain: f64,
    /// Initial value added to the output-layer biases.
    #[serde(default)]
    pub output_bias: f64,
}

/// Known infection function and perturbation used to generate data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub beta: TrueBeta,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    pub seed: u64,
    /// Euler steps per sampling interval.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovidConfig {
    #[serde(default = "default_population")]
    pub population: f64,
    pub window: CovidWindow,
    /// Case CSV, relative to the config file.
    #[serde(default)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// The network's output layer is rescaled so that R0 equals this.
    #[serde(default = "default_target_r0")]
    pub target_r0: f64,
    /// Infected values added to the disease-free equilibrium.
    #[serde(default = "default_seed_size")]
    pub infected_seed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: EpidemicModel,
    /// Initial state; derived from the data for case-data runs.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub t0: f64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub covid: Option<CovidConfig>,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    /// Where the config was read from; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        config.base_dir = path.parent().map(Path::to_path_buf);
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.model.validate()?;
        self.train.validate()?;
        let net = &self.network;
        if net.dims.first() != Some(&1) || net.dims.last() != Some(&1) {
            return bad(format!("network must map 1 input to 1 output, got {:?}", net.dims));
        }
        if !(net.output_scale.is_finite() && net.output_bias.is_finite()) {
            return bad("network.output_scale and network.output_bias must be finite".into());
        }
        match (&self.x0, &self.covid) {
            (Some(x0), _) => self.model.check_state(x0)?,
            (None, None) => return bad("x0 is required unless a [covid] section is given".into()),
            (None, Some(_)) => {}
        }
        if let Some(c) = &self.covid {
            if !matches!(self.model, EpidemicModel::ScaledSir(_)) {
                return bad("case-data fitting needs the scaled_sir model".into());
            }
            if !(c.population > 0.0 && c.population.is_finite()) {
                return bad(format!("population must be positive, got {}", c.population));
            }
        }
        if let Some(s) = &self.synthetic {
            if !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite()) {
                return bad(format!("noise_sigma must be non-negative, got {}", s.noise_sigma));
            }
            if s.substeps == 0 {
                return bad("substeps must be at least 1".into());
            }
            if self.train.t_end.is_none() {
                return bad("synthetic runs need train.T".into());
            }
        }
        if let Some(p) = &self.probe {
            if !(p.target_r0 >= 0.0 && p.target_r0 < 1.0) {
                return bad(format!("probe.target_r0 must lie in [0, 1), got {}", p.target_r0));
            }
            if !(p.infected_seed >= 0.0 && p.infected_seed.is_finite()) {
                return bad(format!("probe.infected_seed must be non-negative, got {}", p.infected_seed));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }

    fn x0(&self) -> Result<&[f64], ExperimentError> {
        self.x0
            .as_deref()
            .ok_or_else(|| ExperimentError::Config("x0 is not set".into()))
    }

    fn synthetic(&self) -> Result<&SyntheticConfig, ExperimentError> {
        self.synthetic
            .as_ref()
            .ok_or_else(|| ExperimentError::Config("no [synthetic] section".into()))
    }

    fn t_end(&self) -> Result<f64, ExperimentError> {
        self.train
            .t_end
            .ok_or_else(|| ExperimentError::Config("train.T is not set".into()))
    }

    /// Freshly initialised network seeded by `train.seed`.
    pub fn initial_network(&self) -> Result<NeuralBeta, ExperimentError> {
        let net = &self.network;
        let mut mlp = Mlp::init(&net.dims, &net.activations, self.train.seed)?;
        mlp.scale_output(net.output_scale);
        mlp.shift_output(net.output_bias);
        Ok(NeuralBeta::new(mlp, net.input_scale, net.output_gain)?)
    }

    /// Perturbed Euler run of the known infection function on the training grid.
    pub fn generate(&self) -> Result<Dataset, ExperimentError> {
        let s = self.synthetic()?;
        let noise = Perturbation {
            noise_sigma: s.noise_sigma,
            seed: s.seed,
        };
        Ok(generate_synthetic(
            &self.model,
            s.beta,
            self.x0()?,
            self.t0,
            self.t_end()?,
            self.train.dt,
            s.substeps,
            noise,
        )?)
    }

    /// The unperturbed generating trajectory at the sample times.
    pub fn clean_trajectory(&self) -> Result<Vec<(f64, Vec<f64>)>, ExperimentError> {
        let s = self.synthetic()?;
        let rhs = self.model.hybrid_rhs(|x: f64| s.beta.eval(x));
        let steps = grid_steps(self.t0, self.t_end()?, self.train.dt);
        let traj = integrate_steps(Method::Euler, &rhs, self.x0()?, self.t0, self.train.dt, steps, s.substeps)?;
        Ok((0..=steps).map(|i| (traj.time(i), traj.states[i].clone())).collect())
    }
}

/// Sidecar written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub experiment: String,
    pub model: String,
    pub beta: String,
    pub noise_sigma: f64,
    pub seed: u64,
    pub substeps: usize,
    pub t0: f64,
    pub dt: f64,
    pub points: usize,
}

impl DatasetSidecar {
    pub fn new(config: &ExperimentConfig, data: &Dataset) -> Result<Self, ExperimentError> {
        let s = config.synthetic()?;
        Ok(Self {
            experiment: config.name.clone(),
            model: config.model.name().to_string(),
            beta: s.beta.name().to_string(),
            noise_sigma: s.noise_sigma,
            seed: s.seed,
            substeps: s.substeps,
            t0: data.t0,
            dt: data.dt,
            points: data.values.len(),
        })
    }
}

/// A named numeric table written as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, DataError> {
        let mut r = csv::Reader::from_reader(input);
        let columns = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (k, record) in r.records().enumerate() {
            let row = record?
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| DataError::Row {
                    row: k + 2,
                    message: e.to_string(),
                })?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        let file = fs::File::create(path).map_err(|e| ExperimentError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file)).map_err(|e| match e {
            DataError::Io(io) => ExperimentError::io(path, io),
            DataError::Csv(c) => ExperimentError::io(path, c.into()),
            other => other.into(),
        })
    }
}

/// Loss curve as a table.
pub fn loss_table(history: &[IterationRecord]) -> Table {
    let mut t = Table::new(&["iteration", "mse", "penalty", "total", "r0"]);
    for (i, r) in history.iter().enumerate() {
        t.push(vec![i as f64, r.mse, r.penalty, r.total, r.r0]);
    }
    t
}

/// RK4 trajectory of the hybrid model with the fitted network.
pub fn fitted_trajectory(
    model: &EpidemicModel,
    beta: &NeuralBeta,
    x0: &[f64],
    data: &Dataset,
) -> Result<Vec<Vec<f64>>, ExperimentError> {
    let rhs = model.hybrid_rhs(|x: f64| beta.eval(x));
    let traj = integrate_steps(Method::Rk4, &rhs, x0, data.t0, data.dt, data.steps(), 1)?;
    Ok(traj.states)
}

fn fit_table(model: &EpidemicModel, data: &Dataset, states: &[Vec<f64>]) -> Table {
    let k = model.infected_index();
    let mut t = Table::new(&["t", "data", "fitted"]);
    for (i, (d, x)) in data.values.iter().zip(states).enumerate() {
        t.push(vec![data.time(i), *d, x[k]]);
    }
    t
}

/// Summary of a trained synthetic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Infection-function argument range visited by the samples.
    pub region: (f64, f64),
    /// `max - min` of the true function over `region`.
    pub true_range: f64,
    pub max_abs_error: f64,
    pub final_r0: f64,
    /// First iteration from which R0 stays at or above 1.
    pub r0_settled_at: Option<usize>,
}

impl Evaluation {
    pub fn mse_ratio(&self) -> f64 {
        self.final_mse / self.initial_mse
    }

    pub fn relative_error(&self) -> f64 {
        self.max_abs_error / self.true_range
    }
}

pub struct SyntheticOutcome {
    pub report: TrainReport,
    pub evaluation: Evaluation,
    pub fit: Table,
    pub beta: Table,
    pub error: Table,
    pub loss: Table,
}

impl SyntheticOutcome {
    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        write_common(dir, &self.report, &self.fit, &self.beta, &self.loss)?;
        self.error.save(&dir.join("panel_c_error.csv"))?;
        write_json(&dir.join("summary.json"), &self.evaluation)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| ExperimentError::io(path, e))
}

fn write_common(
    dir: &Path,
    report: &TrainReport,
    fit: &Table,
    beta: &Table,
    loss: &Table,
) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    let report_path = dir.join("report.csv");
    let file = fs::File::create(&report_path).map_err(|e| ExperimentError::io(&report_path, e))?;
    report
        .write_csv(std::io::BufWriter::new(file))
        .map_err(|e| match e {
            TrainError::Io(io) => ExperimentError::io(&report_path, io),
            other => other.into(),
        })?;
    let net_path = dir.join("beta.json");
    fs::write(&net_path, report.beta.to_json() + "\n").map_err(|e| ExperimentError::io(&net_path, e))?;
    fit.save(&dir.join("panel_a_fit.csv"))?;
    beta.save(&dir.join("panel_b_beta.csv"))?;
    loss.save(&dir.join("panel_d_loss.csv"))
}

/// Points on which the fitted function is compared with the true one.
pub const DENSE_POINTS: usize = 401;

fn r0_settled(history: &[IterationRecord]) -> Option<usize> {
    match history.iter().rposition(|r| r.r0 < 1.0) {
        None if history.is_empty() => None,
        None => Some(0),
        Some(i) if i + 1 < history.len() => Some(i + 1),
        Some(_) => None,
    }
}

/// Compares `fitted` with `truth` on [`DENSE_POINTS`] evenly spaced points of the
/// argument range visited by samples `1..=M` of `clean`.
pub fn compare_on_region(
    model: &EpidemicModel,
    truth: TrueBeta,
    fitted: &NeuralBeta,
    clean: &[(f64, Vec<f64>)],
) -> (Table, Table, (f64, f64), f64, f64) {
    let args = clean[1..].iter().map(|(t, x)| model.infection_argument(*t, x));
    let (lo, hi) = args.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let mut beta = Table::new(&["x", "beta_true", "beta_fitted"]);
    let mut error = Table::new(&["x", "abs_error"]);
    let (mut b_min, mut b_max, mut worst) = (f64::INFINITY, f64::NEG_INFINITY, 0.0_f64);
    for k in 0..DENSE_POINTS {
        let x = lo + (hi - lo) * k as f64 / (DENSE_POINTS - 1) as f64;
        let (b, f) = (truth.eval(x), fitted.eval(x));
        b_min = b_min.min(b);
        b_max = b_max.max(b);
        worst = worst.max((b - f).abs());
        beta.push(vec![x, b, f]);
        error.push(vec![x, (b - f).abs()]);
    }
    (beta, error, (lo, hi), b_max - b_min, worst)
}

/// Trains on `data` from the config's initial network and evaluates the
/// result against the generating infection function.
pub fn run_synthetic<F: FnMut(usize, &IterationRecord)>(
    config: &ExperimentConfig,
    data: &Dataset,
    progress: F,
) -> Result<SyntheticOutcome, ExperimentError> {
    let synthetic = config.synthetic()?;
    let x0 = config.x0()?;
    let problem = Problem {
        model: &config.model,
        x0,
        data,
    };
    let report = train_with_progress(&problem, &config.initial_network()?, &config.train, progress)?;
    let states = fitted_trajectory(&config.model, &report.beta, x0, data)?;
    let fit = fit_table(&config.model, data, &states);
    let clean = config.clean_trajectory()?;
    let (beta, error, region, true_range, max_abs_error) =
        compare_on_region(&config.model, synthetic.beta, &report.beta, &clean);
    let last = report.final_loss.or(report.history.last().copied());
    let evaluation = Evaluation {
        initial_mse: report.initial_mse().unwrap_or(f64::NAN),
        final_mse: report.final_mse().unwrap_or(f64::NAN),
        region,
        true_range,
        max_abs_error,
        final_r0: last.map_or(f64::NAN, |r| r.r0),
        r0_settled_at: r0_settled(&report.history),
    };
    let loss = loss_table(&report.history);
    Ok(SyntheticOutcome {
        report,
        evaluation,
        fit,
        beta,
        error,
        loss,
    })
}

/// Smooths, windows and scales a raw case series for the scaled SIR model.
pub fn prepare_covid(
    series: &CaseSeries,
    window: CovidWindow,
    population: f64,
    source: &Path,
) -> Result<ScaledCases, ExperimentError> {
    let windowed = series.smoothed()?.window(window)?;
    let meta = DatasetMeta::File {
        path: source.to_path_buf(),
        window: Some(window),
    };
    let first = windowed.counts[0];
    Ok(crate::data::scale_covid(&windowed.counts, population, first, meta)?)
}

/// Qualitative shape of a fitted curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    DecreasingThenFlat,
    IncreasingThenFlat,
    Other,
}

/// The flat tail may vary by at most this fraction of the total range.
pub const FLAT_TOLERANCE: f64 = 0.15;

/// Classifies `values` on a uniform grid as monotone-then-flat.
///
/// The flat tail starts at the first index after which the curve stays within
/// [`FLAT_TOLERANCE`] of its range; it must cover at least a fifth of the grid.
/// Before it, at least 90% of the steps must move in one direction and carry
/// the curve across at least 70% of its range.
pub fn classify_shape(values: &[f64]) -> Shape {
    let n = values.len();
    if n < 5 {
        return Shape::Other;
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Shape::Other;
    }
    // Running extremes of the suffix starting at each index.
    let mut start = n - 1;
    let (mut t_lo, mut t_hi) = (values[n - 1], values[n - 1]);
    for i in (0..n - 1).rev() {
        let (l, h) = (t_lo.min(values[i]), t_hi.max(values[i]));
        if h - l > FLAT_TOLERANCE * range {
            break;
        }
        (t_lo, t_hi, start) = (l, h, i);
    }
    if start == 0 || n - start < n / 5 {
        return Shape::Other;
    }
    let head = &values[..=start];
    let steps = head.len() - 1;
    let down = head.windows(2).filter(|w| w[1] < w[0]).count();
    let up = head.windows(2).filter(|w| w[1] > w[0]).count();
    let change = head[steps] - head[0];
    if down as f64 >= 0.9 * steps as f64 && -change >= 0.7 * range {
        Shape::DecreasingThenFlat
    } else if up as f64 >= 0.9 * steps as f64 && change >= 0.7 * range {
        Shape::IncreasingThenFlat
    } else {
        Shape::Other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovidSummary {
    pub window: CovidWindow,
    pub start_date: String,
    pub days: usize,
    pub scale: f64,
    pub x0: [f64; 2],
    pub initial_mse: f64,
    pub final_mse: f64,
    pub final_r0: f64,
    pub beta_max: f64,
    pub beta_min: f64,
    pub shape: Shape,
}

pub struct CovidOutcome {
    pub report: TrainReport,
    pub summary: CovidSummary,
    pub fit: Table,
    pub beta: Table,
    pub loss: Table,
}

impl CovidOutcome {
    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        write_common(dir, &self.report, &self.fit, &self.beta, &self.loss)?;
        write_json(&dir.join("summary.json"), &self.summary)
    }
}

/// Fits the scaled SIR model with a neural `beta(t)` to one window.
pub fn run_covid<F: FnMut(usize, &IterationRecord)>(
    config: &ExperimentConfig,
    cases: &ScaledCases,
    window: CovidWindow,
    progress: F,
) -> Result<CovidOutcome, ExperimentError> {
    let data = &cases.dataset;
    let problem = Problem {
        model: &config.model,
        x0: &cases.x0,
        data,
    };
    let mut train = config.train.clone();
    train.t_end = None;
    let report = train_with_progress(&problem, &config.initial_network()?, &train, progress)?;
    let states = fitted_trajectory(&config.model, &report.beta, &cases.x0, data)?;
    let fit = fit_table(&config.model, data, &states);
    let mut beta = Table::new(&["t", "beta_fitted"]);
    let curve: Vec<f64> = (0..data.values.len()).map(|i| report.beta.eval(data.time(i))).collect();
    for (i, b) in curve.iter().enumerate() {
        beta.push(vec![data.time(i), *b]);
    }
    let sampled = &curve[1..];
    let last = report.final_loss.or(report.history.last().copied());
    let summary = CovidSummary {
        window,
        start_date: window.range().0.to_string(),
        days: data.values.len(),
        scale: cases.scale,
        x0: cases.x0,
        initial_mse: report.initial_mse().unwrap_or(f64::NAN),
        final_mse: report.final_mse().unwrap_or(f64::NAN),
        final_r0: last.map_or(f64::NAN, |r| r.r0),
        beta_max: sampled.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        beta_min: sampled.iter().copied().fold(f64::INFINITY, f64::min),
        shape: classify_shape(sampled),
    };
    let loss = loss_table(&report.history);
    Ok(CovidOutcome {
        report,
        summary,
        fit,
        beta,
        loss,
    })
}

/// Gradient norms at the config's network rescaled to `probe.target_r0`,
/// started near the disease-free equilibrium.
pub fn run_probe(config: &ExperimentConfig, alpha: Option<f64>) -> Result<ProbeReport, ExperimentError> {
    let probe = config
        .probe
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("no [probe] section".into()))?;
    let data = config.generate()?;
    let mut x0 = config.model.dfe(config.x0()?);
    for &k in config.model.infected_indices() {
        x0[k] += probe.infected_seed;
    }
    let mut beta = config.initial_network()?;
    let problem = Problem {
        model: &config.model,
        x0: &x0,
        data: &data,
    };
    let r0 = problem.evaluate(&beta, 0.0)?.r0;
    if r0.abs() < 1e-12 && probe.target_r0 != 0.0 {
        return Err(ExperimentError::Config(
            "network has R0 = 0 and cannot be rescaled to the probe target".into(),
        ));
    }
    let factor = if probe.target_r0 == 0.0 { 0.0 } else { probe.target_r0 / r0 };
    beta.mlp.scale_output(factor);
    Ok(vanishing_gradient_probe(&problem, &beta, alpha.unwrap_or(config.train.alpha))?)
}

/// Condition spot checks along the generating trajectory, with every sample
/// also mirrored at zero infection.
pub fn run_check(config: &ExperimentConfig) -> Result<ConditionReport, ExperimentError> {
    let s = config.synthetic()?;
    let samples = config.clean_trajectory()?;
    Ok(check_conditions(
        &config.model,
        |x| s.beta.eval(x),
        &samples,
        config.x0()?,
    ))
}
