//! Training data: synthetic infected-count series from known infection
//! functions, and daily case reports smoothed and scaled for the scaled SIR model.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Scalar;
use crate::epimodels::EpidemicModel;
use crate::ode::{grid_steps, integrate_steps, Method, OdeError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown infection function `{0}` (expected beta1, beta2, beta_s or beta_i)")]
    UnknownBeta(String),
    #[error("noise sigma must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
    #[error("generation failed: {0}")]
    Integration(#[from] OdeError),
    #[error("dataset needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("dataset value at index {index} is {value}; values must be finite and non-negative")]
    InvalidValue { index: usize, value: f64 },
    #[error("dataset times are not a uniform grid (row {row})")]
    NonUniformGrid { row: usize },
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("row {row}: date {date} does not come after the previous row")]
    NonMonotoneDate { row: usize, date: NaiveDate },
    #[error("moving average needs at least {window} points, got {got}")]
    SeriesTooShort { window: usize, got: usize },
    #[error("population must be positive, got {0}")]
    InvalidPopulation(f64),
    #[error("scaled value {value} at index {index} is not below 1")]
    ScaledOutOfRange { index: usize, value: f64 },
    #[error("window {window} ({start} to {end}) is not covered by the series ({first} to {last})")]
    WindowNotCovered {
        window: CovidWindow,
        start: NaiveDate,
        end: NaiveDate,
        first: NaiveDate,
        last: NaiveDate,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Closed-form infection functions used to generate synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueBeta {
    /// `0.5 (cos(t/11) + 1)`
    Beta1,
    /// `0.125 (-cos(t/11) - sin(t/11) - 2.5 cos(2t/11) + 0.5 sin(2t/11)) + 0.5`
    Beta2,
    /// `0.2 S / (S + 20)`
    BetaS,
    /// `0.2 I / (I + 20)`
    BetaI,
}

impl TrueBeta {
    pub fn name(self) -> &'static str {
        match self {
            TrueBeta::Beta1 => "beta1",
            TrueBeta::Beta2 => "beta2",
            TrueBeta::BetaS => "beta_s",
            TrueBeta::BetaI => "beta_i",
        }
    }

    pub fn eval<S: Scalar>(self, x: S) -> S {
        match self {
            TrueBeta::Beta1 => ((x * (1.0 / 11.0)).cos() + 1.0) * 0.5,
            TrueBeta::Beta2 => {
                let u = x * (1.0 / 11.0);
                let v = x * (2.0 / 11.0);
                (-u.cos() - u.sin() - v.cos() * 2.5 + v.sin() * 0.5) * 0.125 + 0.5
            }
            TrueBeta::BetaS | TrueBeta::BetaI => x * 0.2 / (x + 20.0),
        }
    }
}

impl FromStr for TrueBeta {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "beta1" => Ok(TrueBeta::Beta1),
            "beta2" => Ok(TrueBeta::Beta2),
            "beta_s" => Ok(TrueBeta::BetaS),
            "beta_i" => Ok(TrueBeta::BetaI),
            other => Err(DataError::UnknownBeta(other.to_string())),
        }
    }
}

/// Looks up an infection function by name.
pub fn beta_library(name: &str) -> Result<TrueBeta, DataError> {
    name.parse()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetMeta {
    Synthetic {
        seed: u64,
        model: String,
        beta: String,
        noise_sigma: f64,
    },
    File {
        path: PathBuf,
        window: Option<CovidWindow>,
    },
}

/// Observed infected values `D_i` at times `t0 + i * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(t0: f64, dt: f64, values: Vec<f64>, meta: DatasetMeta) -> Result<Self, DataError> {
        if values.len() < 2 {
            return Err(DataError::TooShort(values.len()));
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(DataError::InvalidValue { index, value });
        }
        Ok(Self {
            t0,
            dt,
            values,
            meta,
        })
    }

    /// Number of steps after the initial point.
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.steps())
    }

    /// CSV with header `t,infected`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "infected"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([self.time(i).to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, meta: DatasetMeta) -> Result<Self, DataError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let col = |name: &'static str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or(DataError::MissingColumn(name))
        };
        let (t_col, v_col) = (col("t")?, col("infected")?);
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (k, record) in r.records().enumerate() {
            let row = k + 2;
            let record = record?;
            let parse = |c: usize| -> Result<f64, DataError> {
                record
                    .get(c)
                    .unwrap_or("")
                    .trim()
                    .parse()
                    .map_err(|e| DataError::Row {
                        row,
                        message: format!("{e}"),
                    })
            };
            times.push(parse(t_col)?);
            values.push(parse(v_col)?);
        }
        if times.len() < 2 {
            return Err(DataError::TooShort(times.len()));
        }
        let (t0, dt) = (times[0], times[1] - times[0]);
        for (i, &t) in times.iter().enumerate() {
            let expected = t0 + i as f64 * dt;
            if dt <= 0.0 || (t - expected).abs() > 1e-9 * dt.max(1.0) {
                return Err(DataError::NonUniformGrid { row: i + 2 });
            }
        }
        Dataset::new(t0, dt, values, meta)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let meta = DatasetMeta::File {
            path: path.to_path_buf(),
            window: None,
        };
        Dataset::read_csv(std::fs::File::open(path)?, meta)
    }
}

/// Deterministic knobs for [`generate_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Euler-integrates `model` with the known infection function, samples the
/// infected component on the `dt` grid and applies multiplicative Gaussian
/// noise `D * (1 + sigma * eta)`, clamped at zero.
///
/// Each sampling interval is covered by `substeps` Euler steps.
#[allow(clippy::too_many_arguments)]
pub fn generate_synthetic(
    model: &EpidemicModel,
    beta: TrueBeta,
    x0: &[f64],
    t0: f64,
    t_end: f64,
    dt: f64,
    substeps: usize,
    noise: Perturbation,
) -> Result<Dataset, DataError> {
    if !(noise.noise_sigma >= 0.0 && noise.noise_sigma.is_finite()) {
        return Err(DataError::InvalidNoise(noise.noise_sigma));
    }
    if !(t_end > t0) {
        return Err(OdeError::InvalidSpan { t0, t_end }.into());
    }
    let rhs = model.hybrid_rhs(|x: f64| beta.eval(x));
    let steps = grid_steps(t0, t_end, dt);
    let traj = integrate_steps(Method::Euler, &rhs, x0, t0, dt, steps, substeps)?;
    let clean = traj.component(model.infected_index());
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    // The initial point is the known initial state and stays unperturbed.
    let values = std::iter::once(clean[0])
        .chain(clean[1..].iter().map(|&v| {
            let eta: f64 = StandardNormal.sample(&mut rng);
            (v * (1.0 + noise.noise_sigma * eta)).max(0.0)
        }))
        .collect();
    Dataset::new(
        t0,
        dt,
        values,
        DatasetMeta::Synthetic {
            seed: noise.seed,
            model: model.name().to_string(),
            beta: beta.name().to_string(),
            noise_sigma: noise.noise_sigma,
        },
    )
}

/// The two fitting windows around the 2021-2022 case peaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovidWindow {
    FirstPeak,
    SecondPeak,
}

impl CovidWindow {
    pub const ALL: [CovidWindow; 2] = [CovidWindow::FirstPeak, CovidWindow::SecondPeak];

    /// Inclusive date range.
    pub fn range(self) -> (NaiveDate, NaiveDate) {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
        match self {
            CovidWindow::FirstPeak => (d(2021, 6, 16), d(2021, 10, 31)),
            CovidWindow::SecondPeak => (d(2021, 12, 12), d(2022, 2, 11)),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CovidWindow::FirstPeak => "first_peak",
            CovidWindow::SecondPeak => "second_peak",
        }
    }
}

impl fmt::Display for CovidWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CovidWindow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "first_peak" => Ok(CovidWindow::FirstPeak),
            "second_peak" => Ok(CovidWindow::SecondPeak),
            other => Err(format!(
                "unknown window `{other}` (expected first_peak or second_peak)"
            )),
        }
    }
}

/// Daily counts on strictly increasing dates.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSeries {
    pub dates: Vec<NaiveDate>,
    pub counts: Vec<f64>,
}

impl CaseSeries {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Trailing 7-day average, dated by the last day of each window.
    pub fn smoothed(&self) -> Result<CaseSeries, DataError> {
        let counts = moving_average_7(&self.counts)?;
        Ok(CaseSeries {
            dates: self.dates[6..].to_vec(),
            counts,
        })
    }

    /// Restriction to the inclusive date range of `window`.
    pub fn window(&self, window: CovidWindow) -> Result<CaseSeries, DataError> {
        let (start, end) = window.range();
        let not_covered = || DataError::WindowNotCovered {
            window,
            start,
            end,
            first: *self.dates.first().unwrap_or(&start),
            last: *self.dates.last().unwrap_or(&end),
        };
        let (Some(&first), Some(&last)) = (self.dates.first(), self.dates.last()) else {
            return Err(not_covered());
        };
        if first > start || last < end {
            return Err(not_covered());
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.dates[i] >= start && self.dates[i] <= end)
            .collect();
        Ok(CaseSeries {
            dates: keep.iter().map(|&i| self.dates[i]).collect(),
            counts: keep.iter().map(|&i| self.counts[i]).collect(),
        })
    }
}

/// Reads a `date,cases` CSV (ISO-8601 dates, non-negative integer counts).
pub fn load_case_csv(path: &Path) -> Result<CaseSeries, DataError> {
    read_case_csv(std::fs::File::open(path)?)
}

pub fn read_case_csv<R: Read>(input: R) -> Result<CaseSeries, DataError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let col = |name: &'static str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or(DataError::MissingColumn(name))
    };
    let (date_col, cases_col) = (col("date")?, col("cases")?);
    let mut series = CaseSeries {
        dates: Vec::new(),
        counts: Vec::new(),
    };
    for (k, record) in r.records().enumerate() {
        let row = k + 2;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(field(date_col), "%Y-%m-%d").map_err(|e| {
            DataError::Row {
                row,
                message: format!("bad date `{}`: {e}", field(date_col)),
            }
        })?;
        let raw = field(cases_col);
        let cases: i64 = raw.parse().map_err(|_| DataError::Row {
            row,
            message: format!("bad case count `{raw}`"),
        })?;
        if cases < 0 {
            return Err(DataError::Row {
                row,
                message: format!("negative case count {cases}"),
            });
        }
        if series.dates.last().is_some_and(|&prev| date <= prev) {
            return Err(DataError::NonMonotoneDate { row, date });
        }
        series.dates.push(date);
        series.counts.push(cases as f64);
    }
    Ok(series)
}

/// Trailing 7-point mean: output `k` averages inputs `k..k+7`, so the output
/// is 6 shorter than the input.
pub fn moving_average_7(series: &[f64]) -> Result<Vec<f64>, DataError> {
    const WINDOW: usize = 7;
    if series.len() < WINDOW {
        return Err(DataError::SeriesTooShort {
            window: WINDOW,
            got: series.len(),
        });
    }
    Ok(series
        .windows(WINDOW)
        .map(|w| w.iter().sum::<f64>() / WINDOW as f64)
        .collect())
}

/// Case counts expressed in units of the scaling constant `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledCases {
    pub dataset: Dataset,
    /// `M = 7.6e-3 * N`.
    pub scale: f64,
    /// `(s0, i0) = (1 - 1e-3 i0, I0 / M)`.
    pub x0: [f64; 2],
}

impl ScaledCases {
    pub fn unscaled(&self) -> Vec<f64> {
        self.dataset.values.iter().map(|v| v * self.scale).collect()
    }
}

/// Divides the series by `M = 7.6e-3 * N` on a one-day grid.
pub fn scale_covid(
    series: &[f64],
    population: f64,
    initial_cases: f64,
    meta: DatasetMeta,
) -> Result<ScaledCases, DataError> {
    if !(population > 0.0 && population.is_finite()) {
        return Err(DataError::InvalidPopulation(population));
    }
    let scale = 7.6e-3 * population;
    let values: Vec<f64> = series.iter().map(|v| v / scale).collect();
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| **v >= 1.0) {
        return Err(DataError::ScaledOutOfRange { index, value });
    }
    let i0 = initial_cases / scale;
    if i0 >= 1.0 {
        return Err(DataError::ScaledOutOfRange {
            index: 0,
            value: i0,
        });
    }
    Ok(ScaledCases {
        dataset: Dataset::new(0.0, 1.0, values, meta)?,
        scale,
        x0: [1.0 - 1e-3 * i0, i0],
    })
}
