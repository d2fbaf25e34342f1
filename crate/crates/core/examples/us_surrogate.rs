//! Writes a synthetic stand-in for US daily case counts, 2021-06-01 to
//! 2022-02-28, to the path given as the first argument (stdout otherwise).
//!
//! Each fitting window is a forward run of the scaled SIR model with a
//! prescribed infection rate: decreasing then constant around the first peak,
//! increasing then constant (and higher) around the second. Counts carry a
//! weekday reporting pattern and 3% multiplicative noise; the gap between the
//! windows is bridged log-linearly.

use std::io::Write;

use chrono::{Days, NaiveDate};
use epifit_core::data::CovidWindow;
use epifit_core::epimodels::{EpidemicModel, ScaledSirParams};
use epifit_core::ode::{integrate_steps, Method};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const POPULATION: f64 = 3.32e8;
const GAMMA: f64 = 0.1;
const DEATH: f64 = 0.01;

/// Quadratic ease from `start` to `end` over `tau` days, constant afterwards.
fn eased(start: f64, end: f64, tau: f64) -> impl Fn(f64) -> f64 {
    move |t| {
        let u = (1.0 - t / tau).max(0.0);
        end + (start - end) * u * u
    }
}

/// Daily `i` values for `days` days starting from `i0`.
fn simulate(beta: impl Fn(f64) -> f64, i0: f64, days: usize) -> Vec<f64> {
    let model = EpidemicModel::ScaledSir(ScaledSirParams { gamma: GAMMA, d: DEATH });
    let rhs = model.hybrid_rhs(|t: f64| beta(t));
    let x0 = [1.0 - 1e-3 * i0, i0];
    let traj = integrate_steps(Method::Rk4, &rhs, &x0, 0.0, 1.0, days - 1, 10).expect("bounded run");
    traj.component(1)
}

fn main() {
    let scale = 7.6e-3 * POPULATION;
    let day = |d: NaiveDate, base: NaiveDate| (d - base).num_days();
    let start = NaiveDate::from_ymd_opt(2021, 6, 1).unwrap();
    let end = NaiveDate::from_ymd_opt(2022, 2, 28).unwrap();
    let (w1_start, w1_end) = CovidWindow::FirstPeak.range();
    let (w2_start, _) = CovidWindow::SecondPeak.range();

    let w1_days = day(w1_end, w1_start) as usize + 1;
    let first = simulate(eased(0.16, 0.12, 70.0), 12_000.0 / scale, w1_days);
    let w2_days = day(end, w2_start) as usize + 1;
    let second = simulate(eased(0.13, 0.22, 30.0), 120_000.0 / scale, w2_days);

    // Clean daily counts on the full calendar.
    let total = day(end, start) as usize + 1;
    let lead = day(w1_start, start) as usize;
    let early_growth = (first[1] / first[0]).ln();
    let w1_last = lead + w1_days - 1;
    let w2_first = day(w2_start, start) as usize;
    let mut clean = vec![0.0; total];
    for (k, value) in clean.iter_mut().enumerate() {
        *value = if k < lead {
            first[0] * (early_growth * (k as f64 - lead as f64)).exp()
        } else if k <= w1_last {
            first[k - lead]
        } else if k < w2_first {
            let u = (k - w1_last) as f64 / (w2_first - w1_last) as f64;
            (first[w1_days - 1].ln() * (1.0 - u) + second[0].ln() * u).exp()
        } else {
            second[k - w2_first]
        } * scale;
    }

    // Monday backlog, weekend dip; the factors average to one over a week.
    let weekday = [1.18, 1.06, 1.04, 1.02, 1.0, 0.88, 0.82];
    let mut rng = ChaCha8Rng::seed_from_u64(2021);
    let mut out: Box<dyn Write> = match std::env::args().nth(1) {
        Some(path) => Box::new(std::fs::File::create(path).expect("writable output")),
        None => Box::new(std::io::stdout()),
    };
    writeln!(out, "date,cases").unwrap();
    for (k, c) in clean.iter().enumerate() {
        let date = start + Days::new(k as u64);
        let w = weekday[date.weekday_index()];
        let eta: f64 = StandardNormal.sample(&mut rng);
        let cases = (c * w * (1.0 + 0.03 * eta)).max(0.0).round() as u64;
        writeln!(out, "{date},{cases}").unwrap();
    }
}

trait WeekdayIndex {
    fn weekday_index(&self) -> usize;
}

impl WeekdayIndex for NaiveDate {
    fn weekday_index(&self) -> usize {
        use chrono::Datelike;
        self.weekday().num_days_from_monday() as usize
    }
}
