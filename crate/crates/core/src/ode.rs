//! Fixed-step explicit integrators, generic over [`Scalar`] so the same code
//! generates data in `f64` and unrolls onto a tape during training.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("end time {t_end} must exceed start time {t0}")]
    InvalidSpan { t0: f64, t_end: f64 },
    #[error("state became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("right-hand side returned {got} components for a state of {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

/// States on the uniform grid `t0 + i * dt`, `i = 0..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S = f64> {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<Vec<S>>,
}

impl<S: Scalar> Trajectory<S> {
    /// Number of steps taken (one less than the number of stored states).
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|i| self.time(i)).collect()
    }

    /// Component `k` of every stored state.
    pub fn component(&self, k: usize) -> Vec<S> {
        self.states.iter().map(|s| s[k]).collect()
    }

    pub fn final_state(&self) -> &[S] {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn values(&self) -> Trajectory<f64> {
        Trajectory {
            t0: self.t0,
            dt: self.dt,
            states: self
                .states
                .iter()
                .map(|s| s.iter().map(Scalar::value).collect())
                .collect(),
        }
    }
}

impl Trajectory<f64> {
    /// CSV with header `t,<names...>`, one row per grid point.
    pub fn write_csv<W: Write>(&self, names: &[&str], out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(names.iter().map(|n| n.to_string()));
        w.write_record(&header)?;
        for (i, state) in self.states.iter().enumerate() {
            let mut row = vec![self.time(i).to_string()];
            row.extend(state.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()
    }
}

fn check_step(h: f64) -> Result<(), OdeError> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(OdeError::InvalidStep(h))
    }
}

fn eval<S, F>(rhs: &F, t: f64, x: &[S]) -> Result<Vec<S>, OdeError>
where
    S: Scalar,
    F: Fn(f64, &[S]) -> Vec<S>,
{
    let dx = rhs(t, x);
    if dx.len() != x.len() {
        return Err(OdeError::Dimension {
            expected: x.len(),
            got: dx.len(),
        });
    }
    Ok(dx)
}

fn axpy<S: Scalar>(x: &[S], h: f64, k: &[S]) -> Vec<S> {
    x.iter().zip(k).map(|(&xi, &ki)| xi + ki * h).collect()
}

fn finite_or<S: Scalar>(x: Vec<S>, step: usize) -> Result<Vec<S>, OdeError> {
    if x.iter().all(|v| v.value().is_finite()) {
        Ok(x)
    } else {
        Err(OdeError::NonFinite { step })
    }
}

fn euler_raw<S, F>(rhs: &F, x: &[S], t: f64, h: f64) -> Result<Vec<S>, OdeError>
where
    S: Scalar,
    F: Fn(f64, &[S]) -> Vec<S>,
{
    Ok(axpy(x, h, &eval(rhs, t, x)?))
}

fn rk4_raw<S, F>(rhs: &F, x: &[S], t: f64, h: f64) -> Result<Vec<S>, OdeError>
where
    S: Scalar,
    F: Fn(f64, &[S]) -> Vec<S>,
{
    let half = 0.5 * h;
    let k1 = eval(rhs, t, x)?;
    let k2 = eval(rhs, t + half, &axpy(x, half, &k1))?;
    let k3 = eval(rhs, t + half, &axpy(x, half, &k2))?;
    let k4 = eval(rhs, t + h, &axpy(x, h, &k3))?;
    Ok(x.iter()
        .enumerate()
        .map(|(i, &xi)| xi + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0))
        .collect())
}

/// `x + h * f(t, x)`.
pub fn euler_step<S, F>(rhs: &F, x: &[S], t: f64, h: f64) -> Result<Vec<S>, OdeError>
where
    S: Scalar,
    F: Fn(f64, &[S]) -> Vec<S>,
{
    check_step(h)?;
    finite_or(euler_raw(rhs, x, t, h)?, 0)
}

/// Classical four-stage Runge-Kutta step.
pub fn rk4_step<S, F>(rhs: &F, x: &[S], t: f64, h: f64) -> Result<Vec<S>, OdeError>
where
    S: Scalar,
    F: Fn(f64, &[S]) -> Vec<S>,
{
    check_step(h)?;
    finite_or(rk4_raw(rhs, x, t, h)?, 0)
}

/// Number of whole steps of size `dt` that fit in `[t0, t_end]`; any remainder
/// is dropped.
pub fn grid_steps(t0: f64, t_end: f64, dt: f64) -> usize {
    // Tolerate representation error so that e.g. 1.0 / 0.01 counts 100 steps.
    ((t_end - t0) / dt * (1.0 + 1e-12)).floor() as usize
}

/// Integrates from `t0` over `floor((t_end - t0) / dt)` fixed steps.
pub fn integrate<S, F>(
    method: Method,
    rhs: &F,
    x0: &[S],
    t0: f64,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory<S>, OdeError>
where
    S: Scalar,
    F: Fn(f64, &[S]) -> Vec<S>,
{
    check_step(dt)?;
    if !(t_end > t0) {
        return Err(OdeError::InvalidSpan { t0, t_end });
    }
    let steps = grid_steps(t0, t_end, dt);
    integrate_steps(method, rhs, x0, t0, dt, steps, 1)
}

/// Integrates `steps` intervals of length `dt`, each subdivided into
/// `substeps` equal method steps. Only the grid points are stored.
pub fn integrate_steps<S, F>(
    method: Method,
    rhs: &F,
    x0: &[S],
    t0: f64,
    dt: f64,
    steps: usize,
    substeps: usize,
) -> Result<Trajectory<S>, OdeError>
where
    S: Scalar,
    F: Fn(f64, &[S]) -> Vec<S>,
{
    check_step(dt)?;
    let substeps = substeps.max(1);
    let h = dt / substeps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    for step in 0..steps {
        let t_step = t0 + step as f64 * dt;
        for sub in 0..substeps {
            let t = t_step + sub as f64 * h;
            x = match method {
                Method::Euler => euler_raw(rhs, &x, t, h),
                Method::Rk4 => rk4_raw(rhs, &x, t, h),
            }
            .map_err(|e| match e {
                OdeError::NonFinite { .. } => OdeError::NonFinite { step: step + 1 },
                other => other,
            })?;
        }
        x = finite_or(x, step + 1)?;
        states.push(x.clone());
    }
    Ok(Trajectory { t0, dt, states })
}
