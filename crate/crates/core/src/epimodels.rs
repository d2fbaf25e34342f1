//! SIS and SIR systems whose infection term is supplied from outside, together
//! with their basic reproduction number functionals.
//!
//! Every right-hand side takes the *value* of the infection function at the
//! current point; which quantity feeds the infection function (time, `S` or `I`)
//! is described by [`EpidemicModel::infection_input`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{model}: parameter `{name}` must be finite and strictly positive, got {value}")]
    NonPositive {
        model: &'static str,
        name: &'static str,
        value: f64,
    },
    #[error("reproduction number needs a non-empty time grid")]
    EmptyGrid,
    #[error("{model} expects a state of dimension {expected}, got {got}")]
    StateDimension {
        model: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SisParams {
    /// Constant birth rate.
    pub lambda: f64,
    /// Recovery rate.
    pub gamma: f64,
    /// Death rate.
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirParams {
    pub gamma: f64,
}

/// Parameters of the population-scaled SIR model used for case data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledSirParams {
    pub gamma: f64,
    pub d: f64,
}

fn positive(model: &'static str, name: &'static str, value: f64) -> Result<(), ModelError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonPositive { model, name, value })
    }
}

/// `S' = lambda - beta S I + gamma I - d S`, `I' = beta S I - gamma I - d I`.
pub fn sis_rhs<S: Scalar>(x: &[S], p: &SisParams, beta: S) -> Vec<S> {
    let (s, i) = (x[0], x[1]);
    let incidence = beta * s * i;
    vec![
        (i * p.gamma - incidence - s * p.d) + p.lambda,
        incidence - i * (p.gamma + p.d),
    ]
}

/// `S' = -beta(S) I`, `I' = beta(S) I - gamma I`, `R' = gamma I`.
pub fn sir_s_rhs<S: Scalar>(x: &[S], p: &SirParams, beta: S) -> Vec<S> {
    let i = x[1];
    let incidence = beta * i;
    let recovery = i * p.gamma;
    vec![-incidence, incidence - recovery, recovery]
}

/// `S' = -beta(I) S`, `I' = beta(I) S - gamma I`, `R' = gamma I`.
pub fn sir_i_rhs<S: Scalar>(x: &[S], p: &SirParams, beta: S) -> Vec<S> {
    let (s, i) = (x[0], x[1]);
    let incidence = beta * s;
    let recovery = i * p.gamma;
    vec![-incidence, incidence - recovery, recovery]
}

/// `s' = -beta_M s i`, `i' = beta_M s i - (gamma + d) i`.
pub fn scaled_sir_rhs<S: Scalar>(x: &[S], p: &ScaledSirParams, beta: S) -> Vec<S> {
    let (s, i) = (x[0], x[1]);
    let incidence = beta * s * i;
    vec![-incidence, incidence - i * (p.gamma + p.d)]
}

/// Mean of the infection function over the grid divided by the total removal
/// rate `gamma + d`.
pub fn r0_sis<S, B>(beta: B, grid: &[f64], params: &SisParams, proto: S) -> Result<S, ModelError>
where
    S: Scalar,
    B: Fn(S) -> S,
{
    grid_mean(beta, grid, proto).map(|m| m / (params.gamma + params.d))
}

fn grid_mean<S, B>(beta: B, grid: &[f64], proto: S) -> Result<S, ModelError>
where
    S: Scalar,
    B: Fn(S) -> S,
{
    let (&first, rest) = grid.split_first().ok_or(ModelError::EmptyGrid)?;
    let sum = rest
        .iter()
        .fold(beta(proto.constant_like(first)), |acc, &t| {
            acc + beta(proto.constant_like(t))
        });
    Ok(sum / grid.len() as f64)
}

/// `beta(S0) / gamma`.
pub fn r0_sir_s<S: Scalar, B: Fn(S) -> S>(beta: B, s0: S, gamma: f64) -> S {
    beta(s0) / gamma
}

/// `10 (beta(0.1) - beta(0)) S0 / gamma`: a forward-difference slope of the
/// infection function at `I = 0`.
pub fn r0_sir_i<S: Scalar, B: Fn(S) -> S>(beta: B, s0: S, gamma: f64) -> S {
    let slope = (beta(s0.constant_like(0.1)) - beta(s0.constant_like(0.0))) * 10.0;
    slope * s0 / gamma
}

/// What the infection function is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfectionInput {
    Time,
    Susceptible,
    Infected,
}

/// One of the supported hybrid systems, selected by `name` in configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EpidemicModel {
    Sis(SisParams),
    SirBetaS(SirParams),
    SirBetaI(SirParams),
    ScaledSir(ScaledSirParams),
}

impl EpidemicModel {
    pub fn name(&self) -> &'static str {
        match self {
            EpidemicModel::Sis(_) => "sis",
            EpidemicModel::SirBetaS(_) => "sir_beta_s",
            EpidemicModel::SirBetaI(_) => "sir_beta_i",
            EpidemicModel::ScaledSir(_) => "scaled_sir",
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let name = self.name();
        match self {
            EpidemicModel::Sis(p) => {
                positive(name, "lambda", p.lambda)?;
                positive(name, "gamma", p.gamma)?;
                positive(name, "d", p.d)
            }
            EpidemicModel::SirBetaS(p) | EpidemicModel::SirBetaI(p) => {
                positive(name, "gamma", p.gamma)
            }
            EpidemicModel::ScaledSir(p) => {
                positive(name, "gamma", p.gamma)?;
                positive(name, "d", p.d)
            }
        }
    }

    pub fn state_names(&self) -> &'static [&'static str] {
        match self {
            EpidemicModel::Sis(_) => &["S", "I"],
            EpidemicModel::SirBetaS(_) | EpidemicModel::SirBetaI(_) => &["S", "I", "R"],
            EpidemicModel::ScaledSir(_) => &["s", "i"],
        }
    }

    pub fn dim(&self) -> usize {
        self.state_names().len()
    }

    /// Components that hold infected individuals.
    pub fn infected_indices(&self) -> &'static [usize] {
        &[1]
    }

    /// The observed infected component.
    pub fn infected_index(&self) -> usize {
        1
    }

    pub fn infection_input(&self) -> InfectionInput {
        match self {
            EpidemicModel::Sis(_) | EpidemicModel::ScaledSir(_) => InfectionInput::Time,
            EpidemicModel::SirBetaS(_) => InfectionInput::Susceptible,
            EpidemicModel::SirBetaI(_) => InfectionInput::Infected,
        }
    }

    pub fn check_state<S>(&self, x: &[S]) -> Result<(), ModelError> {
        if x.len() == self.dim() {
            Ok(())
        } else {
            Err(ModelError::StateDimension {
                model: self.name(),
                expected: self.dim(),
                got: x.len(),
            })
        }
    }

    /// The value the infection function is evaluated at for time `t`, state `x`.
    pub fn infection_argument<S: Scalar>(&self, t: f64, x: &[S]) -> S {
        match self.infection_input() {
            InfectionInput::Time => x[0].constant_like(t),
            InfectionInput::Susceptible => x[0],
            InfectionInput::Infected => x[1],
        }
    }

    /// `g(x, y)` where `y` is the infection function's value.
    pub fn rhs<S: Scalar>(&self, x: &[S], beta: S) -> Vec<S> {
        match self {
            EpidemicModel::Sis(p) => sis_rhs(x, p, beta),
            EpidemicModel::SirBetaS(p) => sir_s_rhs(x, p, beta),
            EpidemicModel::SirBetaI(p) => sir_i_rhs(x, p, beta),
            EpidemicModel::ScaledSir(p) => scaled_sir_rhs(x, p, beta),
        }
    }

    /// Closes the model over an infection function, giving an ODE right-hand side.
    pub fn hybrid_rhs<'a, S, B>(&'a self, beta: B) -> impl Fn(f64, &[S]) -> Vec<S> + 'a
    where
        S: Scalar,
        B: Fn(S) -> S + 'a,
    {
        move |t, x| {
            let y = beta(self.infection_argument(t, x));
            self.rhs(x, y)
        }
    }

    /// Disease-free equilibrium associated with the initial state `x0`.
    pub fn dfe(&self, x0: &[f64]) -> Vec<f64> {
        match self {
            EpidemicModel::Sis(p) => vec![p.lambda / p.d, 0.0],
            EpidemicModel::SirBetaS(_) | EpidemicModel::SirBetaI(_) => vec![x0[0], 0.0, 0.0],
            EpidemicModel::ScaledSir(_) => vec![x0[0], 0.0],
        }
    }

    /// Removal rate of infected individuals.
    pub fn removal_rate(&self) -> f64 {
        match self {
            EpidemicModel::Sis(p) => p.gamma + p.d,
            EpidemicModel::SirBetaS(p) | EpidemicModel::SirBetaI(p) => p.gamma,
            EpidemicModel::ScaledSir(p) => p.gamma + p.d,
        }
    }

    /// Basic reproduction number of the infection function `beta`.
    ///
    /// `grid` holds the sample times `i * dt`, `i = 1..=M` used by the
    /// time-dependent models; `x0` supplies `S0`.
    pub fn r0<S, B>(&self, beta: B, grid: &[f64], x0: &[S]) -> Result<S, ModelError>
    where
        S: Scalar,
        B: Fn(S) -> S,
    {
        self.check_state(x0)?;
        match self {
            EpidemicModel::Sis(p) => r0_sis(beta, grid, p, x0[0]),
            EpidemicModel::SirBetaS(p) => Ok(r0_sir_s(beta, x0[0], p.gamma)),
            EpidemicModel::SirBetaI(p) => Ok(r0_sir_i(beta, x0[0], p.gamma)),
            EpidemicModel::ScaledSir(p) => {
                let mean = grid_mean(beta, grid, x0[0])?;
                Ok(mean * x0[0] / (p.gamma + p.d))
            }
        }
    }
}

/// Numeric spot check of the structural conditions on `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    /// Largest infected-component derivative at states with zero infection (C5).
    pub c5_max_abs: f64,
    /// Largest derivative magnitude at the disease-free equilibrium (C4).
    pub c4_residual: f64,
    /// Sampled Lipschitz constant in the state (C1).
    pub c1_lipschitz: f64,
    /// Sampled Lipschitz constant in the infection value (C2).
    pub c2_lipschitz: f64,
    /// Smallest `|g_I(x, y1) - g_I(x, y2)| / |y1 - y2|` over samples with
    /// `x_I != 0` (C3 holds when positive).
    pub c3_min_sensitivity: f64,
}

impl ConditionReport {
    pub fn c4_holds(&self) -> bool {
        self.c4_residual < 1e-12
    }

    pub fn c5_holds(&self) -> bool {
        self.c5_max_abs == 0.0
    }

    pub fn c3_holds(&self) -> bool {
        self.c3_min_sensitivity > 0.0
    }

    pub fn lipschitz_finite(&self) -> bool {
        self.c1_lipschitz.is_finite() && self.c2_lipschitz.is_finite()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Evaluates the conditions at `(t, state)` samples for the infection
/// function `beta`. `x0` anchors the disease-free equilibrium.
pub fn check_conditions<B: Fn(f64) -> f64>(
    model: &EpidemicModel,
    beta: B,
    samples: &[(f64, Vec<f64>)],
    x0: &[f64],
) -> ConditionReport {
    let infected = model.infected_indices();
    let dfe = model.dfe(x0);
    let value_at = |t: f64, x: &[f64]| beta(model.infection_argument(t, x));
    let mut report = ConditionReport {
        c5_max_abs: 0.0,
        c4_residual: 0.0,
        c1_lipschitz: 0.0,
        c2_lipschitz: 0.0,
        c3_min_sensitivity: f64::INFINITY,
    };
    let ys: Vec<f64> = samples.iter().map(|(t, x)| value_at(*t, x)).collect();
    for (t, x) in samples {
        let mut cleared = x.clone();
        for &k in infected {
            cleared[k] = 0.0;
        }
        let g = model.rhs(&cleared, value_at(*t, &cleared));
        for &k in infected {
            report.c5_max_abs = report.c5_max_abs.max(g[k].abs());
        }
        let at_dfe = model.rhs(&dfe, value_at(*t, &dfe));
        report.c4_residual = report.c4_residual.max(norm(&at_dfe));
    }
    for (a, ((_, xa), &ya)) in samples.iter().zip(&ys).enumerate() {
        let ga = model.rhs(xa, ya);
        for ((_, xb), &yb) in samples[a + 1..].iter().zip(&ys[a + 1..]) {
            let dx = norm(&diff(xa, xb));
            if dx > 0.0 {
                let dg = norm(&diff(&ga, &model.rhs(xb, ya)));
                report.c1_lipschitz = report.c1_lipschitz.max(dg / dx);
            }
            let dy = (ya - yb).abs();
            if dy > 0.0 {
                let gb = model.rhs(xa, yb);
                report.c2_lipschitz = report.c2_lipschitz.max(norm(&diff(&ga, &gb)) / dy);
                if infected.iter().any(|&k| xa[k] != 0.0) {
                    let gi: Vec<f64> = infected.iter().map(|&k| ga[k] - gb[k]).collect();
                    report.c3_min_sensitivity = report.c3_min_sensitivity.min(norm(&gi) / dy);
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{integrate, Method};

    const SIS: SisParams = SisParams {
        lambda: 1.0,
        gamma: 0.1,
        d: 0.1,
    };

    fn holling(x: f64) -> f64 {
        0.2 * x / (x + 20.0)
    }

    #[test]
    fn sis_examples() {
        assert_eq!(sis_rhs(&[30.0, 0.0], &SIS, 0.7)[1], 0.0);
        let dfe = sis_rhs(&[SIS.lambda / SIS.d, 0.0], &SIS, 0.3);
        assert_eq!(dfe, vec![0.0, 0.0]);
        let p = SisParams {
            lambda: 1.0,
            gamma: 0.1,
            d: 0.1,
        };
        let g = sis_rhs(&[50.0, 10.0], &p, 0.01);
        assert!((g[0] + 8.0).abs() < 1e-12, "{g:?}");
        assert!((g[1] - 3.0).abs() < 1e-12, "{g:?}");
    }

    #[test]
    fn sir_examples() {
        let p = SirParams { gamma: 0.1 };
        assert_eq!(sir_s_rhs(&[50.0, 0.0, 3.0], &p, holling(50.0)), vec![-0.0, 0.0, 0.0]);
        let g = sir_s_rhs(&[20.0, 10.0, 0.0], &p, holling(20.0));
        for (a, b) in g.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-12, "{g:?}");
        }
        let g = sir_i_rhs(&[10.0, 20.0, 0.0], &p, holling(20.0));
        for (a, b) in g.iter().zip([-1.0, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12, "{g:?}");
        }
        assert!(sir_i_rhs(&[10.0, 0.0, 4.0], &p, holling(0.0)).iter().all(|v| *v == 0.0));
        for (s, i) in [(3.0, 4.0), (80.0, 0.5)] {
            let a: f64 = sir_s_rhs(&[s, i, 1.0], &p, holling(s)).iter().sum();
            let b: f64 = sir_i_rhs(&[s, i, 1.0], &p, holling(i)).iter().sum();
            assert!(a.abs() < 1e-15 && b.abs() < 1e-15);
        }
    }

    #[test]
    fn scaled_sir_examples() {
        let p = ScaledSirParams { gamma: 0.15, d: 0.05 };
        assert_eq!(scaled_sir_rhs(&[0.7, 0.0], &p, 3.0), vec![-0.0, 0.0]);
        let g = scaled_sir_rhs(&[0.5, 0.1], &p, 2.0);
        assert!((g[0] + 0.1).abs() < 1e-15);
        assert!((g[1] - 0.08).abs() < 1e-15);
        assert!((g[0] + g[1] + 0.2 * 0.1).abs() < 1e-15);
    }

    #[test]
    fn r0_sis_examples() {
        let grid: Vec<f64> = (1..=10).map(f64::from).collect();
        let p = SisParams {
            lambda: 1.0,
            gamma: 0.2,
            d: 0.05,
        };
        let r = r0_sis(|_| 0.25, &grid, &p, 0.0).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        let r = r0_sis(|_| 0.5, &grid, &p, 0.0).unwrap();
        assert!((r - 2.0).abs() < 1e-15);
        assert_eq!(r0_sis(|_| 0.5, &[], &p, 0.0), Err(ModelError::EmptyGrid));
    }

    #[test]
    fn r0_sis_over_a_full_period() {
        let m = 20_000;
        let period = 22.0 * std::f64::consts::PI;
        let grid: Vec<f64> = (1..=m).map(|i| period * i as f64 / m as f64).collect();
        let p = SisParams {
            lambda: 1.0,
            gamma: 0.2,
            d: 0.05,
        };
        let r = r0_sis(|t: f64| 0.5 * ((t / 11.0).cos() + 1.0), &grid, &p, 0.0).unwrap();
        assert!((r - 0.5 / 0.25).abs() < 1e-9, "{r}");
    }

    #[test]
    fn r0_sir_examples() {
        assert!((r0_sir_s(|_| 0.1, 20.0, 0.1) - 1.0).abs() < 1e-15);
        assert!((r0_sir_s(holling, 20.0, 0.1) - 1.0).abs() < 1e-15);
        assert_eq!(r0_sir_s(|_| 0.0, 20.0, 0.1), 0.0);
        assert_eq!(r0_sir_i(|_| 0.3, 100.0, 0.1), 0.0);
        let r = r0_sir_i(holling, 100.0, 0.1);
        assert!((r - 10.0 * (0.02 / 20.1) * 100.0 / 0.1).abs() < 1e-12);
        assert!((r - 9.95).abs() < 0.01);
        // linear beta with slope gamma / S0 sits exactly at the threshold
        let r = r0_sir_i(|i| i * (0.1 / 100.0), 100.0, 0.1);
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn model_dispatch_and_validation() {
        let m = EpidemicModel::SirBetaI(SirParams { gamma: 0.1 });
        assert_eq!(m.name(), "sir_beta_i");
        assert_eq!(m.infection_input(), InfectionInput::Infected);
        assert_eq!(m.infection_argument(3.0, &[1.0, 2.0, 3.0]), 2.0);
        assert!(EpidemicModel::Sis(SisParams { lambda: 1.0, gamma: 0.0, d: 0.1 }).validate().is_err());
        let r = m.r0(holling, &[], &[100.0, 1.0, 0.0]).unwrap();
        assert!((r - 9.95).abs() < 0.01);
        assert!(m.r0(holling, &[], &[100.0, 1.0]).is_err());
        let toml = "name = \"scaled_sir\"\ngamma = 0.1\nd = 0.01\n";
        let parsed: EpidemicModel = toml::from_str(toml).unwrap();
        assert_eq!(parsed, EpidemicModel::ScaledSir(ScaledSirParams { gamma: 0.1, d: 0.01 }));
    }

    fn all_models() -> Vec<(EpidemicModel, Vec<f64>)> {
        vec![
            (EpidemicModel::Sis(SIS), vec![8.0, 1.0]),
            (EpidemicModel::SirBetaS(SirParams { gamma: 0.1 }), vec![90.0, 10.0, 0.0]),
            (EpidemicModel::SirBetaI(SirParams { gamma: 0.1 }), vec![90.0, 10.0, 0.0]),
            (EpidemicModel::ScaledSir(ScaledSirParams { gamma: 0.1, d: 0.01 }), vec![0.99, 0.01]),
        ]
    }

    #[test]
    fn dfe_is_stationary() {
        for (model, x0) in all_models() {
            let dfe = model.dfe(&x0);
            let rhs = model.hybrid_rhs(holling);
            let traj = integrate(Method::Rk4, &rhs, &dfe, 0.0, 100.0, 0.5).unwrap();
            for s in &traj.states {
                assert!(norm(&diff(s, &dfe)) < 1e-10, "{}", model.name());
            }
        }
    }

    #[test]
    fn zero_infection_stays_zero() {
        for (model, mut x0) in all_models() {
            x0[1] = 0.0;
            x0[0] *= 0.7;
            let rhs = model.hybrid_rhs(holling);
            let traj = integrate(Method::Rk4, &rhs, &x0, 0.0, 50.0, 0.5).unwrap();
            assert!(traj.component(1).iter().all(|&i| i == 0.0), "{}", model.name());
        }
    }

    fn box_samples(n: usize, dim: usize) -> Vec<(f64, Vec<f64>)> {
        (0..n)
            .map(|k| {
                let k = k as f64;
                let x = [0.618_033_988_75, 0.414_213_562_37, 0.732_050_807_57]
                    .iter()
                    .take(dim)
                    .map(|g| 10.0 * (k * g).fract())
                    .collect();
                (50.0 * (k * 0.236_067_977_5).fract(), x)
            })
            .collect()
    }

    #[test]
    fn conditions_on_sis_box() {
        let model = EpidemicModel::Sis(SIS);
        let beta = |t: f64| 0.5 * ((t / 11.0).cos() + 1.0);
        let small = check_conditions(&model, beta, &box_samples(300, 2), &[8.0, 1.0]);
        let large = check_conditions(&model, beta, &box_samples(600, 2), &[8.0, 1.0]);
        assert!(small.c5_holds() && small.c4_holds() && small.c3_holds(), "{small:?}");
        assert!(small.lipschitz_finite());
        // doubling the sample barely moves the estimates on a bounded box
        for (a, b) in [(small.c1_lipschitz, large.c1_lipschitz), (small.c2_lipschitz, large.c2_lipschitz)] {
            assert!(a <= b && (b - a) / b < 0.1, "{a} vs {b}");
        }
    }

    #[test]
    fn conditions_on_every_model() {
        for (model, x0) in all_models() {
            let r = check_conditions(&model, holling, &box_samples(50, model.dim()), &x0);
            assert!(r.c5_holds() && r.c4_holds() && r.lipschitz_finite(), "{}: {r:?}", model.name());
        }
    }
}
