//! Penalized trajectory-matching loss and the Adam training loop.
//!
//! The loss integrates the hybrid model with RK4 on the data grid, compares
//! the infected component with the observations and adds
//! `alpha * max(1 - R0, 0)` so that the gradient does not vanish while the
//! fitted infection function sits below the epidemic threshold.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Scalar, Tape};
use crate::data::Dataset;
use crate::epimodels::{EpidemicModel, InfectionInput, ModelError};
use crate::nn::{Mlp, MlpDocument, NnError};
use crate::ode::{integrate_steps, Method, OdeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("prediction has {pred} points but data has {data}")]
    LengthMismatch { pred: usize, data: usize },
    #[error("data grid (t0 {t0}, dt {dt}, {steps} steps) does not match the integration grid ({expected} steps of {config_dt})")]
    GridMismatch {
        t0: f64,
        dt: f64,
        steps: usize,
        expected: usize,
        config_dt: f64,
    },
    #[error("network must map 1 input to 1 output, got {0:?}")]
    NetworkShape(Vec<usize>),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        report: Box<TrainReport>,
    },
    #[error("probe needs R0 < 1 at the given parameters, got {0}")]
    ProbePrecondition(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tape(#[from] AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `sum (y_i - d_i)^2 / M`.
pub fn mse<S: Scalar>(pred: &[S], data: &[f64]) -> Result<S, TrainError> {
    if pred.len() != data.len() || pred.is_empty() {
        return Err(TrainError::LengthMismatch {
            pred: pred.len(),
            data: data.len(),
        });
    }
    let sum = pred
        .iter()
        .zip(data)
        .map(|(&y, &d)| (y - d).square())
        .reduce(|a, b| a + b)
        .expect("non-empty");
    Ok(sum / pred.len() as f64)
}

/// `alpha * max(1 - r0, 0)`: exactly zero, with zero gradient, once `r0 >= 1`.
pub fn bifurcation_penalty<S: Scalar>(r0: S, alpha: f64) -> S {
    (-r0 + 1.0).max0() * alpha
}

/// Neural infection function `x -> output_gain * net(input_scale * x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NeuralBetaDocument", into = "NeuralBetaDocument")]
pub struct NeuralBeta {
    pub mlp: Mlp,
    pub input_scale: f64,
    pub output_gain: f64,
}

#[derive(Serialize, Deserialize)]
struct NeuralBetaDocument {
    input_scale: f64,
    output_gain: f64,
    #[serde(flatten)]
    network: MlpDocument,
}

impl From<NeuralBeta> for NeuralBetaDocument {
    fn from(b: NeuralBeta) -> Self {
        Self {
            input_scale: b.input_scale,
            output_gain: b.output_gain,
            network: (&b.mlp).into(),
        }
    }
}

impl TryFrom<NeuralBetaDocument> for NeuralBeta {
    type Error = TrainError;
    fn try_from(doc: NeuralBetaDocument) -> Result<Self, TrainError> {
        NeuralBeta::new(Mlp::try_from(doc.network)?, doc.input_scale, doc.output_gain)
    }
}

impl NeuralBeta {
    pub fn new(mlp: Mlp, input_scale: f64, output_gain: f64) -> Result<Self, TrainError> {
        if mlp.input_dim() != 1 || mlp.output_dim() != 1 {
            return Err(TrainError::NetworkShape(mlp.dims().to_vec()));
        }
        for (name, v) in [("input_scale", input_scale), ("output_gain", output_gain)] {
            if !(v.is_finite() && v != 0.0) {
                return Err(TrainError::Config(format!(
                    "{name} must be finite and non-zero, got {v}"
                )));
            }
        }
        Ok(Self {
            mlp,
            input_scale,
            output_gain,
        })
    }

    pub fn eval_with<S: Scalar>(&self, params: &[S], x: S) -> S {
        self.mlp.eval_scalar(params, x * self.input_scale) * self.output_gain
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_with(self.mlp.params(), x)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        serde_json::from_str(text).map_err(|e| TrainError::Nn(NnError::Json(e.to_string())))
    }
}

/// Learning-rate milestones `(start_iteration, rate)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule(pub Vec<(usize, f64)>);

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self(vec![(0, rate)])
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        match self.0.first() {
            None => return bad("learning-rate schedule is empty".into()),
            Some(&(start, _)) if start != 0 => {
                return bad(format!("learning-rate schedule starts at {start}, not 0"))
            }
            _ => {}
        }
        if self.0.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("learning-rate milestones must be strictly increasing".into());
        }
        if let Some(&(at, rate)) = self.0.iter().find(|(_, r)| !(r.is_finite() && *r > 0.0)) {
            return bad(format!("learning rate {rate} at iteration {at} is not positive"));
        }
        Ok(())
    }

    /// Rate of the latest milestone at or before `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.0
            .iter()
            .take_while(|(start, _)| *start <= iteration)
            .last()
            .or(self.0.first())
            .map(|&(_, rate)| rate)
            .expect("schedule is non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr_schedule: LrSchedule,
    pub iterations: usize,
    pub dt: f64,
    /// End of the fitted horizon; defaults to the end of the data.
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    /// Seeds the network initialisation.
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TrainError::Config(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(TrainError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(TrainError::Config(format!("invalid Adam settings {a:?}")));
        }
        self.lr_schedule.validate()
    }
}

/// Loss components at one parameter point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<S> {
    pub mse: S,
    pub penalty: S,
    pub total: S,
    pub r0: S,
}

/// Fitting problem: model, initial state and observations on a fixed grid.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub model: &'a EpidemicModel,
    pub x0: &'a [f64],
    pub data: &'a Dataset,
}

impl Problem<'_> {
    /// Checks that the data grid is the integration grid of `config`.
    pub fn check_grid(&self, config: &TrainConfig) -> Result<(), TrainError> {
        let d = self.data;
        let t_end = config.t_end.unwrap_or_else(|| d.t_end());
        let expected = crate::ode::grid_steps(d.t0, t_end, config.dt);
        if (d.dt - config.dt).abs() > 1e-12 * config.dt || d.steps() != expected {
            return Err(TrainError::GridMismatch {
                t0: d.t0,
                dt: d.dt,
                steps: d.steps(),
                expected,
                config_dt: config.dt,
            });
        }
        Ok(())
    }

    /// Sample times `t0 + i dt`, `i = 1..=M`.
    pub fn r0_grid(&self) -> Vec<f64> {
        (1..=self.data.steps()).map(|i| self.data.time(i)).collect()
    }

    /// Loss for an arbitrary infection function `beta` on the scalar type `S`.
    ///
    /// `proto` fixes the evaluation context (any value on the target tape).
    pub fn loss_with<S, B>(&self, beta: B, alpha: f64, proto: S) -> Result<LossTerms<S>, TrainError>
    where
        S: Scalar,
        B: Fn(S) -> S,
    {
        let model = self.model;
        model.validate()?;
        model.check_state(self.x0)?;
        let x0: Vec<S> = self.x0.iter().map(|&v| proto.constant_like(v)).collect();
        // Time-driven models evaluate beta at the same times over and over
        // (RK4 half steps, the R0 grid); share those nodes.
        let cache: RefCell<HashMap<u64, S>> = RefCell::new(HashMap::new());
        let time_input = model.infection_input() == InfectionInput::Time;
        let beta = |x: S| {
            if !time_input {
                return beta(x);
            }
            let key = x.value().to_bits();
            if let Some(&y) = cache.borrow().get(&key) {
                return y;
            }
            let y = beta(x);
            cache.borrow_mut().insert(key, y);
            y
        };
        let rhs = model.hybrid_rhs(&beta);
        let d = self.data;
        let traj = integrate_steps(Method::Rk4, &rhs, &x0, d.t0, d.dt, d.steps(), 1)?;
        let k = model.infected_index();
        let pred: Vec<S> = traj.states[1..].iter().map(|x| x[k]).collect();
        let mse = mse(&pred, &d.values[1..])?;
        let r0 = model.r0(beta, &self.r0_grid(), &x0)?;
        let penalty = bifurcation_penalty(r0, alpha);
        Ok(LossTerms {
            mse,
            penalty,
            total: mse + penalty,
            r0,
        })
    }

    /// Loss of the network's current parameters, without a tape.
    pub fn evaluate(&self, beta: &NeuralBeta, alpha: f64) -> Result<LossTerms<f64>, TrainError> {
        let params = beta.mlp.params();
        self.loss_with(|x: f64| beta.eval_with(params, x), alpha, 0.0)
    }

    /// Loss value and gradient with respect to the network parameters.
    pub fn loss_and_grad(
        &self,
        beta: &NeuralBeta,
        alpha: f64,
        tape: &Tape,
    ) -> Result<(LossTerms<f64>, Vec<f64>), TrainError> {
        let params = beta.mlp.bind(tape)?;
        let proto = params[0];
        let terms = self.loss_with(|x| beta.eval_with(&params, x), alpha, proto)?;
        let grads = tape.backward(terms.total).wrt_all(&params);
        Ok((
            LossTerms {
                mse: terms.mse.value(),
                penalty: terms.penalty.value(),
                total: terms.total.value(),
                r0: terms.r0.value(),
            },
            grads,
        ))
    }
}

/// Loss components of one iteration, before its update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub mse: f64,
    pub penalty: f64,
    pub total: f64,
    pub r0: f64,
}

impl From<LossTerms<f64>> for IterationRecord {
    fn from(t: LossTerms<f64>) -> Self {
        Self {
            mse: t.mse,
            penalty: t.penalty,
            total: t.total,
            r0: t.r0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<IterationRecord>,
    /// Trained (or, after divergence, last finite) parameters.
    pub beta: NeuralBeta,
    /// Loss at the returned parameters.
    pub final_loss: Option<IterationRecord>,
}

impl TrainReport {
    pub fn initial_mse(&self) -> Option<f64> {
        self.history.first().map(|r| r.mse)
    }

    pub fn final_mse(&self) -> Option<f64> {
        self.final_loss.or(self.history.last().copied()).map(|r| r.mse)
    }

    /// CSV with header `iteration,mse,penalty,total,r0`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| TrainError::Io(e.into());
        w.write_record(["iteration", "mse", "penalty", "total", "r0"]).map_err(io)?;
        for (i, r) in self.history.iter().enumerate() {
            w.write_record([
                i.to_string(),
                r.mse.to_string(),
                r.penalty.to_string(),
                r.total.to_string(),
                r.r0.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Runs `config.iterations` Adam steps on the penalized loss.
pub fn train(
    problem: &Problem<'_>,
    beta: &NeuralBeta,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    train_with_progress(problem, beta, config, |_, _| {})
}

/// [`train`] with a callback invoked after every iteration.
pub fn train_with_progress<F: FnMut(usize, &IterationRecord)>(
    problem: &Problem<'_>,
    beta: &NeuralBeta,
    config: &TrainConfig,
    mut progress: F,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    problem.check_grid(config)?;
    let mut current = beta.clone();
    let mut params = current.mlp.params().to_vec();
    let mut adam = Adam::new(config.adam, params.len());
    let mut history = Vec::with_capacity(config.iterations);
    let mut capacity = 0;
    for iteration in 0..config.iterations {
        let tape = Tape::with_capacity(capacity);
        let outcome = problem.loss_and_grad(&current, config.alpha, &tape);
        capacity = tape.len();
        let diverged = |reason: String, history: Vec<IterationRecord>, current: &NeuralBeta| {
            TrainError::Divergence {
                iteration,
                reason,
                report: Box::new(TrainReport {
                    history,
                    beta: current.clone(),
                    final_loss: None,
                }),
            }
        };
        let (terms, grads) = match outcome {
            Ok(ok) => ok,
            Err(TrainError::Ode(e @ OdeError::NonFinite { .. })) => {
                return Err(diverged(e.to_string(), history, &current))
            }
            Err(e) => return Err(e),
        };
        if !terms.total.is_finite() || !all_finite(&grads) {
            return Err(diverged(
                format!("loss {} or its gradient is not finite", terms.total),
                history,
                &current,
            ));
        }
        let record = IterationRecord::from(terms);
        history.push(record);
        progress(iteration, &record);
        adam.step(&mut params, &grads, config.lr_schedule.lr_at(iteration));
        if !all_finite(&params) {
            return Err(diverged("parameters became non-finite".into(), history, &current));
        }
        current.mlp.set_params(&params)?;
    }
    let final_loss = problem
        .evaluate(&current, config.alpha)
        .ok()
        .map(IterationRecord::from)
        .filter(|r| r.total.is_finite());
    Ok(TrainReport {
        history,
        beta: current,
        final_loss,
    })
}

/// Gradient norms of the plain and the penalized loss at the same parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeReport {
    pub r0: f64,
    pub grad_norm_plain: f64,
    pub grad_norm_augmented: f64,
}

impl ProbeReport {
    /// `plain / augmented`; 1 when both vanish.
    pub fn ratio(&self) -> f64 {
        if self.grad_norm_augmented == 0.0 {
            1.0
        } else {
            self.grad_norm_plain / self.grad_norm_augmented
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares the plain MSE gradient with the penalized one while the fitted
/// infection function is below threshold.
pub fn vanishing_gradient_probe(
    problem: &Problem<'_>,
    beta: &NeuralBeta,
    alpha: f64,
) -> Result<ProbeReport, TrainError> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(TrainError::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    let (plain, g_plain) = problem.loss_and_grad(beta, 0.0, &Tape::new())?;
    if plain.r0 >= 1.0 {
        return Err(TrainError::ProbePrecondition(plain.r0));
    }
    let (_, g_aug) = problem.loss_and_grad(beta, alpha, &Tape::new())?;
    Ok(ProbeReport {
        r0: plain.r0,
        grad_norm_plain: norm(&g_plain),
        grad_norm_augmented: norm(&g_aug),
    })
}
