//! Small fully connected networks used as the fitted infection function.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Scalar, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("snake activation parameter must be non-zero")]
    ZeroSnakeParameter,
    #[error("network needs at least one layer, got dims {0:?}")]
    TooFewDims(Vec<usize>),
    #[error("layer width must be positive, got dims {0:?}")]
    ZeroWidth(Vec<usize>),
    #[error("{layers} layer(s) but {activations} activation(s)")]
    ActivationCount { layers: usize, activations: usize },
    #[error("layer {layer}: expected {expected} values, got {got}")]
    LayerShape {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("expected input of length {expected}, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error("parameter {index} is not finite")]
    NonFiniteParam { index: usize },
    #[error(transparent)]
    Tape(#[from] AdError),
    #[error("malformed network document: {0}")]
    Json(String),
}

/// `sin(a x)^2 / a`.
pub fn snake(x: f64, a: f64) -> Result<f64, NnError> {
    if a == 0.0 {
        return Err(NnError::ZeroSnakeParameter);
    }
    Ok((a * x).sin().powi(2) / a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Snake { a: f64 },
    Tanh,
    Identity,
}

impl Activation {
    pub fn validate(&self) -> Result<(), NnError> {
        match self {
            Activation::Snake { a } if *a == 0.0 || !a.is_finite() => {
                Err(NnError::ZeroSnakeParameter)
            }
            _ => Ok(()),
        }
    }

    pub fn apply<S: Scalar>(&self, x: S) -> S {
        match *self {
            Activation::Snake { a } => (x * a).sin().square() * (1.0 / a),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Feedforward network `x -> act_n(W_n ... act_1(W_1 x + b_1) ... + b_n)`.
///
/// Parameters live in one flat vector: for each layer, the `out x in` weight
/// matrix in row-major order followed by the `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

fn check_shape(dims: &[usize], activations: &[Activation]) -> Result<(), NnError> {
    if dims.len() < 2 {
        return Err(NnError::TooFewDims(dims.to_vec()));
    }
    if dims.contains(&0) {
        return Err(NnError::ZeroWidth(dims.to_vec()));
    }
    if activations.len() != dims.len() - 1 {
        return Err(NnError::ActivationCount {
            layers: dims.len() - 1,
            activations: activations.len(),
        });
    }
    activations.iter().try_for_each(Activation::validate)
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Weights uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self, NnError> {
        check_shape(dims, activations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = 1.0 / (n_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            params.extend((0..n_in * n_out).map(|_| dist.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        Ok(Self {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            params,
        })
    }

    pub fn from_params(
        dims: &[usize],
        activations: &[Activation],
        params: Vec<f64>,
    ) -> Result<Self, NnError> {
        check_shape(dims, activations)?;
        let expected = param_count(dims);
        if params.len() != expected {
            return Err(NnError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(NnError::NonFiniteParam { index });
        }
        Ok(Self {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::ParamCount {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(NnError::NonFiniteParam { index });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Multiplies the last layer's weights and biases by `factor`. With an
    /// identity output activation this scales the network output.
    pub fn scale_output(&mut self, factor: f64) {
        let last = self.dims.len() - 2;
        let start = param_count(&self.dims[..=last]);
        for p in &mut self.params[start..] {
            *p *= factor;
        }
    }

    /// Adds `delta` to every bias of the output layer.
    pub fn shift_output(&mut self, delta: f64) {
        let out = self.dims[self.dims.len() - 1];
        let n = self.params.len();
        for p in &mut self.params[n - out..] {
            *p += delta;
        }
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<Vec<Var<'t>>, AdError> {
        self.params.iter().map(|&p| tape.leaf(p)).collect()
    }

    /// Forward pass with externally supplied parameters (same layout as
    /// [`Mlp::params`]), e.g. tape leaves from [`Mlp::bind`].
    pub fn forward<S: Scalar>(&self, params: &[S], input: &[S]) -> Result<Vec<S>, NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::ParamCount {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        if input.len() != self.input_dim() {
            return Err(NnError::InputLength {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(self.forward_unchecked(params, input))
    }

    fn forward_unchecked<S: Scalar>(&self, params: &[S], input: &[S]) -> Vec<S> {
        let mut h = input.to_vec();
        let mut offset = 0;
        for (w, act) in self.dims.windows(2).zip(&self.activations) {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_in * n_out];
            let biases = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            h = (0..n_out)
                .map(|j| {
                    let row = &weights[j * n_in..(j + 1) * n_in];
                    let z = row
                        .iter()
                        .zip(&h)
                        .fold(biases[j], |acc, (&wij, &x)| acc + wij * x);
                    act.apply(z)
                })
                .collect();
        }
        h
    }

    /// Scalar-in, scalar-out evaluation for 1 -> 1 networks.
    ///
    /// Panics if the network is not 1 -> 1 or `params` has the wrong length.
    pub fn eval_scalar<S: Scalar>(&self, params: &[S], x: S) -> S {
        assert_eq!(self.input_dim(), 1, "eval_scalar needs a 1-input network");
        assert_eq!(self.output_dim(), 1, "eval_scalar needs a 1-output network");
        assert_eq!(params.len(), self.params.len());
        self.forward_unchecked(params, &[x])[0]
    }

    /// Evaluates with the network's own parameters.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.forward(&self.params, input)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MlpDocument::from(self)).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let doc: MlpDocument =
            serde_json::from_str(text).map_err(|e| NnError::Json(e.to_string()))?;
        Mlp::try_from(doc)
    }
}

/// On-disk form of an [`Mlp`]: per-layer row-major weights and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpDocument {
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&Mlp> for MlpDocument {
    fn from(mlp: &Mlp) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut offset = 0;
        for w in mlp.dims.windows(2) {
            let n_w = w[0] * w[1];
            weights.push(mlp.params[offset..offset + n_w].to_vec());
            biases.push(mlp.params[offset + n_w..offset + n_w + w[1]].to_vec());
            offset += n_w + w[1];
        }
        Self {
            dims: mlp.dims.clone(),
            activations: mlp.activations.clone(),
            weights,
            biases,
        }
    }
}

impl TryFrom<MlpDocument> for Mlp {
    type Error = NnError;

    fn try_from(doc: MlpDocument) -> Result<Self, NnError> {
        check_shape(&doc.dims, &doc.activations)?;
        let layers = doc.dims.len() - 1;
        if doc.weights.len() != layers || doc.biases.len() != layers {
            return Err(NnError::Json(format!(
                "expected {layers} weight and bias arrays, got {} and {}",
                doc.weights.len(),
                doc.biases.len()
            )));
        }
        let mut params = Vec::with_capacity(param_count(&doc.dims));
        for (layer, w) in doc.dims.windows(2).enumerate() {
            let (weights, biases) = (&doc.weights[layer], &doc.biases[layer]);
            if weights.len() != w[0] * w[1] {
                return Err(NnError::LayerShape {
                    layer,
                    expected: w[0] * w[1],
                    got: weights.len(),
                });
            }
            if biases.len() != w[1] {
                return Err(NnError::LayerShape {
                    layer,
                    expected: w[1],
                    got: biases.len(),
                });
            }
            params.extend_from_slice(weights);
            params.extend_from_slice(biases);
        }
        Mlp::from_params(&doc.dims, &doc.activations, params)
    }
}
