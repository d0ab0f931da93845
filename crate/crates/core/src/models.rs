//! Small differentiable models with hand-derived gradients.
//!
//! Parameter layout, row-major throughout:
//! - linear / logistic: `W[out x in]`, then `b[out]`
//! - one-hidden-layer MLP: `W1[h x in]`, `b1[h]`, `W2[out x h]`, `b2[out]`
//!
//! Targets are scalars. Squared error needs `output_dim == 1`. Cross
//! entropy with `output_dim == 1` is a sigmoid on a `{0, 1}` label;
//! with `output_dim >= 2` it is a softmax over class indices.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat parameter (or parameter-delta) vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|x| *x *= factor);
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: f64, other: &ParamVector) {
        assert_eq!(self.dim(), other.dim(), "axpy dimension mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.dim(), other.dim(), "sub dimension mismatch");
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub target: f64,
}

impl Example {
    pub fn new(features: Vec<f64>, target: f64) -> Self {
        Self { features, target }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    Mlp1Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

pub const DEFAULT_HIDDEN_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
    pub loss: LossKind,
}

impl ModelSpec {
    pub fn linear_regression(input_dim: usize) -> Self {
        Self {
            kind: ModelKind::LinearRegression,
            input_dim,
            output_dim: 1,
            hidden_dim: 0,
            loss: LossKind::SquaredError,
        }
    }

    pub fn logistic_regression(input_dim: usize, output_dim: usize) -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            input_dim,
            output_dim,
            hidden_dim: 0,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, output_dim: usize, loss: LossKind) -> Self {
        Self {
            kind: ModelKind::Mlp1Hidden,
            input_dim,
            output_dim,
            hidden_dim,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument(
                "input_dim and output_dim must be positive".into(),
            ));
        }
        match (self.kind, self.loss) {
            (ModelKind::LinearRegression, LossKind::CrossEntropy) => {
                return Err(Error::InvalidArgument(
                    "linear regression requires squared_error loss".into(),
                ))
            }
            (ModelKind::LogisticRegression, LossKind::SquaredError) => {
                return Err(Error::InvalidArgument(
                    "logistic regression requires cross_entropy loss".into(),
                ))
            }
            _ => {}
        }
        if self.loss == LossKind::SquaredError && self.output_dim != 1 {
            return Err(Error::InvalidArgument(
                "squared_error supports output_dim = 1 only".into(),
            ));
        }
        if self.kind == ModelKind::Mlp1Hidden && self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("mlp requires hidden_dim > 0".into()));
        }
        Ok(())
    }

    pub fn is_classification(&self) -> bool {
        self.loss == LossKind::CrossEntropy
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => {
                self.output_dim * (self.input_dim + 1)
            }
            ModelKind::Mlp1Hidden => {
                self.hidden_dim * (self.input_dim + 1) + self.output_dim * (self.hidden_dim + 1)
            }
        }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: params.dim(),
                context: "parameter vector",
            });
        }
        Ok(())
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        if ex.features.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: ex.features.len(),
                context: "example features",
            });
        }
        if self.is_classification() {
            let classes = self.output_dim.max(2);
            let t = ex.target;
            if t.fract() != 0.0 || t < 0.0 || t >= classes as f64 {
                return Err(Error::InvalidArgument(format!(
                    "class label {t} outside 0..{classes}"
                )));
            }
        }
        Ok(())
    }
}

/// Raw model outputs (logits or regression values) for one example, plus
/// the hidden activations when the model has a hidden layer.
struct Forward {
    hidden: Vec<f64>,
    out: Vec<f64>,
}

fn affine(weights: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    let cols = input.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| {
            let row = &weights[r * cols..(r + 1) * cols];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

fn forward(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Forward {
    let (i, o) = (spec.input_dim, spec.output_dim);
    match spec.kind {
        ModelKind::LinearRegression | ModelKind::LogisticRegression => Forward {
            hidden: Vec::new(),
            out: affine(&params[..o * i], &params[o * i..o * (i + 1)], x),
        },
        ModelKind::Mlp1Hidden => {
            let h = spec.hidden_dim;
            let w2_start = h * (i + 1);
            let pre = affine(&params[..h * i], &params[h * i..w2_start], x);
            let hidden: Vec<f64> = pre.iter().map(|&v| libm::tanh(v)).collect();
            let out = affine(
                &params[w2_start..w2_start + o * h],
                &params[w2_start + o * h..],
                &hidden,
            );
            Forward { hidden, out }
        }
    }
}

fn log_sigmoid(v: f64) -> f64 {
    // log(1 / (1 + e^-v)) without overflow
    if v >= 0.0 {
        -libm::log1p(libm::exp(-v))
    } else {
        v - libm::log1p(libm::exp(v))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

/// Loss of one example and d(loss)/d(output).
fn output_loss(spec: &ModelSpec, out: &[f64], target: f64) -> (f64, Vec<f64>) {
    match spec.loss {
        LossKind::SquaredError => {
            let r = out[0] - target;
            (0.5 * r * r, vec![r])
        }
        LossKind::CrossEntropy if spec.output_dim == 1 => {
            let v = out[0];
            let loss = -(target * log_sigmoid(v) + (1.0 - target) * log_sigmoid(-v));
            (loss, vec![sigmoid(v) - target])
        }
        LossKind::CrossEntropy => {
            let peak = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = out.iter().map(|v| libm::exp(v - peak)).collect();
            let total: f64 = exps.iter().sum();
            let label = target as usize;
            let loss = libm::log(total) + peak - out[label];
            let grad = exps
                .iter()
                .enumerate()
                .map(|(k, e)| e / total - if k == label { 1.0 } else { 0.0 })
                .collect();
            (loss, grad)
        }
    }
}

/// Mean loss over `batch` and its gradient with respect to `params`.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[Example],
) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("empty training batch"));
    }
    let (i, o) = (spec.input_dim, spec.output_dim);
    let mut grad = vec![0.0; params.dim()];
    let mut total = 0.0;
    for ex in batch {
        spec.check_example(ex)?;
        let fwd = forward(spec, params, &ex.features);
        let (loss, d_out) = output_loss(spec, &fwd.out, ex.target);
        total += loss;
        match spec.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => {
                for (r, g) in d_out.iter().enumerate() {
                    for (c, x) in ex.features.iter().enumerate() {
                        grad[r * i + c] += g * x;
                    }
                    grad[o * i + r] += g;
                }
            }
            ModelKind::Mlp1Hidden => {
                let h = spec.hidden_dim;
                let w2_start = h * (i + 1);
                let b2_start = w2_start + o * h;
                let w2 = &params[w2_start..b2_start];
                let mut d_hidden = vec![0.0; h];
                for (r, g) in d_out.iter().enumerate() {
                    for (c, a) in fwd.hidden.iter().enumerate() {
                        grad[w2_start + r * h + c] += g * a;
                        d_hidden[c] += g * w2[r * h + c];
                    }
                    grad[b2_start + r] += g;
                }
                for (c, dh) in d_hidden.iter().enumerate() {
                    let a = fwd.hidden[c];
                    let d_pre = dh * (1.0 - a * a);
                    for (k, x) in ex.features.iter().enumerate() {
                        grad[c * i + k] += d_pre * x;
                    }
                    grad[h * i + c] += d_pre;
                }
            }
        }
    }
    let m = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Ok((total / m, ParamVector(grad)))
}

/// Mean loss only.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &[Example]) -> Result<f64> {
    spec.check_params(params)?;
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("empty batch"));
    }
    let mut total = 0.0;
    for ex in batch {
        spec.check_example(ex)?;
        let fwd = forward(spec, params, &ex.features);
        total += output_loss(spec, &fwd.out, ex.target).0;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    /// Accuracy for classification, mean squared error for regression.
    pub metric: f64,
}

pub fn evaluate(spec: &ModelSpec, params: &ParamVector, examples: &[Example]) -> Result<Evaluation> {
    let mean_loss = loss(spec, params, examples)?;
    let metric = if spec.is_classification() {
        let correct = examples
            .iter()
            .filter(|ex| {
                let out = forward(spec, params, &ex.features).out;
                let predicted = if spec.output_dim == 1 {
                    if out[0] > 0.0 { 1.0 } else { 0.0 }
                } else {
                    let mut best = 0;
                    for (k, v) in out.iter().enumerate() {
                        if *v > out[best] {
                            best = k;
                        }
                    }
                    best as f64
                };
                predicted == ex.target
            })
            .count();
        correct as f64 / examples.len() as f64
    } else {
        // mean_loss is half the MSE
        2.0 * mean_loss
    };
    Ok(Evaluation {
        loss: mean_loss,
        metric,
    })
}

/// Whether a larger metric value is better for this model.
pub fn higher_metric_is_better(spec: &ModelSpec) -> bool {
    spec.is_classification()
}

/// Small deterministic initialization: `N(0, 1/fan_in)` weights, zero
/// biases.
pub fn init_params(spec: &ModelSpec, rng: &mut crate::rng::RngStream) -> ParamVector {
    let (i, o, h) = (spec.input_dim, spec.output_dim, spec.hidden_dim);
    match spec.kind {
        ModelKind::LinearRegression | ModelKind::LogisticRegression => {
            ParamVector::zeros(spec.param_count())
        }
        ModelKind::Mlp1Hidden => {
            let mut p = Vec::with_capacity(spec.param_count());
            let s1 = 1.0 / (i as f64).sqrt();
            p.extend((0..h * i).map(|_| s1 * rng.standard_normal()));
            p.extend(std::iter::repeat_n(0.0, h));
            let s2 = 1.0 / (h as f64).sqrt();
            p.extend((0..o * h).map(|_| s2 * rng.standard_normal()));
            p.extend(std::iter::repeat_n(0.0, o));
            ParamVector(p)
        }
    }
}
