//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use adaclip_core::experiment::{validate_value, RunConfig};
use adaclip_core::models::{loss, loss_and_gradient, Example, LossKind, ModelSpec, ParamVector};
use adaclip_core::rng::{RngStream, StreamLabel};
use serde_json::{json, Value};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub fn golden_config_names() -> [&'static str; 3] {
    ["logistic_adaptive", "linear_fixed", "mlp_noisy"]
}

pub fn golden_config(name: &str) -> RunConfig {
    let text = std::fs::read_to_string(golden_dir().join(format!("{name}.json"))).unwrap();
    adaclip_core::experiment::validate_config(&text).unwrap().config
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// One-step RDP of the subsampled Gaussian by brute-force trapezoid
/// integration of `E_{x~N(0,z^2)}[(1 - q + q exp((2x-1)/(2z^2)))^alpha]`
/// on a fine uniform grid, accumulated in log space.
pub fn rdp_oracle(q: f64, z: f64, alpha: f64) -> f64 {
    let lo = -30.0 * z;
    let hi = alpha + 30.0 * z;
    let h = z / 400.0;
    let steps = ((hi - lo) / h).ceil() as usize;
    let h = (hi - lo) / steps as f64;
    let var = z * z;
    let mut acc = f64::NEG_INFINITY;
    for i in 0..=steps {
        let x = lo + i as f64 * h;
        let log_density = -x * x / (2.0 * var) - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let log_mix = log_add((1.0 - q).ln(), q.ln() + (2.0 * x - 1.0) / (2.0 * var));
        let weight: f64 = if i == 0 || i == steps { 0.5 } else { 1.0 };
        acc = log_add(acc, weight.ln() + log_density + alpha * log_mix);
    }
    (acc + h.ln()) / (alpha - 1.0)
}

/// Largest componentwise relative error between the analytic gradient and
/// central differences with step `h`. Components whose magnitude is below
/// `floor` are compared against `floor` instead.
pub fn gradient_check(spec: &ModelSpec, params: &ParamVector, batch: &[Example], h: f64) -> f64 {
    const FLOOR: f64 = 1e-4;
    let (_, grad) = loss_and_gradient(spec, params, batch).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..params.dim() {
        let mut plus = params.to_vec();
        let mut minus = params.to_vec();
        plus[k] += h;
        minus[k] -= h;
        let fd = (loss(spec, &ParamVector::from(plus), batch).unwrap()
            - loss(spec, &ParamVector::from(minus), batch).unwrap())
            / (2.0 * h);
        let denom = grad[k].abs().max(fd.abs()).max(FLOOR);
        worst = worst.max((grad[k] - fd).abs() / denom);
    }
    worst
}

/// One spec per model kind and loss/output combination.
pub fn model_zoo() -> Vec<ModelSpec> {
    vec![
        ModelSpec::linear_regression(4),
        ModelSpec::logistic_regression(5, 1),
        ModelSpec::logistic_regression(5, 3),
        ModelSpec::mlp(4, 6, 1, LossKind::SquaredError),
        ModelSpec::mlp(4, 6, 1, LossKind::CrossEntropy),
        ModelSpec::mlp(3, 5, 4, LossKind::CrossEntropy),
    ]
}

pub fn random_case(spec: &ModelSpec, seed: u64) -> (ParamVector, Vec<Example>) {
    let mut rng = RngStream::new(seed, StreamLabel::DataGen, 0);
    let params = rng.gaussian_vector(spec.param_count(), 0.5);
    let batch = (0..7)
        .map(|_| {
            let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.standard_normal()).collect();
            let y = match (spec.loss, spec.output_dim) {
                (LossKind::SquaredError, _) => rng.gaussian(2.0),
                (LossKind::CrossEntropy, 1) => rng.uniform_int(0, 1) as f64,
                (LossKind::CrossEntropy, k) => rng.uniform_int(0, k as u64 - 1) as f64,
            };
            Example::new(x, y)
        })
        .collect();
    (params, batch)
}

/// Logistic regression on 1000 heterogeneous synthetic users, about 100
/// clients per round, 500 rounds.
pub fn logistic_base_document() -> Value {
    json!({
        "task": {"synthetic": {
            "num_users": 1000, "eval_users": 100, "input_dim": 50,
            "min_examples": 5, "max_examples": 20,
            "kind": "classification", "spread": 10
        }},
        "model": {"kind": "logistic_regression"},
        "rounds": 500, "q": 0.1, "eta_c_client": 0.05, "eta_s": 2.0, "eval_period": 5
    })
}

pub fn config_from(doc: &Value) -> RunConfig {
    validate_value(doc).unwrap().config
}
