//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! For one step with sampling rate `q` and noise multiplier `z`, the RDP at
//! order `alpha` is `log(A_alpha) / (alpha - 1)` where
//!
//! ```text
//! A_alpha = E_{x ~ N(0, z^2)} [ ((1 - q) + q exp((2x - 1) / (2 z^2)))^alpha ]
//! ```
//!
//! Integer orders expand the power binomially and sum in log space; other
//! orders integrate the expectation numerically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bisection bracket for [`solve_noise_for_epsilon`].
pub const NOISE_SEARCH_MIN: f64 = 0.01;
pub const NOISE_SEARCH_MAX: f64 = 100.0;

/// `{1.1, ..., 1.9} ∪ {2, ..., 64} ∪ {128, 256, 512}`
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (1..=9).map(|x| 1.0 + x as f64 / 10.0).collect();
    orders.extend((2..=64).map(f64::from));
    orders.extend([128.0, 256.0, 512.0]);
    orders
}

/// How accumulated RDP is turned into an `(epsilon, delta)` guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conversion {
    /// `eps = rdp + log(1/delta) / (alpha - 1)`
    Classic,
    /// `eps = rdp + log((alpha-1)/alpha) - (log(delta) + log(alpha)) / (alpha - 1)`
    #[default]
    Tight,
}

impl Conversion {
    pub fn epsilon(self, rdp: f64, alpha: f64, delta: f64) -> f64 {
        let eps = match self {
            Conversion::Classic => rdp + (1.0 / delta).ln() / (alpha - 1.0),
            Conversion::Tight => {
                rdp + ((alpha - 1.0) / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0)
            }
        };
        eps.max(0.0)
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_a_integer(q: f64, z: f64, alpha: u64) -> f64 {
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * z * z);
    let mut log_binom = 0.0f64;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let term = log_binom
            + kf * log_q
            + (alpha - k) as f64 * log_1mq
            + (kf * kf - kf) * inv_two_var;
        acc = log_add_exp(acc, term);
    }
    acc
}

/// Composite Simpson over the support of the integrand, carried out in log
/// space. The integrand is a mixture of Gaussians centred between 0 and
/// `alpha`, so a grid spacing of `z / 24` resolves it easily.
fn log_a_quadrature(q: f64, z: f64, alpha: f64) -> f64 {
    let var = z * z;
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let lo = -14.0 * z;
    let hi = alpha + 14.0 * z;
    let mut intervals = ((hi - lo) / (z / 24.0)).ceil().clamp(2000.0, 4.0e6) as usize;
    intervals += intervals % 2;
    let h = (hi - lo) / intervals as f64;
    let log_f = |x: f64| {
        let log_ratio = (2.0 * x - 1.0) / (2.0 * var);
        log_norm - x * x / (2.0 * var) + alpha * log_add_exp(log_1mq, log_q + log_ratio)
    };
    let logs: Vec<f64> = (0..=intervals).map(|i| log_f(lo + i as f64 * h)).collect();
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let w = if i == 0 || i == intervals {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * (l - peak).exp()
        })
        .sum();
    peak + (sum * h / 3.0).ln()
}

/// RDP at order `alpha` of one subsampled-Gaussian step.
pub fn rdp_per_step(q: f64, z: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("q must lie in [0, 1], got {q}")));
    }
    if !(z > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise multiplier must be positive, got {z}"
        )));
    }
    if !(alpha > 1.0) {
        return Err(Error::InvalidArgument(format!("order must exceed 1, got {alpha}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * z * z));
    }
    let log_a = if alpha.fract() == 0.0 && alpha <= 1.0e6 {
        log_a_integer(q, z, alpha as u64)
    } else {
        log_a_quadrature(q, z, alpha)
    };
    let rdp = log_a / (alpha - 1.0);
    if !rdp.is_finite() {
        return Err(Error::NonFinite(format!(
            "RDP for q = {q}, z = {z}, alpha = {alpha}"
        )));
    }
    // Rounding can leave a tiny negative value when the true RDP is ~0.
    Ok(rdp.max(0.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccountantState {
    orders: Vec<f64>,
    per_step: Vec<f64>,
    q: f64,
    z: f64,
    steps: u64,
}

impl AccountantState {
    pub fn new(q: f64, z: f64) -> Result<Self> {
        Self::with_orders(q, z, default_orders())
    }

    pub fn with_orders(q: f64, z: f64, orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::InvalidArgument("order ladder is empty".into()));
        }
        if orders.iter().any(|&a| !(a > 1.0)) {
            return Err(Error::InvalidArgument("orders must all exceed 1".into()));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "orders must be strictly increasing".into(),
            ));
        }
        let per_step = orders
            .iter()
            .map(|&a| rdp_per_step(q, z, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            orders,
            per_step,
            q,
            z,
            steps: 0,
        })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn compose(&mut self, steps: u64) {
        self.steps += steps;
    }

    /// Accumulated RDP per order.
    pub fn rdp(&self) -> Vec<f64> {
        self.per_step
            .iter()
            .map(|r| r * self.steps as f64)
            .collect()
    }

    /// Best `(epsilon, order)` over the ladder for the composed steps.
    pub fn epsilon(&self, delta: f64, conversion: Conversion) -> Result<PrivacySpent> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        self.orders
            .iter()
            .zip(self.rdp())
            .map(|(&alpha, rdp)| PrivacySpent {
                epsilon: conversion.epsilon(rdp, alpha, delta),
                order: alpha,
                delta,
            })
            .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
            .ok_or_else(|| Error::InvalidArgument("order ladder is empty".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpent {
    pub epsilon: f64,
    pub delta: f64,
    /// Rényi order attaining the minimum.
    pub order: f64,
}

/// Composes `steps` more rounds onto `state` and converts to `(eps, delta)`.
pub fn compose_and_convert(
    state: &AccountantState,
    steps: u64,
    delta: f64,
    conversion: Conversion,
) -> Result<PrivacySpent> {
    let mut composed = state.clone();
    composed.compose(steps);
    composed.epsilon(delta, conversion)
}

/// Epsilon of `steps` rounds at `(q, z)` over the default ladder.
pub fn epsilon_for(q: f64, z: f64, steps: u64, delta: f64, conversion: Conversion) -> Result<PrivacySpent> {
    compose_and_convert(&AccountantState::new(q, z)?, steps, delta, conversion)
}

/// Smallest noise multiplier (to bisection tolerance) whose epsilon after
/// `steps` rounds is at most `target_eps`.
pub fn solve_noise_for_epsilon(
    q: f64,
    steps: u64,
    delta: f64,
    target_eps: f64,
    conversion: Conversion,
) -> Result<f64> {
    if !(target_eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target epsilon must be positive, got {target_eps}"
        )));
    }
    let eps = |z: f64| epsilon_for(q, z, steps, delta, conversion).map(|p| p.epsilon);
    if eps(NOISE_SEARCH_MAX)? > target_eps {
        return Err(Error::Unreachable {
            target: target_eps,
            lo: NOISE_SEARCH_MIN,
            hi: NOISE_SEARCH_MAX,
        });
    }
    if eps(NOISE_SEARCH_MIN)? <= target_eps {
        return Ok(NOISE_SEARCH_MIN);
    }
    // Invariant: eps(lo) > target >= eps(hi). Bisect in log space.
    let (mut lo, mut hi) = (NOISE_SEARCH_MIN, NOISE_SEARCH_MAX);
    while hi / lo > 1.0 + 1e-7 {
        let mid = (lo * hi).sqrt();
        if eps(mid)? <= target_eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
