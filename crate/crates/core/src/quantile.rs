//! Online quantile estimation by gradient steps on the pinball loss.
//!
//! The expected derivative of the pinball loss at `c` is
//! `Pr[X <= c] - gamma`, so stepping against the observed fraction of
//! samples at or below `c` drives the estimate to the `gamma`-quantile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLIP_LEARNING_RATE: f64 = 0.2;
pub const DEFAULT_INITIAL_CLIP: f64 = 0.1;
/// Lower clamp for the linear rule, which can otherwise step below zero.
pub const LINEAR_CLIP_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `c <- c * exp(-eta (b - gamma))`
    #[default]
    Geometric,
    /// `c <- max(c - eta (b - gamma), floor)`
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileConfig {
    pub gamma: f64,
    pub eta_c: f64,
    pub c0: f64,
    pub rule: UpdateRule,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            eta_c: DEFAULT_CLIP_LEARNING_RATE,
            c0: DEFAULT_INITIAL_CLIP,
            rule: UpdateRule::Geometric,
        }
    }
}

impl QuantileConfig {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.eta_c > 0.0 && self.eta_c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eta_c must be positive, got {}",
                self.eta_c
            )));
        }
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "c0 must be positive, got {}",
                self.c0
            )));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> ClipState {
        ClipState {
            c: self.c0,
            round: 0,
        }
    }
}

/// Current quantile estimate and the number of updates applied so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipState {
    pub c: f64,
    pub round: u64,
}

/// Pinball loss of estimate `c` on sample `x`.
pub fn quantile_loss(c: f64, x: f64, gamma: f64) -> f64 {
    if x <= c {
        (1.0 - gamma) * (c - x)
    } else {
        gamma * (x - c)
    }
}

/// Derivative of [`quantile_loss`] in `c`. A tie `x == c` takes the lower
/// branch.
pub fn quantile_loss_derivative(c: f64, x: f64, gamma: f64) -> f64 {
    if x <= c {
        1.0 - gamma
    } else {
        -gamma
    }
}

/// Fraction of `values` that are `<= c`.
pub fn batch_fraction_below(values: &[f64], c: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::DegenerateBatch("no samples to count"));
    }
    let below = values.iter().filter(|&&x| x <= c).count();
    Ok(below as f64 / values.len() as f64)
}

/// One step of the quantile tracker given an (exact or privatized) fraction
/// of samples at or below the current estimate.
pub fn update_clip(state: ClipState, b_hat: f64, cfg: &QuantileConfig) -> ClipState {
    let step = cfg.eta_c * (b_hat - cfg.gamma);
    let c = match cfg.rule {
        UpdateRule::Geometric => state.c * libm::exp(-step),
        UpdateRule::Linear => (state.c - step).max(LINEAR_CLIP_FLOOR),
    };
    ClipState {
        c,
        round: state.round + 1,
    }
}

/// Runs the tracker over a sequence of sample batches using exact
/// fractions, returning the estimate before each update plus the final
/// estimate.
pub fn track_stream<'a, I>(cfg: &QuantileConfig, batches: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    cfg.validate()?;
    let mut state = cfg.initial_state();
    let mut trajectory = vec![state.c];
    for batch in batches {
        let b = batch_fraction_below(batch, state.c)?;
        state = update_clip(state, b, cfg);
        trajectory.push(state.c);
    }
    Ok(trajectory)
}

/// One round of [`quantile_demo`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoRound {
    pub round: u64,
    pub estimate: f64,
    pub frac_below: f64,
    pub frac_noisy: f64,
}

/// Tracks a quantile of a lognormal stream (median 1, log-scale
/// `sigma_log`) with `samples` fresh draws per round. `sigma_b` adds
/// Gaussian noise of that standard deviation to the per-round count.
pub fn quantile_demo(
    cfg: &QuantileConfig,
    rounds: u64,
    samples: usize,
    sigma_log: f64,
    sigma_b: f64,
    seed: u64,
) -> Result<Vec<DemoRound>> {
    use crate::rng::{RngStream, StreamLabel};
    cfg.validate()?;
    if samples == 0 {
        return Err(Error::DegenerateBatch("samples per round must be positive"));
    }
    let mut state = cfg.initial_state();
    let mut out = Vec::with_capacity(rounds as usize);
    for round in 0..rounds {
        let mut data = RngStream::new(seed, StreamLabel::DataGen, round);
        let mut noise = RngStream::new(seed, StreamLabel::CountNoise, round);
        let values: Vec<f64> = (0..samples)
            .map(|_| libm::exp(sigma_log * data.standard_normal()))
            .collect();
        let exact = batch_fraction_below(&values, state.c)?;
        let noisy = exact + noise.gaussian(sigma_b) / samples as f64;
        out.push(DemoRound {
            round,
            estimate: state.c,
            frac_below: exact,
            frac_noisy: noisy,
        });
        state = update_clip(state, noisy, cfg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: [f64; 6] = [15.0, 25.0, 28.0, 40.0, 45.0, 48.0];

    #[test]
    fn loss_examples() {
        assert_eq!(quantile_loss(28.0, 28.0, 0.5), 0.0);
        assert_eq!(quantile_loss(40.0, 48.0, 0.75), 6.0);
        assert_eq!(quantile_loss(10.0, 4.0, 0.5), 3.0);
        assert_eq!(quantile_loss(4.0, 10.0, 0.5), 3.0);
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(quantile_loss_derivative(30.0, 15.0, 0.5), 0.5);
        assert_eq!(quantile_loss_derivative(30.0, 45.0, 0.5), -0.5);
        assert_eq!(quantile_loss_derivative(30.0, 30.0, 0.3), 0.7);
    }

    #[test]
    fn averaged_derivative_brackets_45() {
        let mean = |c: f64| SAMPLE.iter().map(|&x| quantile_loss_derivative(c, x, 0.75)).sum::<f64>() / 6.0;
        // 5/6 of the mass is at or below 45: 5/6 * 0.25 - 1/6 * 0.75
        assert!((mean(45.0) - 1.0 / 12.0).abs() < 1e-15);
        assert!((mean(40.0) + 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn fraction_below() {
        assert_eq!(batch_fraction_below(&SAMPLE, 28.0).unwrap(), 0.5);
        assert_eq!(batch_fraction_below(&SAMPLE, 48.0).unwrap(), 1.0);
        assert_eq!(batch_fraction_below(&[15.0], 10.0).unwrap(), 0.0);
        assert!(matches!(
            batch_fraction_below(&[], 1.0),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn zero_gradient_leaves_clip() {
        for rule in [UpdateRule::Geometric, UpdateRule::Linear] {
            let cfg = QuantileConfig {
                gamma: 0.3,
                rule,
                ..QuantileConfig::default()
            };
            let s = update_clip(ClipState { c: 2.5, round: 4 }, 0.3, &cfg);
            assert_eq!(s.c, 2.5);
            assert_eq!(s.round, 5);
        }
    }

    #[test]
    fn geometric_growth_when_everything_clipped() {
        let cfg = QuantileConfig::default();
        let mut s = cfg.initial_state();
        for _ in 0..25 {
            s = update_clip(s, 0.0, &cfg);
        }
        let factor = s.c / 0.1;
        assert!((factor - 2.5f64.exp()).abs() < 1e-10);
        assert!((factor - 12.18).abs() < 0.01);
    }

    #[test]
    fn count_error_gives_small_multiplicative_error() {
        let cfg = QuantileConfig::default();
        let s0 = ClipState { c: 1.0, round: 0 };
        let exact = update_clip(s0, 0.5, &cfg);
        let noisy = update_clip(s0, 0.35, &cfg);
        let ratio = noisy.c / exact.c;
        assert!((ratio - (0.2f64 * 0.15).exp()).abs() < 1e-12);
        assert!((ratio - 1.03).abs() < 0.001);
    }

    #[test]
    fn linear_rule_clamps_at_floor() {
        let cfg = QuantileConfig {
            gamma: 0.1,
            eta_c: 0.2,
            c0: 0.01,
            rule: UpdateRule::Linear,
        };
        let s = update_clip(cfg.initial_state(), 1.0, &cfg);
        assert_eq!(s.c, LINEAR_CLIP_FLOOR);
    }

    #[test]
    fn config_validation() {
        assert!(QuantileConfig::new(1.2).validate().is_err());
        assert!(QuantileConfig { eta_c: 0.0, ..QuantileConfig::default() }.validate().is_err());
        assert!(QuantileConfig { c0: -1.0, ..QuantileConfig::default() }.validate().is_err());
        assert!(QuantileConfig::new(0.0).validate().is_ok());
    }

    proptest! {
        #[test]
        fn loss_non_negative(c in -1e3f64..1e3, x in -1e3f64..1e3, gamma in 0.0f64..=1.0) {
            prop_assert!(quantile_loss(c, x, gamma) >= 0.0);
        }

        #[test]
        fn median_loss_is_half_abs(c in -1e3f64..1e3, x in -1e3f64..1e3) {
            prop_assert!((quantile_loss(c, x, 0.5) - 0.5 * (x - c).abs()).abs() < 1e-9);
        }

        #[test]
        fn geometric_stays_positive(
            c in 1e-8f64..1e8,
            gamma in 0.0f64..=1.0,
            bs in proptest::collection::vec(-3.0f64..4.0, 1..200),
        ) {
            let cfg = QuantileConfig { gamma, eta_c: 0.2, c0: c, rule: UpdateRule::Geometric };
            let mut s = cfg.initial_state();
            for b in bs {
                s = update_clip(s, b, &cfg);
                prop_assert!(s.c > 0.0);
            }
        }

        #[test]
        fn geometric_scale_equivariance(
            scale in prop_oneof![Just(0.5f64), Just(2.0), Just(4.0), Just(0.125)],
            gamma in 0.05f64..0.95,
            seed in 0u64..1000,
        ) {
            use crate::rng::{RngStream, StreamLabel};
            let mut rng = RngStream::new(seed, StreamLabel::DataGen, 0);
            let batches: Vec<Vec<f64>> = (0..60)
                .map(|_| (0..20).map(|_| libm::exp(1.5 * rng.standard_normal())).collect())
                .collect();
            let scaled: Vec<Vec<f64>> = batches
                .iter()
                .map(|b| b.iter().map(|x| x * scale).collect())
                .collect();
            let cfg = QuantileConfig::new(gamma);
            let cfg_s = QuantileConfig { c0: cfg.c0 * scale, ..cfg };
            let a = track_stream(&cfg, batches.iter().map(Vec::as_slice)).unwrap();
            let b = track_stream(&cfg_s, scaled.iter().map(Vec::as_slice)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                // power-of-two scales are exact in binary floating point
                prop_assert_eq!(x * scale, *y);
            }
        }
    }
}
