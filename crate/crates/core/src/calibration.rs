//! Splitting an effective noise multiplier between the model-update query
//! and the clipped-count query.
//!
//! Treating the count as a second vector group, the combined multiplier
//! satisfies `z^-2 = z_delta^-2 + (k sigma_b)^-2` where `k = 2` when clients
//! send the shifted bit (sensitivity 0.5) and `k = 1` for the plain 0/1 bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Count noise is `qn / DEFAULT_COUNT_NOISE_DIVISOR` unless overridden.
pub const DEFAULT_COUNT_NOISE_DIVISOR: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Client sampling probability.
    pub q: f64,
    /// Population size.
    pub n: u64,
    /// Effective combined noise multiplier.
    pub z: f64,
    /// Standard deviation of the noise on the summed count bits.
    pub sigma_b: f64,
    /// Noise multiplier applied to the summed updates.
    pub z_delta: f64,
    pub shifted_bits: bool,
}

impl PrivacyParams {
    /// Resolves `z_delta` for an adaptive-clipping run.
    pub fn adaptive(q: f64, n: u64, z: f64, sigma_b: f64, shifted_bits: bool) -> Result<Self> {
        check_sampling(q, n)?;
        let z_delta = derive_update_noise(z, sigma_b, shifted_bits)?;
        Ok(Self {
            q,
            n,
            z,
            sigma_b,
            z_delta,
            shifted_bits,
        })
    }

    /// Fixed clipping spends nothing on the count, so `z_delta = z`.
    pub fn fixed(q: f64, n: u64, z: f64) -> Result<Self> {
        check_sampling(q, n)?;
        if !(z >= 0.0 && z.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise multiplier must be finite and non-negative, got {z}"
            )));
        }
        Ok(Self {
            q,
            n,
            z,
            sigma_b: 0.0,
            z_delta: z,
            shifted_bits: true,
        })
    }

    /// Expected number of clients per round, the divisor of every average.
    pub fn expected_clients(&self) -> f64 {
        self.q * self.n as f64
    }
}

fn check_sampling(q: f64, n: u64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling probability q must lie in (0, 1], got {q}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("population size n must be >= 1".into()));
    }
    Ok(())
}

/// Update-noise multiplier that, together with count noise `sigma_b`,
/// yields effective multiplier `z`.
///
/// `z = 0` means no privacy and returns `z_delta = 0`.
pub fn derive_update_noise(z: f64, sigma_b: f64, shifted: bool) -> Result<f64> {
    if !(z >= 0.0 && z.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise multiplier must be finite and non-negative, got {z}"
        )));
    }
    if !(sigma_b >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "count noise must be non-negative, got {sigma_b}"
        )));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    let (count_scale, bound_name) = if shifted {
        (2.0 * sigma_b, "2*sigma_b")
    } else {
        (sigma_b, "sigma_b")
    };
    if z >= count_scale {
        return Err(Error::CalibrationInfeasible {
            z,
            bound: count_scale,
            bound_name,
        });
    }
    let residual = z.powi(-2) - count_scale.powi(-2);
    let z_delta = residual.powf(-0.5);
    if !z_delta.is_finite() {
        return Err(Error::NonFinite(format!(
            "update noise multiplier for z = {z}, sigma_b = {sigma_b}"
        )));
    }
    Ok(z_delta)
}

/// Inverse of [`derive_update_noise`]: the effective multiplier implied by
/// a given update multiplier and count noise.
pub fn combine_noise(z_delta: f64, sigma_b: f64, shifted: bool) -> f64 {
    let count_scale = if shifted { 2.0 * sigma_b } else { sigma_b };
    (z_delta.powi(-2) + count_scale.powi(-2)).powf(-0.5)
}

/// `qn / 20`.
pub fn default_sigma_b(q: f64, n: u64) -> f64 {
    q * n as f64 / DEFAULT_COUNT_NOISE_DIVISOR
}

/// Per-coordinate standard deviation of the noise added to the summed
/// updates. It is applied before dividing by `qn`.
pub fn update_noise_stddev(z_delta: f64, c: f64) -> f64 {
    // an infinite (disabled) clip with no noise must not yield NaN
    if z_delta == 0.0 {
        return 0.0;
    }
    z_delta * c
}
