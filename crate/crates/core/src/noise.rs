//! Pre-log transmission noise: `I = Poisson(I0 exp(-y)) + Normal(0, sigma_e^2)`,
//! followed by `y = -ln(max(I, 0.1) / I0)`.
//!
//! Every detector bin draws from its own ChaCha8 stream (stream id = bin
//! index) keyed by the seed, so results do not depend on evaluation order.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PtdError, Result};
use crate::fanbeam::Sinogram;

/// Counts floor applied before the log transform.
pub const MIN_COUNTS: f64 = 0.1;

/// Below this rate Poisson draws are exact; above it a rounded normal is used.
pub const POISSON_EXACT_LIMIT: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub i0: f64,
    pub sigma_e2: f64,
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            i0: 1e6,
            sigma_e2: 10.0,
            seed: 0,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.i0 > 0.0) || !(self.sigma_e2 >= 0.0) {
            return Err(PtdError::InvalidArgument(format!(
                "need i0 > 0 and sigma_e2 >= 0, got i0={} sigma_e2={}",
                self.i0, self.sigma_e2
            )));
        }
        Ok(())
    }
}

/// Poisson draw: inversion for `lambda < 50`, otherwise `N(lambda, lambda)`
/// rounded and clamped at zero.
pub fn poisson_sample<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<u64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(PtdError::InvalidArgument(format!("poisson rate must be positive, got {}", lambda)));
    }
    if lambda < POISSON_EXACT_LIMIT {
        let u: f64 = rng.random();
        let mut k = 0u64;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
            if p == 0.0 && cdf < u {
                // u landed in the rounding gap above the accumulated cdf
                break;
            }
        }
        Ok(k)
    } else {
        let z: f64 = StandardNormal.sample(rng);
        Ok((lambda + lambda.sqrt() * z).round().max(0.0) as u64)
    }
}

/// Substream for one detector bin.
pub fn bin_rng(seed: u64, bin: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(bin);
    rng
}

/// Noisy transmission counts for one bin.
pub fn noisy_counts(clean: f64, params: &NoiseParams, rng: &mut ChaCha8Rng) -> Result<f64> {
    let lambda = params.i0 * (-clean).exp();
    // a vanishing rate gives zero photons
    let photons = if lambda > 0.0 { poisson_sample(lambda, rng)? as f64 } else { 0.0 };
    let z: f64 = StandardNormal.sample(rng);
    Ok(photons + params.sigma_e2.sqrt() * z)
}

/// Applies the noise model to clean post-log line integrals (physical
/// attenuation units, dimensionless).
pub fn apply_noise(clean: &Sinogram, params: &NoiseParams) -> Result<Sinogram> {
    params.validate()?;
    if let Some(bad) = clean.data.iter().find(|v| !(**v >= 0.0)) {
        return Err(PtdError::InvalidArgument(format!(
            "line integrals must be non-negative, found {}",
            bad
        )));
    }
    let data = clean
        .data
        .iter()
        .enumerate()
        .map(|(bin, &y)| {
            let mut rng = bin_rng(params.seed, bin as u64);
            let counts = noisy_counts(y, params, &mut rng)?;
            Ok(-(counts.max(MIN_COUNTS) / params.i0).ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    Sinogram::from_vec(clean.n_views, clean.n_det, data)
}
