//! Differential-privacy noise primitives.
//!
//! The Laplace distribution is infinitely divisible: if `G` and `G'` are
//! independent gamma variates with shape `1/N` and scale `λ`, then the sum of
//! `N` independent copies of `G - G'` is distributed as `Laplace(0, λ)`.
//! Each meter draws one such share per reading without coordinating with the
//! others, and the population-wide sum at any timestep carries exactly the
//! noise of a centralised Laplace mechanism.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NoiseError {
    #[error("no readings to compute sensitivity from")]
    EmptyInput,
    #[error("all readings are zero; the noise scale would be degenerate")]
    ZeroSensitivity,
    #[error("non-finite reading {0}")]
    NonFinite(f64),
    #[error("epsilon must lie in (0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("sensitivity must be positive and finite, got {0}")]
    InvalidSensitivity(f64),
    #[error("population must be at least 1")]
    EmptyPopulation,
    #[error("noise scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("composition horizon must be at least one reading")]
    EmptyHorizon,
}

/// Privacy budget, pointwise sensitivity (kWh) and number of share holders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    epsilon: f64,
    sensitivity: f64,
    population: usize,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, sensitivity: f64, population: usize) -> Result<Self, NoiseError> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(NoiseError::InvalidEpsilon(epsilon));
        }
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(NoiseError::InvalidSensitivity(sensitivity));
        }
        if population == 0 {
            return Err(NoiseError::EmptyPopulation);
        }
        Ok(Self {
            epsilon,
            sensitivity,
            population,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn population(&self) -> usize {
        self.population
    }
}

/// Laplace scale parameter λ in kWh.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseScale(f64);

impl NoiseScale {
    pub fn new(lambda: f64) -> Result<Self, NoiseError> {
        if lambda > 0.0 && lambda.is_finite() {
            Ok(Self(lambda))
        } else {
            Err(NoiseError::InvalidScale(lambda))
        }
    }

    pub fn lambda(&self) -> f64 {
        self.0
    }
}

/// How the budget is spent across the readings of a billing period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// Every reading is released with the full ε (λ = S/ε).
    #[default]
    PerReading,
    /// ε is split uniformly over the `T` readings of a period (λ = S·T/ε).
    Composed,
}

impl BudgetMode {
    pub fn scale(self, params: &PrivacyParams, horizon: usize) -> Result<NoiseScale, NoiseError> {
        match self {
            BudgetMode::PerReading => Ok(laplace_scale(params)),
            BudgetMode::Composed => {
                if horizon == 0 {
                    return Err(NoiseError::EmptyHorizon);
                }
                NoiseScale::new(params.sensitivity * horizon as f64 / params.epsilon)
            }
        }
    }
}

/// Maximum absolute reading over all meters and timesteps.
pub fn compute_pointwise_sensitivity<R: AsRef<[f64]>>(readings: &[R]) -> Result<f64, NoiseError> {
    let mut seen = false;
    let mut max = 0.0f64;
    for value in readings.iter().flat_map(|row| row.as_ref().iter()) {
        if !value.is_finite() {
            return Err(NoiseError::NonFinite(*value));
        }
        seen = true;
        max = max.max(value.abs());
    }
    if !seen {
        return Err(NoiseError::EmptyInput);
    }
    if max == 0.0 {
        return Err(NoiseError::ZeroSensitivity);
    }
    Ok(max)
}

/// λ = S/ε.
pub fn laplace_scale(params: &PrivacyParams) -> NoiseScale {
    // Both factors are validated positive and finite, and ε ≤ 1 keeps the
    // quotient finite.
    NoiseScale(params.sensitivity / params.epsilon)
}

/// One meter's share of a distributed Laplace draw: `G - G'` with
/// `G, G' ~ Gamma(shape = 1/N, scale = λ)`.
#[derive(Debug, Clone, Copy)]
pub struct GammaShare {
    gamma: Gamma<f64>,
}

impl GammaShare {
    pub fn new(scale: NoiseScale, population: usize) -> Result<Self, NoiseError> {
        if population == 0 {
            return Err(NoiseError::EmptyPopulation);
        }
        let gamma = Gamma::new(1.0 / population as f64, scale.lambda())
            .map_err(|_| NoiseError::InvalidScale(scale.lambda()))?;
        Ok(Self { gamma })
    }
}

impl Distribution<f64> for GammaShare {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = self.gamma.sample(rng);
        let g_prime = self.gamma.sample(rng);
        g - g_prime
    }
}

pub fn sample_gamma_share<R: Rng + ?Sized>(
    scale: NoiseScale,
    population: usize,
    rng: &mut R,
) -> Result<f64, NoiseError> {
    Ok(GammaShare::new(scale, population)?.sample(rng))
}

/// Zero-mean Laplace distribution, sampled by inverting the CDF.
#[derive(Debug, Clone, Copy)]
pub struct Laplace {
    scale: f64,
}

impl Laplace {
    pub fn new(scale: NoiseScale) -> Self {
        Self { scale: scale.lambda() }
    }
}

impl Distribution<f64> for Laplace {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let u: f64 = rng.random::<f64>() - 0.5;
            let tail = 1.0 - 2.0 * u.abs();
            // u = -0.5 exactly would give ln(0).
            if tail > 0.0 {
                return -self.scale * u.signum() * tail.ln();
            }
        }
    }
}

pub fn sample_laplace<R: Rng + ?Sized>(scale: NoiseScale, rng: &mut R) -> f64 {
    Laplace::new(scale).sample(rng)
}
