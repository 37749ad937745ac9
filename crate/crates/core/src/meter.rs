//! Smart-meter side of the protocol.
//!
//! Each reading is masked with a fresh gamma share `n_t` and, at the same
//! time, with the negation of a share injected one cancellation period
//! earlier. Over a billing period the injected noise telescopes away, leaving
//! only the shares of the final period uncancelled.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use log::{debug, trace};
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp_noise::GammaShare;
use crate::energy::MicroKwh;

pub type MeterId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MeterError {
    #[error("meter {meter_id}: expected timestep {expected}, got {got}")]
    OutOfOrderTimestep {
        meter_id: MeterId,
        expected: usize,
        got: usize,
    },
    #[error("meter {meter_id}: negative consumption at timestep {timestep}")]
    NegativeConsumption { meter_id: MeterId, timestep: usize },
    #[error("meter {meter_id}: more than {period_length} readings in one cancellation period")]
    PeriodOverrun { meter_id: MeterId, period_length: usize },
    #[error("unknown cancellation scheme {0:?}")]
    UnknownScheme(String),
}

/// Noise cancellation period Δt, in 10-minute timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CancellationScheme {
    Hourly,
    Daily,
    Weekly,
}

impl CancellationScheme {
    pub const ALL: [CancellationScheme; 3] = [Self::Hourly, Self::Daily, Self::Weekly];

    pub fn period_length(self) -> usize {
        match self {
            Self::Hourly => 6,
            Self::Daily => 6 * 24,
            Self::Weekly => 6 * 24 * 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Hourly => "Hourly",
            Self::Daily => "Daily",
            Self::Weekly => "Weekly",
        }
    }
}

impl fmt::Display for CancellationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CancellationScheme {
    type Err = MeterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hourly" => Ok(Self::Hourly),
            "daily" => Ok(Self::Daily),
            "weekly" => Ok(Self::Weekly),
            _ => Err(MeterError::UnknownScheme(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeterReading {
    pub meter_id: MeterId,
    pub timestep: usize,
    pub consumption: MicroKwh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedReading {
    pub meter_id: MeterId,
    pub timestep: usize,
    pub masked_value: MicroKwh,
    /// `n_t - nc_{t-1}`, the noise actually embedded in `masked_value`.
    pub net_noise: MicroKwh,
}

impl MaskedReading {
    pub fn unmasked(&self) -> MicroKwh {
        self.masked_value - self.net_noise
    }
}

/// Noise injected in the current cancellation period and noise from the
/// previous period still waiting to be cancelled.
///
/// Cancellation is FIFO: the j-th reading of a period cancels the j-th share
/// injected in the period before.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseLedger {
    meter_id: MeterId,
    period_length: usize,
    next_timestep: usize,
    current: VecDeque<MicroKwh>,
    previous: VecDeque<MicroKwh>,
    discarded: MicroKwh,
    empty_pops: u64,
}

impl NoiseLedger {
    pub fn new(meter_id: MeterId, scheme: CancellationScheme) -> Self {
        Self::with_period_length(meter_id, scheme.period_length())
    }

    /// # Panics
    /// If `period_length` is zero.
    pub fn with_period_length(meter_id: MeterId, period_length: usize) -> Self {
        assert!(period_length > 0, "cancellation period must be non-empty");
        Self {
            meter_id,
            period_length,
            next_timestep: 0,
            current: VecDeque::with_capacity(period_length),
            previous: VecDeque::with_capacity(period_length),
            discarded: MicroKwh::ZERO,
            empty_pops: 0,
        }
    }

    pub fn meter_id(&self) -> MeterId {
        self.meter_id
    }

    pub fn period_length(&self) -> usize {
        self.period_length
    }

    pub fn next_timestep(&self) -> usize {
        self.next_timestep
    }

    pub fn current_period(&self) -> impl ExactSizeIterator<Item = &MicroKwh> {
        self.current.iter()
    }

    pub fn previous_period(&self) -> impl ExactSizeIterator<Item = &MicroKwh> {
        self.previous.iter()
    }

    /// Total noise discarded uncancelled at rotations so far.
    pub fn discarded(&self) -> MicroKwh {
        self.discarded
    }

    /// Number of readings that found nothing to cancel.
    pub fn empty_pops(&self) -> u64 {
        self.empty_pops
    }

    /// Applies an already drawn share `injected` to `reading`.
    ///
    /// Returns the masked reading and the cancelled share popped from the
    /// previous period (zero when nothing was pending).
    pub fn apply(
        &mut self,
        reading: MeterReading,
        injected: MicroKwh,
    ) -> Result<(MaskedReading, MicroKwh), MeterError> {
        if reading.timestep != self.next_timestep {
            return Err(MeterError::OutOfOrderTimestep {
                meter_id: self.meter_id,
                expected: self.next_timestep,
                got: reading.timestep,
            });
        }
        if reading.consumption.is_negative() {
            return Err(MeterError::NegativeConsumption {
                meter_id: self.meter_id,
                timestep: reading.timestep,
            });
        }
        if self.current.len() >= self.period_length {
            return Err(MeterError::PeriodOverrun {
                meter_id: self.meter_id,
                period_length: self.period_length,
            });
        }
        let cancelled = match self.previous.pop_front() {
            Some(value) => value,
            None => {
                self.empty_pops += 1;
                trace!(
                    "meter {}: nothing to cancel at timestep {}",
                    self.meter_id,
                    reading.timestep
                );
                MicroKwh::ZERO
            }
        };
        self.current.push_back(injected);
        self.next_timestep += 1;
        let net_noise = injected - cancelled;
        Ok((
            MaskedReading {
                meter_id: self.meter_id,
                timestep: reading.timestep,
                masked_value: reading.consumption + net_noise,
                net_noise,
            },
            cancelled,
        ))
    }

    /// Moves the current period into the cancellation queue.
    ///
    /// Anything left uncancelled in the old previous period is dropped and
    /// returned.
    pub fn rotate(&mut self) -> MicroKwh {
        let residual: MicroKwh = self.previous.iter().sum();
        if !self.previous.is_empty() {
            debug!(
                "meter {}: discarding {} uncancelled values ({} kWh) at rotation",
                self.meter_id,
                self.previous.len(),
                residual
            );
        }
        self.previous.clear();
        std::mem::swap(&mut self.previous, &mut self.current);
        self.discarded += residual;
        residual
    }
}

/// Draws a fresh share for `reading` and masks it through `ledger`.
pub fn mask_reading<R: Rng + ?Sized>(
    reading: MeterReading,
    ledger: &mut NoiseLedger,
    share: &GammaShare,
    rng: &mut R,
) -> Result<MaskedReading, MeterError> {
    let injected = MicroKwh::from_kwh(share.sample(rng));
    ledger.apply(reading, injected).map(|(masked, _)| masked)
}

pub fn rotate_period(ledger: &mut NoiseLedger) -> MicroKwh {
    ledger.rotate()
}

/// Which noise total a meter compares against surcharge units when it
/// reports a billing error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualBasis {
    /// Signed sum of net noise over the billing period, i.e. exactly the
    /// difference between the masked and the true period total.
    #[default]
    PeriodNetNoise,
    /// Noise injected during the final cancellation period of the billing
    /// period, regardless of what was cancelled earlier.
    FinalWindowInjected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurchargeErrorReport {
    pub meter_id: MeterId,
    pub billing_period: usize,
    pub error_units: MicroKwh,
}

/// Units of surcharge attributable to noise: the surcharge itself when the
/// positive residual covers it, otherwise the residual.
pub fn error_units(surcharge_units: MicroKwh, residual: MicroKwh) -> MicroKwh {
    if surcharge_units.is_positive() && residual.is_positive() {
        surcharge_units.min(residual)
    } else {
        MicroKwh::ZERO
    }
}

pub fn compute_error_report(
    meter_id: MeterId,
    billing_period: usize,
    surcharge_units: MicroKwh,
    net_noise_history: &[MicroKwh],
) -> SurchargeErrorReport {
    let residual: MicroKwh = net_noise_history.iter().sum();
    SurchargeErrorReport {
        meter_id,
        billing_period,
        error_units: error_units(surcharge_units, residual),
    }
}

/// Outcome of one meter step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeterStep {
    pub masked: MaskedReading,
    /// Raw `n_t` drawn for this reading.
    pub injected: MicroKwh,
    pub cancelled: MicroKwh,
}

/// A meter with its ledger, noise source and billing-period bookkeeping.
#[derive(Debug, Clone)]
pub struct SmartMeter<R> {
    ledger: NoiseLedger,
    share: GammaShare,
    rng: R,
    period_net_noise: MicroKwh,
}

impl<R: Rng> SmartMeter<R> {
    pub fn new(meter_id: MeterId, scheme: CancellationScheme, share: GammaShare, rng: R) -> Self {
        Self::with_period_length(meter_id, scheme.period_length(), share, rng)
    }

    pub fn with_period_length(meter_id: MeterId, period_length: usize, share: GammaShare, rng: R) -> Self {
        Self {
            ledger: NoiseLedger::with_period_length(meter_id, period_length),
            share,
            rng,
            period_net_noise: MicroKwh::ZERO,
        }
    }

    pub fn id(&self) -> MeterId {
        self.ledger.meter_id()
    }

    pub fn ledger(&self) -> &NoiseLedger {
        &self.ledger
    }

    /// Rotates on cancellation-period boundaries, then masks the reading.
    pub fn step(&mut self, timestep: usize, consumption: MicroKwh) -> Result<MeterStep, MeterError> {
        let next = self.ledger.next_timestep();
        if next > 0 && next.is_multiple_of(self.ledger.period_length()) && timestep == next {
            self.ledger.rotate();
        }
        let injected = MicroKwh::from_kwh(self.share.sample(&mut self.rng));
        let (masked, cancelled) = self.ledger.apply(
            MeterReading {
                meter_id: self.id(),
                timestep,
                consumption,
            },
            injected,
        )?;
        self.period_net_noise += masked.net_noise;
        Ok(MeterStep {
            masked,
            injected,
            cancelled,
        })
    }

    /// Net noise accumulated since the last billing close.
    pub fn period_net_noise(&self) -> MicroKwh {
        self.period_net_noise
    }

    /// Closes a billing period: computes the error report for the surcharge
    /// the aggregator notified (zero when none) and resets the period sum.
    pub fn close_billing_period(
        &mut self,
        billing_period: usize,
        surcharge_units: MicroKwh,
        basis: ResidualBasis,
    ) -> SurchargeErrorReport {
        let residual = match basis {
            ResidualBasis::PeriodNetNoise => self.period_net_noise,
            ResidualBasis::FinalWindowInjected => self.ledger.current_period().sum(),
        };
        self.period_net_noise = MicroKwh::ZERO;
        SurchargeErrorReport {
            meter_id: self.id(),
            billing_period,
            error_units: error_units(surcharge_units, residual),
        }
    }
}
