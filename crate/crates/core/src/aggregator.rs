//! Aggregator: load reconstruction from masked readings and group noise
//! reports, and cap/surcharge billing with next-period error credits.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::MicroKwh;
use crate::grouping::GroupNoiseReport;
use crate::meter::{MaskedReading, MeterId, SurchargeErrorReport};

/// One month of 10-minute readings.
pub const BILLING_PERIOD_TIMESTEPS: usize = 6 * 24 * 30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TariffError {
    #[error("unit price must be positive, got {0}")]
    UnitPrice(f64),
    #[error("surcharge price {surcharge} is below the unit price {unit}")]
    SurchargePrice { unit: f64, surcharge: f64 },
    #[error("allowed units must be positive, got {0}")]
    AllowedUnits(f64),
}

/// Price at which reported error units are refunded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CreditValuation {
    /// Refund the surcharge premium (surcharge − unit price) per error unit.
    /// The cancellation shares of the next period already remove the noise
    /// units themselves at unit price.
    #[default]
    SurchargePremium,
    /// Refund the full surcharge price per error unit.
    SurchargePrice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TariffConfig {
    /// kWh per billing period charged at the unit price.
    pub max_allowed_units: f64,
    pub unit_price: f64,
    pub surcharge_price: f64,
    #[serde(default)]
    pub credit_valuation: CreditValuation,
}

impl Default for TariffConfig {
    fn default() -> Self {
        Self {
            max_allowed_units: 5500.0,
            unit_price: 10.0,
            surcharge_price: 20.0,
            credit_valuation: CreditValuation::default(),
        }
    }
}

impl TariffConfig {
    pub fn new(max_allowed_units: f64, unit_price: f64, surcharge_price: f64) -> Result<Self, TariffError> {
        let tariff = Self {
            max_allowed_units,
            unit_price,
            surcharge_price,
            credit_valuation: CreditValuation::default(),
        };
        tariff.validate()?;
        Ok(tariff)
    }

    pub fn with_credit_valuation(mut self, valuation: CreditValuation) -> Self {
        self.credit_valuation = valuation;
        self
    }

    pub fn validate(&self) -> Result<(), TariffError> {
        if !(self.unit_price > 0.0 && self.unit_price.is_finite()) {
            return Err(TariffError::UnitPrice(self.unit_price));
        }
        if !(self.surcharge_price >= self.unit_price && self.surcharge_price.is_finite()) {
            return Err(TariffError::SurchargePrice {
                unit: self.unit_price,
                surcharge: self.surcharge_price,
            });
        }
        if !(self.max_allowed_units > 0.0 && self.max_allowed_units.is_finite()) {
            return Err(TariffError::AllowedUnits(self.max_allowed_units));
        }
        Ok(())
    }

    pub fn cap(&self) -> MicroKwh {
        MicroKwh::from_kwh(self.max_allowed_units)
    }

    pub fn credit_price(&self) -> f64 {
        match self.credit_valuation {
            CreditValuation::SurchargePremium => self.surcharge_price - self.unit_price,
            CreditValuation::SurchargePrice => self.surcharge_price,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub timestep: usize,
    pub masked_sum: MicroKwh,
    pub reported_group_noise: MicroKwh,
    pub reconstructed_load: MicroKwh,
    /// Groups whose master sent nothing; their noise stays in the load.
    pub missing_groups: Vec<usize>,
}

impl LoadReport {
    pub fn is_complete(&self) -> bool {
        self.missing_groups.is_empty()
    }
}

/// Total load at one timestep: masked sum minus the reported group noise.
pub fn aggregated_load(
    timestep: usize,
    masked: &[MaskedReading],
    noise_reports: &[GroupNoiseReport],
    expected_groups: usize,
) -> LoadReport {
    let masked_sum: MicroKwh = masked.iter().map(|m| m.masked_value).sum();
    let reported_group_noise: MicroKwh = noise_reports.iter().map(|r| r.aggregated_noise).sum();
    let present: BTreeSet<usize> = noise_reports.iter().map(|r| r.group_index).collect();
    let missing_groups: Vec<usize> = (0..expected_groups).filter(|g| !present.contains(g)).collect();
    if !missing_groups.is_empty() {
        log::warn!(
            "timestep {timestep}: incomplete round, {} group report(s) missing",
            missing_groups.len()
        );
    }
    LoadReport {
        timestep,
        masked_sum,
        reported_group_noise,
        reconstructed_load: masked_sum - reported_group_noise,
        missing_groups,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BillStatement {
    pub meter_id: MeterId,
    pub billing_period: usize,
    /// Σ X over the period as received.
    pub consumed_units_masked: MicroKwh,
    pub base_units: MicroKwh,
    pub surcharge_units: MicroKwh,
    /// Negative masked total that was billed as zero.
    pub floored_units: MicroKwh,
    pub error_credit: f64,
    pub total: f64,
}

impl BillStatement {
    pub fn is_surcharged(&self) -> bool {
        self.surcharge_units.is_positive()
    }

    /// Bill before credits.
    pub fn gross(&self, tariff: &TariffConfig) -> f64 {
        self.base_units.kwh() * tariff.unit_price + self.surcharge_units.kwh() * tariff.surcharge_price
    }
}

/// Adjustments carried from the previous billing period.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorAdjustments {
    pub errors: Vec<SurchargeErrorReport>,
    /// Units billed as zero last period because the masked total was negative.
    pub floored: BTreeMap<MeterId, MicroKwh>,
}

impl PriorAdjustments {
    pub fn is_empty(&self) -> bool {
        self.errors.is_empty() && self.floored.is_empty()
    }

    pub fn credit_for(&self, meter: MeterId, tariff: &TariffConfig) -> f64 {
        let error_units: MicroKwh = self
            .errors
            .iter()
            .filter(|e| e.meter_id == meter)
            .map(|e| e.error_units)
            .sum();
        let floored = self.floored.get(&meter).copied().unwrap_or_default();
        error_units.kwh() * tariff.credit_price() + floored.kwh() * tariff.unit_price
    }

    /// Collects floored units from a set of freshly computed bills.
    pub fn floored_from(bills: &[BillStatement]) -> BTreeMap<MeterId, MicroKwh> {
        bills
            .iter()
            .filter(|b| b.floored_units.is_positive())
            .map(|b| (b.meter_id, b.floored_units))
            .collect()
    }
}

/// Bills one meter for one period.
pub fn bill_meter(
    meter_id: MeterId,
    billing_period: usize,
    masked_total: MicroKwh,
    tariff: &TariffConfig,
    credit: f64,
) -> BillStatement {
    let floored_units = if masked_total.is_negative() {
        log::debug!("meter {meter_id} period {billing_period}: negative masked total {masked_total} billed as zero");
        -masked_total
    } else {
        MicroKwh::ZERO
    };
    let billable = masked_total.max(MicroKwh::ZERO);
    let cap = tariff.cap();
    let (base_units, surcharge_units) = if billable >= cap {
        (cap, billable - cap)
    } else {
        (billable, MicroKwh::ZERO)
    };
    let gross = base_units.kwh() * tariff.unit_price + surcharge_units.kwh() * tariff.surcharge_price;
    BillStatement {
        meter_id,
        billing_period,
        consumed_units_masked: masked_total,
        base_units,
        surcharge_units,
        floored_units,
        error_credit: credit,
        total: gross - credit,
    }
}

/// Bills every meter for one period, applying last period's credits.
///
/// Surcharged bills carry the surcharge units each meter is notified of.
pub fn bill_calculation(
    billing_period: usize,
    period_masked_totals: &[(MeterId, MicroKwh)],
    tariff: &TariffConfig,
    prior: &PriorAdjustments,
) -> Vec<BillStatement> {
    period_masked_totals
        .iter()
        .map(|&(meter, total)| {
            let credit = if prior.is_empty() {
                0.0
            } else {
                prior.credit_for(meter, tariff)
            };
            bill_meter(meter, billing_period, total, tariff, credit)
        })
        .collect()
}

/// Per-period totals of each series, `period_len` timesteps per period.
pub fn period_totals(series: &[Vec<MicroKwh>], period_len: usize) -> Vec<Vec<MicroKwh>> {
    series
        .iter()
        .map(|row| row.chunks(period_len).map(|c| c.iter().sum()).collect())
        .collect()
}

/// Bills every series for every billing period with no credits. Meter ids
/// are series positions.
pub fn bill_series(series: &[Vec<MicroKwh>], tariff: &TariffConfig, period_len: usize) -> Vec<BillStatement> {
    let totals = period_totals(series, period_len);
    let periods = totals.first().map_or(0, Vec::len);
    let none = PriorAdjustments::default();
    (0..periods)
        .flat_map(|p| {
            let period: Vec<(MeterId, MicroKwh)> =
                totals.iter().enumerate().map(|(i, t)| (i as MeterId, t[p])).collect();
            bill_calculation(p, &period, tariff, &none)
        })
        .collect()
}
