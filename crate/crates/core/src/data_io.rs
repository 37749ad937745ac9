//! Household load datasets and CSV files.
//!
//! Input CSV: `timestep,household_id,kwh`, each household's rows in
//! timestep order. Results CSV: `scheme,seed,metric,value`. Load-report CSV:
//! `timestep,masked_sum,group_noise,reconstructed,true_total`. Energy values
//! are written with six decimals, which is the resolution of [`MicroKwh`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use thiserror::Error;

use crate::aggregator::BillStatement;
use crate::energy::MicroKwh;
use crate::metrics::RowSummary;

pub const DEFAULT_GRANULARITY_MINUTES: u32 = 10;
pub const STEPS_PER_HOUR: usize = 6;
pub const STEPS_PER_DAY: usize = STEPS_PER_HOUR * 24;

pub const DATASET_HEADER: [&str; 3] = ["timestep", "household_id", "kwh"];
pub const RESULTS_HEADER: [&str; 4] = ["scheme", "seed", "metric", "value"];
pub const LOAD_HEADER: [&str; 5] = ["timestep", "masked_sum", "group_noise", "reconstructed", "true_total"];
pub const SUMMARY_HEADER: [&str; 5] = ["scheme", "metric", "trials", "mean", "std_dev"];
pub const BILLS_HEADER: [&str; 10] = [
    "scheme",
    "seed",
    "meter_id",
    "billing_period",
    "consumed_units_masked",
    "base_units",
    "surcharge_units",
    "floored_units",
    "error_credit",
    "total",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header { found: Vec<String>, expected: Vec<String> },
    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("household {household_id}: expected timestep {expected}, found {found}")]
    NonMonotoneTimesteps {
        household_id: u32,
        expected: usize,
        found: String,
    },
    #[error("dataset has no readings")]
    Empty,
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Households × timesteps matrix of kWh readings on the 6-decimal grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadDataset {
    household_ids: Vec<u32>,
    granularity_minutes: u32,
    readings: Vec<Vec<f64>>,
}

impl LoadDataset {
    pub fn new(household_ids: Vec<u32>, granularity_minutes: u32, readings: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if readings.is_empty() || readings[0].is_empty() {
            return Err(DataError::Empty);
        }
        if household_ids.len() != readings.len() {
            return Err(DataError::Invalid(format!(
                "{} household ids for {} rows",
                household_ids.len(),
                readings.len()
            )));
        }
        if granularity_minutes == 0 || 60 % granularity_minutes != 0 {
            return Err(DataError::Invalid(format!(
                "granularity {granularity_minutes} min does not divide an hour"
            )));
        }
        let timesteps = readings[0].len();
        for (id, row) in household_ids.iter().zip(&readings) {
            if row.len() != timesteps {
                return Err(DataError::Invalid(format!(
                    "household {id} has {} timesteps, expected {timesteps}",
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(DataError::Invalid(format!("household {id} has reading {bad}")));
            }
        }
        Ok(Self {
            household_ids,
            granularity_minutes,
            readings,
        })
    }

    pub fn households(&self) -> usize {
        self.readings.len()
    }

    pub fn timesteps(&self) -> usize {
        self.readings[0].len()
    }

    pub fn granularity_minutes(&self) -> u32 {
        self.granularity_minutes
    }

    pub fn steps_per_day(&self) -> usize {
        (60 / self.granularity_minutes as usize) * 24
    }

    /// Whole days covered; partial trailing days are not counted.
    pub fn days(&self) -> usize {
        self.timesteps() / self.steps_per_day()
    }

    pub fn household_ids(&self) -> &[u32] {
        &self.household_ids
    }

    pub fn readings(&self) -> &[Vec<f64>] {
        &self.readings
    }

    pub fn series(&self, household: usize) -> &[f64] {
        &self.readings[household]
    }

    /// Readings converted to fixed point.
    pub fn fixed_point(&self) -> Vec<Vec<MicroKwh>> {
        self.readings
            .iter()
            .map(|row| row.iter().map(|v| MicroKwh::from_kwh(*v)).collect())
            .collect()
    }
}

fn round6(v: f64) -> f64 {
    MicroKwh::from_kwh(v).kwh()
}

fn bump(hour: f64, centre: f64, width: f64) -> f64 {
    let d = (hour - centre) / width;
    (-0.5 * d * d).exp()
}

/// Generates `households` diurnal load profiles over `days` days at
/// 10-minute resolution.
///
/// Each household has a low overnight base, a morning and an evening peak,
/// a household-specific scale, day-to-day variation, multiplicative jitter
/// and occasional appliance bursts during waking hours. Values are strictly
/// positive and rounded to six decimals.
pub fn generate_synthetic<R: Rng + ?Sized>(
    households: usize,
    days: usize,
    rng: &mut R,
) -> Result<LoadDataset, DataError> {
    if households == 0 || days == 0 {
        return Err(DataError::Empty);
    }
    let scale_dist = LogNormal::new(0.0, 0.45).expect("valid lognormal");
    let jitter = Normal::new(0.0f64, 0.12).expect("valid normal");
    let timesteps = days * STEPS_PER_DAY;
    let mut readings = Vec::with_capacity(households);

    for _ in 0..households {
        let scale: f64 = scale_dist.sample(rng);
        let base = 0.025 * scale;
        let morning_amp = 0.06 * scale * rng.random_range(0.5..1.5);
        let morning_centre = rng.random_range(6.5..8.5);
        let evening_amp = 0.14 * scale * rng.random_range(0.7..1.3);
        let evening_centre = rng.random_range(18.5..20.5);
        let day_amp = 0.03 * scale * rng.random_range(0.0..1.0);
        // Expected appliance bursts per day and their typical power (kW).
        let bursts_per_day = rng.random_range(1.0..4.0);
        let burst_kw = rng.random_range(1.0..3.0);

        let mut row = Vec::with_capacity(timesteps);
        let mut burst_left = 0usize;
        let mut burst_kwh = 0.0;
        for day in 0..days {
            let day_factor: f64 = rng.random_range(0.85..1.15) * if day % 7 >= 5 { 1.1 } else { 1.0 };
            for step in 0..STEPS_PER_DAY {
                let hour = step as f64 / STEPS_PER_HOUR as f64;
                let activity = morning_amp * bump(hour, morning_centre, 1.0)
                    + evening_amp * bump(hour, evening_centre, 1.6)
                    + day_amp * bump(hour, 13.0, 3.0);
                let awake = (6.0..23.5).contains(&hour);
                if burst_left == 0 && awake && rng.random::<f64>() < bursts_per_day / (17.5 * STEPS_PER_HOUR as f64) {
                    burst_left = rng.random_range(1..=4);
                    burst_kwh = burst_kw * rng.random_range(0.6..1.4) / STEPS_PER_HOUR as f64;
                }
                let mut value = (base + activity) * day_factor * (1.0 + jitter.sample(rng)).max(0.2);
                if burst_left > 0 {
                    value += burst_kwh;
                    burst_left -= 1;
                }
                row.push(round6(value.max(0.001)));
            }
        }
        readings.push(row);
    }
    LoadDataset::new((0..households as u32).collect(), DEFAULT_GRANULARITY_MINUTES, readings)
}

pub fn write_dataset_csv<W: Write>(dataset: &LoadDataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DATASET_HEADER)?;
    for (id, row) in dataset.household_ids.iter().zip(&dataset.readings) {
        let id = id.to_string();
        for (t, v) in row.iter().enumerate() {
            w.write_record([t.to_string().as_str(), id.as_str(), format!("{v:.6}").as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(dataset: &LoadDataset, path: &Path) -> Result<(), DataError> {
    write_dataset_csv(dataset, File::create(path)?)
}

fn check_header<R: Read>(reader: &mut csv::Reader<R>, expected: &[&str]) -> Result<(), DataError> {
    let found: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if found != expected {
        return Err(DataError::Header {
            found,
            expected: expected.iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(())
}

fn field(record: &csv::StringRecord, index: usize, line: u64) -> Result<&str, DataError> {
    record.get(index).map(str::trim).ok_or_else(|| DataError::MalformedRow {
        line,
        reason: format!("missing column {index}"),
    })
}

fn parse<T: std::str::FromStr>(raw: &str, name: &str, line: u64) -> Result<T, DataError> {
    raw.parse().map_err(|_| DataError::MalformedRow {
        line,
        reason: format!("invalid {name} {raw:?}"),
    })
}

pub fn read_dataset_csv<R: Read>(reader: R, granularity_minutes: u32) -> Result<LoadDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    check_header(&mut rdr, &DATASET_HEADER)?;
    let mut by_household: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("expected 3 columns, found {}", record.len()),
            });
        }
        let timestep: usize = parse(field(&record, 0, line)?, "timestep", line)?;
        let household_id: u32 = parse(field(&record, 1, line)?, "household_id", line)?;
        let kwh: f64 = parse(field(&record, 2, line)?, "kwh", line)?;
        if !kwh.is_finite() || kwh < 0.0 {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("kwh must be finite and non-negative, got {kwh}"),
            });
        }
        let series = by_household.entry(household_id).or_default();
        if timestep != series.len() {
            return Err(DataError::NonMonotoneTimesteps {
                household_id,
                expected: series.len(),
                found: format!("{timestep} at line {line}"),
            });
        }
        series.push(kwh);
    }
    let timesteps = by_household.values().map(Vec::len).max().ok_or(DataError::Empty)?;
    for (id, series) in &by_household {
        if series.len() != timesteps {
            return Err(DataError::NonMonotoneTimesteps {
                household_id: *id,
                expected: series.len(),
                found: "end of file".to_string(),
            });
        }
    }
    let (ids, readings) = by_household.into_iter().unzip();
    LoadDataset::new(ids, granularity_minutes, readings)
}

pub fn read_dataset_file(path: &Path, granularity_minutes: u32) -> Result<LoadDataset, DataError> {
    read_dataset_csv(File::open(path)?, granularity_minutes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scheme: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RESULTS_HEADER)?;
    for row in rows {
        w.write_record([
            row.scheme.as_str(),
            row.seed.to_string().as_str(),
            row.metric.as_str(),
            row.value.to_string().as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(reader: R) -> Result<Vec<ResultRow>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    check_header(&mut rdr, &RESULTS_HEADER)?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("expected 4 columns, found {}", record.len()),
            });
        }
        rows.push(ResultRow {
            scheme: field(&record, 0, line)?.to_string(),
            seed: parse(field(&record, 1, line)?, "seed", line)?,
            metric: field(&record, 2, line)?.to_string(),
            value: parse(field(&record, 3, line)?, "value", line)?,
        });
    }
    Ok(rows)
}

/// One load-report line; `true_total` comes from the simulator, which knows
/// the unmasked readings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadRow {
    pub timestep: usize,
    pub masked_sum: MicroKwh,
    pub group_noise: MicroKwh,
    pub reconstructed: MicroKwh,
    pub true_total: MicroKwh,
}

pub fn write_load_csv<W: Write>(rows: &[LoadRow], writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(LOAD_HEADER)?;
    for r in rows {
        w.write_record([
            r.timestep.to_string(),
            r.masked_sum.to_string(),
            r.group_noise.to_string(),
            r.reconstructed.to_string(),
            r.true_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bills_csv<W: Write>(scheme: &str, seed: u64, bills: &[BillStatement], writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(BILLS_HEADER)?;
    for b in bills {
        w.write_record([
            scheme.to_string(),
            seed.to_string(),
            b.meter_id.to_string(),
            b.billing_period.to_string(),
            b.consumed_units_masked.to_string(),
            b.base_units.to_string(),
            b.surcharge_units.to_string(),
            b.floored_units.to_string(),
            format!("{:.6}", b.error_credit),
            format!("{:.6}", b.total),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(summaries: &[RowSummary], writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    for s in summaries {
        w.write_record([
            s.scheme.clone(),
            s.metric.clone(),
            s.trials.to_string(),
            s.summary.mean.to_string(),
            s.summary.std_dev.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
