//! Scenario configuration and the lockstep simulation loop.
//!
//! Per timestep every meter masks its reading, group masters sum their
//! members' noise and the aggregator reconstructs the total load. Groups and
//! masters are redrawn at the start of every cancellation period. At the end
//! of each billing period the aggregator bills, surcharged meters report
//! noise-caused units, and credits flow into the next period's bills.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{
    aggregated_load, bill_calculation, bill_series, BillStatement, PriorAdjustments, TariffConfig, TariffError,
    BILLING_PERIOD_TIMESTEPS,
};
use crate::baseline_drdp::{run_drdp, DrdpNoise};
use crate::data_io::{
    generate_synthetic, read_dataset_file, write_bills_csv, write_load_csv, write_results_csv, DataError, LoadDataset,
    LoadRow, ResultRow, DEFAULT_GRANULARITY_MINUTES,
};
use crate::dp_noise::{compute_pointwise_sensitivity, BudgetMode, GammaShare, NoiseError, NoiseScale, PrivacyParams};
use crate::energy::MicroKwh;
use crate::grouping::{collect_group_noise, form_groups, GroupingError};
use crate::meter::{
    CancellationScheme, MaskedReading, MeterError, MeterId, ResidualBasis, SmartMeter, SurchargeErrorReport,
};
use crate::metrics::{average_trials, mae, pearson_correlation, MetricsError, SchemeLabel, SchemeSummary, TrialResult};
use crate::seeding::{grouping_rng, meter_rng};

/// What members send to their group master.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseReportMode {
    /// `n_t - nc_{t-1}`: the noise actually embedded in the masked reading,
    /// so reconstruction is exact.
    #[default]
    Net,
    /// Raw `n_t`; reconstruction is off by the cancelled shares.
    LiteralAlg2,
}

#[derive(Debug, Error)]
pub enum TrialError {
    #[error(transparent)]
    Meter(#[from] MeterError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not parse configuration: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Tariff(#[from] TariffError),
    #[error("{scheme} seed {seed}{}: {source}", timestep.map(|t| format!(" timestep {t}")).unwrap_or_default())]
    Trial {
        scheme: SchemeLabel,
        seed: u64,
        timestep: Option<usize>,
        #[source]
        source: TrialError,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("could not serialise run metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub epsilon: f64,
    pub schemes: Vec<CancellationScheme>,
    pub include_drdp: bool,
    /// Synthetic population size (ignored with `input_csv`).
    pub households: usize,
    /// Synthetic horizon in days (ignored with `input_csv`).
    pub days: usize,
    /// Number of noise-aggregation groups per round.
    pub groups: usize,
    pub tariff: TariffConfig,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub input_csv: Option<PathBuf>,
    pub budget_mode: BudgetMode,
    pub noise_report: NoiseReportMode,
    pub drdp_noise: DrdpNoise,
    pub residual_basis: ResidualBasis,
    pub billing_period_timesteps: usize,
    /// Household (dataset position) whose daily profile is correlated.
    pub profile_household: usize,
    /// Day of the profile; defaults to the middle day of the horizon.
    pub profile_day: Option<usize>,
    pub output_dir: PathBuf,
    pub write_load_reports: bool,
    pub write_bills: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            schemes: CancellationScheme::ALL.to_vec(),
            include_drdp: true,
            households: 200,
            days: 30,
            groups: 20,
            tariff: TariffConfig::default(),
            seeds: (0..20).collect(),
            data_seed: 2021,
            input_csv: None,
            budget_mode: BudgetMode::PerReading,
            noise_report: NoiseReportMode::Net,
            drdp_noise: DrdpNoise::Laplace,
            residual_basis: ResidualBasis::PeriodNetNoise,
            billing_period_timesteps: BILLING_PERIOD_TIMESTEPS,
            profile_household: 0,
            profile_day: None,
            output_dir: PathBuf::from("results"),
            write_load_reports: false,
            write_bills: false,
        }
    }
}

impl SimulationConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon must lie in (0, 1], got {}", self.epsilon));
        }
        if self.schemes.is_empty() && !self.include_drdp {
            return bad("no schemes to run".into());
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.input_csv.is_none() && (self.households == 0 || self.days == 0) {
            return bad("households and days must be at least 1".into());
        }
        if self.groups == 0 {
            return bad("groups must be at least 1".into());
        }
        if self.input_csv.is_none() && self.groups > self.households {
            return bad(format!("{} groups exceed {} households", self.groups, self.households));
        }
        if self.billing_period_timesteps == 0 {
            return bad("billing period must span at least one timestep".into());
        }
        if self.input_csv.is_none() && self.profile_household >= self.households {
            return bad(format!("profile household {} out of range", self.profile_household));
        }
        if let Some(day) = self.profile_day {
            if self.input_csv.is_none() && day >= self.days {
                return bad(format!("profile day {day} out of range"));
            }
        }
        self.tariff.validate()?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<LoadDataset, SimError> {
        let dataset = match &self.input_csv {
            Some(path) => read_dataset_file(path, DEFAULT_GRANULARITY_MINUTES)?,
            None => generate_synthetic(
                self.households,
                self.days,
                &mut ChaCha8Rng::seed_from_u64(self.data_seed),
            )?,
        };
        Ok(dataset)
    }

    fn trial_options(&self, dataset: &LoadDataset) -> Result<TrialOptions, SimError> {
        if self.groups > dataset.households() {
            return Err(SimError::Config(format!(
                "{} groups exceed {} households",
                self.groups,
                dataset.households()
            )));
        }
        if self.profile_household >= dataset.households() {
            return Err(SimError::Config(format!(
                "profile household {} out of range",
                self.profile_household
            )));
        }
        let steps_per_day = dataset.steps_per_day();
        let day = self.profile_day.unwrap_or(dataset.days() / 2);
        let start = (day * steps_per_day).min(dataset.timesteps().saturating_sub(1));
        let end = (start + steps_per_day).min(dataset.timesteps());
        Ok(TrialOptions {
            groups: self.groups,
            tariff: self.tariff,
            noise_report: self.noise_report,
            residual_basis: self.residual_basis,
            billing_period_len: self.billing_period_timesteps,
            profile_household: self.profile_household,
            profile_window: start..end,
        })
    }
}

/// Per-trial knobs derived from a [`SimulationConfig`] and a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOptions {
    pub groups: usize,
    pub tariff: TariffConfig,
    pub noise_report: NoiseReportMode,
    pub residual_basis: ResidualBasis,
    pub billing_period_len: usize,
    pub profile_household: usize,
    pub profile_window: std::ops::Range<usize>,
}

impl TrialOptions {
    pub fn new(groups: usize, profile_window: std::ops::Range<usize>) -> Self {
        Self {
            groups,
            tariff: TariffConfig::default(),
            noise_report: NoiseReportMode::Net,
            residual_basis: ResidualBasis::PeriodNetNoise,
            billing_period_len: BILLING_PERIOD_TIMESTEPS,
            profile_household: 0,
            profile_window,
        }
    }
}

/// Everything a single DPNCT trial produced.
#[derive(Debug, Clone, PartialEq)]
pub struct DpnctTrial {
    pub result: TrialResult,
    pub load: Vec<LoadRow>,
    /// Bills of every billing period, period-major.
    pub bills: Vec<BillStatement>,
    /// Error reports filed at each billing close (non-zero ones only).
    pub error_reports: Vec<SurchargeErrorReport>,
    /// Σ X per meter over the whole horizon.
    pub masked_totals: Vec<MicroKwh>,
    /// Masked values of the profiled household over the profile window.
    pub masked_profile: Vec<MicroKwh>,
    pub max_relative_load_error: f64,
    pub incomplete_timesteps: usize,
    pub residual_discarded: MicroKwh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrdpTrial {
    pub result: TrialResult,
    pub bills: Vec<BillStatement>,
    pub masked_totals: Vec<MicroKwh>,
    pub masked_profile: Vec<MicroKwh>,
}

fn relative_error(reconstructed: MicroKwh, truth: MicroKwh) -> f64 {
    (reconstructed - truth).abs().kwh() / truth.kwh().abs().max(1.0)
}

fn profile_correlation(truth: &[MicroKwh], masked: &[MicroKwh]) -> f64 {
    let a: Vec<f64> = truth.iter().map(|v| v.kwh()).collect();
    let b: Vec<f64> = masked.iter().map(|v| v.kwh()).collect();
    pearson_correlation(&a, &b).unwrap_or_else(|e| {
        log::warn!("profile correlation unavailable: {e}");
        f64::NAN
    })
}

fn totals_by_meter(bills: &[BillStatement], meters: usize) -> Vec<f64> {
    let mut totals = vec![0.0; meters];
    for b in bills {
        totals[b.meter_id as usize] += b.total;
    }
    totals
}

/// Runs the full protocol for one scheme and seed over `readings`
/// (meters × timesteps). Meter ids are dataset positions.
#[allow(clippy::needless_range_loop)]
pub fn simulate_dpnct(
    readings: &[Vec<MicroKwh>],
    scale: NoiseScale,
    scheme: CancellationScheme,
    seed: u64,
    opts: &TrialOptions,
) -> Result<DpnctTrial, SimError> {
    let label = SchemeLabel::Dpnct(scheme);
    let fail = |timestep: Option<usize>| {
        move |source: TrialError| SimError::Trial {
            scheme: label,
            seed,
            timestep,
            source,
        }
    };
    let meters = readings.len();
    let horizon = readings.first().map_or(0, Vec::len);
    let share = GammaShare::new(scale, meters).map_err(|e| fail(None)(e.into()))?;
    let ids: Vec<MeterId> = (0..meters as MeterId).collect();
    let mut nodes: Vec<SmartMeter<ChaCha8Rng>> = (0..meters)
        .map(|i| SmartMeter::new(i as MeterId, scheme, share, meter_rng(seed, i)))
        .collect();
    let mut group_rng = grouping_rng(seed);
    let round_len = scheme.period_length();

    let mut masked = vec![
        MaskedReading {
            meter_id: 0,
            timestep: 0,
            masked_value: MicroKwh::ZERO,
            net_noise: MicroKwh::ZERO,
        };
        meters
    ];
    let mut submissions = vec![MicroKwh::ZERO; meters];
    let mut period_masked = vec![MicroKwh::ZERO; meters];
    let mut masked_totals = vec![MicroKwh::ZERO; meters];
    let mut masked_profile = Vec::with_capacity(opts.profile_window.len());
    let mut load = Vec::with_capacity(horizon);
    let mut bills = Vec::new();
    let mut error_reports = Vec::new();
    let mut prior = PriorAdjustments::default();
    let mut assignment = None;
    let mut max_relative_load_error = 0.0f64;
    let mut incomplete_timesteps = 0;

    for t in 0..horizon {
        if t % round_len == 0 || assignment.is_none() {
            let a =
                form_groups(t / round_len, &ids, opts.groups, &mut group_rng).map_err(|e| fail(Some(t))(e.into()))?;
            assignment = Some(a);
        }
        let groups = assignment.as_ref().expect("assigned above");

        let mut true_total = MicroKwh::ZERO;
        for (i, node) in nodes.iter_mut().enumerate() {
            let x = readings[i][t];
            let step = node.step(t, x).map_err(|e| fail(Some(t))(e.into()))?;
            masked[i] = step.masked;
            submissions[i] = match opts.noise_report {
                NoiseReportMode::Net => step.masked.net_noise,
                NoiseReportMode::LiteralAlg2 => step.injected,
            };
            period_masked[i] += step.masked.masked_value;
            masked_totals[i] += step.masked.masked_value;
            true_total += x;
        }
        if opts.profile_window.contains(&t) {
            masked_profile.push(masked[opts.profile_household].masked_value);
        }

        let collected = collect_group_noise(groups, t, |id| submissions.get(id as usize).copied());
        let report = aggregated_load(t, &masked, &collected.reports, groups.len());
        if !report.is_complete() {
            incomplete_timesteps += 1;
        }
        max_relative_load_error = max_relative_load_error.max(relative_error(report.reconstructed_load, true_total));
        load.push(LoadRow {
            timestep: t,
            masked_sum: report.masked_sum,
            group_noise: report.reported_group_noise,
            reconstructed: report.reconstructed_load,
            true_total,
        });

        if (t + 1) % opts.billing_period_len == 0 || t + 1 == horizon {
            let period = t / opts.billing_period_len;
            let totals: Vec<(MeterId, MicroKwh)> = period_masked
                .iter()
                .enumerate()
                .map(|(i, total)| (i as MeterId, *total))
                .collect();
            let period_bills = bill_calculation(period, &totals, &opts.tariff, &prior);
            let errors: Vec<SurchargeErrorReport> = nodes
                .iter_mut()
                .zip(&period_bills)
                .map(|(node, bill)| node.close_billing_period(period, bill.surcharge_units, opts.residual_basis))
                .filter(|r| r.error_units.is_positive())
                .collect();
            prior = PriorAdjustments {
                floored: PriorAdjustments::floored_from(&period_bills),
                errors: errors.clone(),
            };
            error_reports.extend(errors);
            bills.extend(period_bills);
            period_masked.iter_mut().for_each(|v| *v = MicroKwh::ZERO);
        }
    }

    let true_totals: Vec<f64> = readings.iter().map(|row| row.iter().sum::<MicroKwh>().kwh()).collect();
    let masked_kwh: Vec<f64> = masked_totals.iter().map(|v| v.kwh()).collect();
    let mae_total = mae(&true_totals, &masked_kwh).map_err(|e| fail(None)(e.into()))?;
    let true_bills = totals_by_meter(&bill_series(readings, &opts.tariff, opts.billing_period_len), meters);
    let paid = totals_by_meter(&bills, meters);
    let mae_bill = mae(&true_bills, &paid).map_err(|e| fail(None)(e.into()))?;
    let correlation = profile_correlation(
        &readings[opts.profile_household][opts.profile_window.clone()],
        &masked_profile,
    );

    Ok(DpnctTrial {
        result: TrialResult {
            scheme: label,
            seed,
            mae_total_consumption: mae_total,
            mae_bill,
            correlation,
            aggregator_input_correlation: correlation,
        },
        load,
        bills,
        error_reports,
        masked_totals,
        masked_profile,
        max_relative_load_error,
        incomplete_timesteps,
        residual_discarded: nodes.iter().map(|n| n.ledger().discarded()).sum(),
    })
}

/// Runs the trusted-aggregator baseline for one seed.
pub fn simulate_drdp(
    readings: &[Vec<MicroKwh>],
    scale: NoiseScale,
    noise: DrdpNoise,
    seed: u64,
    opts: &TrialOptions,
) -> Result<DrdpTrial, SimError> {
    let fail = |source: TrialError| SimError::Trial {
        scheme: SchemeLabel::Drdp,
        seed,
        timestep: None,
        source,
    };
    let run =
        run_drdp(readings, scale, noise, &opts.tariff, opts.billing_period_len, seed).map_err(|e| fail(e.into()))?;
    let meters = readings.len();
    let true_totals: Vec<f64> = readings.iter().map(|row| row.iter().sum::<MicroKwh>().kwh()).collect();
    let masked_totals: Vec<MicroKwh> = run.masked.iter().map(|row| row.iter().sum()).collect();
    let masked_kwh: Vec<f64> = masked_totals.iter().map(|v| v.kwh()).collect();
    let mae_total = mae(&true_totals, &masked_kwh).map_err(|e| fail(e.into()))?;
    let true_bills = totals_by_meter(&bill_series(readings, &opts.tariff, opts.billing_period_len), meters);
    let mae_bill = mae(&true_bills, &totals_by_meter(&run.bills, meters)).map_err(|e| fail(e.into()))?;
    let truth = &readings[opts.profile_household][opts.profile_window.clone()];
    let masked_profile = run.masked[opts.profile_household][opts.profile_window.clone()].to_vec();
    Ok(DrdpTrial {
        result: TrialResult {
            scheme: SchemeLabel::Drdp,
            seed,
            mae_total_consumption: mae_total,
            mae_bill,
            correlation: profile_correlation(truth, &masked_profile),
            // The trusted aggregator receives the true readings.
            aggregator_input_correlation: profile_correlation(truth, truth),
        },
        bills: run.bills,
        masked_totals,
        masked_profile,
    })
}

/// One finished (scheme, seed) pair.
#[derive(Debug, Clone, PartialEq)]
pub enum TrialOutcome {
    Dpnct(Box<DpnctTrial>),
    Drdp(Box<DrdpTrial>),
}

impl TrialOutcome {
    pub fn result(&self) -> &TrialResult {
        match self {
            TrialOutcome::Dpnct(t) => &t.result,
            TrialOutcome::Drdp(t) => &t.result,
        }
    }

    /// Metric rows for the results CSV.
    pub fn rows(&self) -> Vec<ResultRow> {
        let r = self.result();
        let scheme = r.scheme.to_string();
        let row = |metric: &str, value: f64| ResultRow {
            scheme: scheme.clone(),
            seed: r.seed,
            metric: metric.to_string(),
            value,
        };
        let mut rows: Vec<ResultRow> = TrialResult::METRICS
            .iter()
            .zip(r.metric_values())
            .map(|(m, v)| row(m, v))
            .collect();
        if let TrialOutcome::Dpnct(t) = self {
            rows.push(row("max_relative_load_error", t.max_relative_load_error));
            rows.push(row("incomplete_timesteps", t.incomplete_timesteps as f64));
            rows.push(row("residual_discarded_kwh", t.residual_discarded.kwh()));
        }
        rows
    }
}

/// In-memory result of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub sensitivity: f64,
    pub scale: NoiseScale,
    pub outcomes: Vec<TrialOutcome>,
}

impl ScenarioRun {
    pub fn results(&self) -> Vec<TrialResult> {
        self.outcomes.iter().map(|o| *o.result()).collect()
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        self.outcomes.iter().flat_map(TrialOutcome::rows).collect()
    }

    pub fn summaries(&self) -> Vec<SchemeSummary> {
        average_trials(&self.results())
    }
}

/// Runs every (scheme, seed) pair of `config` over `dataset`, in parallel.
/// Outcomes are ordered by scheme (DPNCT schemes, then DRDP) and seed.
pub fn run_trials(config: &SimulationConfig, dataset: &LoadDataset) -> Result<ScenarioRun, SimError> {
    config.validate()?;
    let opts = config.trial_options(dataset)?;
    let sensitivity = compute_pointwise_sensitivity(dataset.readings())?;
    let params = PrivacyParams::new(config.epsilon, sensitivity, dataset.households())?;
    let scale = config
        .budget_mode
        .scale(&params, config.billing_period_timesteps.min(dataset.timesteps()))?;
    let readings = dataset.fixed_point();

    let mut jobs: Vec<(SchemeLabel, u64)> = Vec::new();
    for scheme in &config.schemes {
        jobs.extend(config.seeds.iter().map(|s| (SchemeLabel::Dpnct(*scheme), *s)));
    }
    if config.include_drdp {
        jobs.extend(config.seeds.iter().map(|s| (SchemeLabel::Drdp, *s)));
    }
    let outcomes = jobs
        .par_iter()
        .map(|(label, seed)| match label {
            SchemeLabel::Dpnct(scheme) => {
                simulate_dpnct(&readings, scale, *scheme, *seed, &opts).map(|t| TrialOutcome::Dpnct(Box::new(t)))
            }
            SchemeLabel::Drdp => simulate_drdp(&readings, scale, config.drdp_noise, *seed, &opts)
                .map(|t| TrialOutcome::Drdp(Box::new(t))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScenarioRun {
        sensitivity,
        scale,
        outcomes,
    })
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    config: &'a SimulationConfig,
    households: usize,
    timesteps: usize,
    sensitivity_kwh: f64,
    lambda_kwh: f64,
    mae_aggregation: &'static str,
    trials: usize,
}

/// Files written by [`run_scenario`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub run: ScenarioRun,
    pub results_csv: PathBuf,
    pub files: Vec<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>, SimError> {
    File::create(path).map(BufWriter::new).map_err(|source| SimError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads or generates the dataset, runs every trial and writes
/// `results.csv`, `run_metadata.json` and any requested per-trial files
/// into the output directory.
pub fn run_scenario(config: &SimulationConfig) -> Result<ScenarioOutput, SimError> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let run = run_trials(config, &dataset)?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|source| SimError::Io {
        path: dir.clone(),
        source,
    })?;

    let results_csv = dir.join("results.csv");
    write_results_csv(&run.rows(), create(&results_csv)?)?;
    let mut files = vec![results_csv.clone()];

    let meta_path = dir.join("run_metadata.json");
    let meta = RunMetadata {
        config,
        households: dataset.households(),
        timesteps: dataset.timesteps(),
        sensitivity_kwh: run.sensitivity,
        lambda_kwh: run.scale.lambda(),
        mae_aggregation: "mean over households of |x - X| / x (not the sum)",
        trials: run.outcomes.len(),
    };
    serde_json::to_writer_pretty(create(&meta_path)?, &meta)?;
    files.push(meta_path);

    for outcome in &run.outcomes {
        let r = outcome.result();
        let stem = format!("{}_{}", r.scheme, r.seed);
        if config.write_load_reports {
            if let TrialOutcome::Dpnct(t) = outcome {
                let path = dir.join(format!("load_{stem}.csv"));
                write_load_csv(&t.load, create(&path)?)?;
                files.push(path);
            }
        }
        if config.write_bills {
            let bills = match outcome {
                TrialOutcome::Dpnct(t) => &t.bills,
                TrialOutcome::Drdp(t) => &t.bills,
            };
            let path = dir.join(format!("bills_{stem}.csv"));
            write_bills_csv(&r.scheme.to_string(), r.seed, bills, create(&path)?)?;
            files.push(path);
        }
    }
    Ok(ScenarioOutput {
        run,
        results_csv,
        files,
    })
}
