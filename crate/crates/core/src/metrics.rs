//! Utility and privacy metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meter::CancellationScheme;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} values")]
    TooShort(usize),
    #[error("true total of household {0} is zero")]
    ZeroDenominator(usize),
    #[error("series is constant")]
    DegenerateSeries,
    #[error("unknown scheme label {0:?}")]
    UnknownScheme(String),
}

/// Mean over households of `|x_i - X_i| / x_i`.
///
/// The relative errors are averaged rather than summed so that values stay
/// comparable across population sizes; for a single household both agree.
pub fn mae(true_totals: &[f64], masked_totals: &[f64]) -> Result<f64, MetricsError> {
    if true_totals.len() != masked_totals.len() {
        return Err(MetricsError::LengthMismatch(true_totals.len(), masked_totals.len()));
    }
    if true_totals.is_empty() {
        return Err(MetricsError::TooShort(1));
    }
    let mut sum = 0.0;
    for (i, (x, masked)) in true_totals.iter().zip(masked_totals).enumerate() {
        if *x == 0.0 {
            return Err(MetricsError::ZeroDenominator(i));
        }
        sum += ((x - masked) / x).abs();
    }
    Ok(sum / true_totals.len() as f64)
}

pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::TooShort(2));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(MetricsError::DegenerateSeries);
    }
    Ok((cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeLabel {
    Dpnct(CancellationScheme),
    Drdp,
}

impl fmt::Display for SchemeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeLabel::Dpnct(s) => write!(f, "DPNCT-{}", s.name()),
            SchemeLabel::Drdp => f.write_str("DRDP"),
        }
    }
}

impl FromStr for SchemeLabel {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "DRDP" {
            return Ok(SchemeLabel::Drdp);
        }
        s.strip_prefix("DPNCT-")
            .and_then(|rest| rest.parse().ok())
            .map(SchemeLabel::Dpnct)
            .ok_or_else(|| MetricsError::UnknownScheme(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialResult {
    pub scheme: SchemeLabel,
    pub seed: u64,
    pub mae_total_consumption: f64,
    pub mae_bill: f64,
    /// Published masked daily profile vs truth for the profiled household.
    pub correlation: f64,
    /// Same comparison for what the aggregator receives from the meter.
    pub aggregator_input_correlation: f64,
}

impl TrialResult {
    pub const METRICS: [&'static str; 4] = [
        "mae_total_consumption",
        "mae_bill",
        "correlation",
        "aggregator_input_correlation",
    ];

    pub fn metric_values(&self) -> [f64; 4] {
        [
            self.mae_total_consumption,
            self.mae_bill,
            self.correlation,
            self.aggregator_input_correlation,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single trial.
    pub std_dev: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_dev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std_dev }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSummary {
    pub scheme: SchemeLabel,
    pub trials: usize,
    pub mae_total_consumption: MetricSummary,
    pub mae_bill: MetricSummary,
    pub correlation: MetricSummary,
    /// Mean and spread of |r|.
    pub abs_correlation: MetricSummary,
    pub aggregator_input_correlation: MetricSummary,
}

/// Per-scheme means and sample standard deviations, ordered by scheme.
pub fn average_trials(results: &[TrialResult]) -> Vec<SchemeSummary> {
    let mut by_scheme: BTreeMap<SchemeLabel, Vec<&TrialResult>> = BTreeMap::new();
    for r in results {
        by_scheme.entry(r.scheme).or_default().push(r);
    }
    by_scheme
        .into_iter()
        .map(|(scheme, trials)| {
            let summary =
                |f: fn(&TrialResult) -> f64| MetricSummary::of(&trials.iter().map(|t| f(t)).collect::<Vec<_>>());
            SchemeSummary {
                scheme,
                trials: trials.len(),
                mae_total_consumption: summary(|t| t.mae_total_consumption),
                mae_bill: summary(|t| t.mae_bill),
                correlation: summary(|t| t.correlation),
                abs_correlation: summary(|t| t.correlation.abs()),
                aggregator_input_correlation: summary(|t| t.aggregator_input_correlation),
            }
        })
        .collect()
}

/// Mean and spread of one metric of one scheme across trial rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSummary {
    pub scheme: String,
    pub metric: String,
    pub trials: usize,
    pub summary: MetricSummary,
}

/// Groups `(scheme, metric, value)` triples in first-appearance order. For
/// every `correlation` metric an `abs_correlation` summary follows it.
pub fn summarize_rows<'a, I>(rows: I) -> Vec<RowSummary>
where
    I: IntoIterator<Item = (&'a str, &'a str, f64)>,
{
    let mut keys: Vec<(String, String)> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut push =
        |scheme: &str, metric: &str, value: f64| match keys.iter().position(|(s, m)| s == scheme && m == metric) {
            Some(i) => values[i].push(value),
            None => {
                keys.push((scheme.to_string(), metric.to_string()));
                values.push(vec![value]);
            }
        };
    for (scheme, metric, value) in rows {
        push(scheme, metric, value);
        if metric == "correlation" {
            push(scheme, "abs_correlation", value.abs());
        }
    }
    keys.into_iter()
        .zip(values)
        .map(|((scheme, metric), v)| RowSummary {
            scheme,
            metric,
            trials: v.len(),
            summary: MetricSummary::of(&v),
        })
        .collect()
}
