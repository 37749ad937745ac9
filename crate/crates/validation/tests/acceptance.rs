//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Run with `cargo test -p dpnct-validation --test acceptance -- --nocapture`.

use std::fs;
use std::time::{Duration, Instant};

use dpnct::aggregator::{
    bill_calculation, bill_series, CreditValuation, PriorAdjustments, TariffConfig, BILLING_PERIOD_TIMESTEPS,
};
use dpnct::dp_noise::{compute_pointwise_sensitivity, BudgetMode, GammaShare, NoiseScale, PrivacyParams};
use dpnct::meter::{compute_error_report, CancellationScheme, MeterReading, NoiseLedger, SmartMeter};
use dpnct::metrics::SchemeLabel;
use dpnct::scenario::{run_scenario, simulate_dpnct, SimulationConfig, TrialOptions, TrialOutcome};
use dpnct::MicroKwh;
use dpnct_validation::{ks_p_value, ks_statistic, laplace_cdf, mean, variance};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

struct Check {
    pass: bool,
    detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn divisibility() -> Check {
    let lambda = 10.0;
    let trials = 10_000;
    let started = Instant::now();
    let mut notes = Vec::new();
    let mut pass = true;
    for (i, n) in [10usize, 50, 200].into_iter().enumerate() {
        let share = GammaShare::new(NoiseScale::new(lambda).unwrap(), n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0xD1u64 + i as u64);
        let sums: Vec<f64> = (0..trials)
            .map(|_| (0..n).map(|_| share.sample(&mut rng)).sum())
            .collect();
        let d = ks_statistic(&sums, |x| laplace_cdf(x, lambda));
        let p = ks_p_value(d, trials);
        let var = variance(&sums);
        let var_ok = (var - 2.0 * lambda * lambda).abs() <= 0.1 * 2.0 * lambda * lambda;
        pass &= p > 0.01 && var_ok;
        notes.push(format!("N={n} D={d:.4} p={p:.3} var={var:.1}"));
    }
    let elapsed = started.elapsed();
    pass &= elapsed < Duration::from_secs(10);
    Check::new(pass, format!("{} in {:.2?}", notes.join(", "), elapsed))
}

fn load_exactness(config: &SimulationConfig) -> Check {
    let dataset = config.load_dataset().unwrap();
    let readings = dataset.fixed_point();
    let sensitivity = compute_pointwise_sensitivity(dataset.readings()).unwrap();
    let params = PrivacyParams::new(config.epsilon, sensitivity, dataset.households()).unwrap();
    let scale = BudgetMode::PerReading.scale(&params, dataset.timesteps()).unwrap();
    let opts = TrialOptions::new(config.groups, 0..dataset.steps_per_day());
    let mut pass = dataset.households() == 200 && dataset.timesteps() == 4320;
    let mut notes = Vec::new();
    for scheme in CancellationScheme::ALL {
        let started = Instant::now();
        let trial = simulate_dpnct(&readings, scale, scheme, 0, &opts).unwrap();
        let elapsed = started.elapsed();
        let mut worst = 0.0f64;
        for (t, row) in trial.load.iter().enumerate() {
            let truth: MicroKwh = readings.iter().map(|r| r[t]).sum();
            let err = (row.reconstructed - truth).abs().kwh() / truth.kwh().abs().max(1.0);
            worst = worst.max(err);
        }
        pass &= worst < 1e-9
            && trial.load.len() == dataset.timesteps()
            && trial.incomplete_timesteps == 0
            && elapsed < Duration::from_secs(10);
        notes.push(format!("{scheme}: max rel err {worst:e} in {elapsed:.2?}"));
    }
    Check::new(pass, notes.join(", "))
}

/// Steps a meter over one billing period and checks every cancellation
/// against the injection it pairs with. Returns the first violation.
fn replay_period(seed: u64, scheme: CancellationScheme, period: usize) -> Result<(), String> {
    let len = scheme.period_length();
    let share = GammaShare::new(NoiseScale::new(1.17).unwrap(), 200).unwrap();
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut meter = SmartMeter::new(7, scheme, share, ChaCha8Rng::seed_from_u64(seed));
    let mut injected = Vec::with_capacity(period);
    let mut net = MicroKwh::ZERO;
    for t in 0..period {
        let x = MicroKwh::from_kwh(data_rng.random_range(0.0..2.0));
        let step = meter.step(t, x).map_err(|e| e.to_string())?;
        let expected = if t >= len { injected[t - len] } else { MicroKwh::ZERO };
        if step.cancelled != expected {
            return Err(format!("t={t}: cancelled {} expected {}", step.cancelled, expected));
        }
        injected.push(step.injected);
        net += step.masked.net_noise;
    }
    // Injections after the last whole window boundary, plus the part of the
    // previous window whose cancellation has not happened yet.
    let last_start = (period - 1) / len * len;
    let unpaired_from = if last_start >= len {
        last_start - len + (period - last_start)
    } else {
        0
    };
    let unpaired: MicroKwh = injected[unpaired_from..last_start]
        .iter()
        .chain(&injected[last_start..])
        .sum();
    if net != unpaired || meter.period_net_noise() != net {
        return Err(format!("net {net} != unpaired {unpaired}"));
    }
    if period.is_multiple_of(len) {
        let final_window: MicroKwh = injected[period - len..].iter().sum();
        if net != final_window {
            return Err(format!("net {net} != final window {final_window}"));
        }
    }
    Ok(())
}

fn telescoping() -> Check {
    let mut notes = Vec::new();
    let mut pass = true;
    let cases = 128;
    for scheme in CancellationScheme::ALL {
        let len = scheme.period_length();
        let whole = BILLING_PERIOD_TIMESTEPS / len * len;
        let mut periods = vec![whole];
        if whole != BILLING_PERIOD_TIMESTEPS {
            periods.push(BILLING_PERIOD_TIMESTEPS);
        }
        for period in periods {
            let mut runner = TestRunner::new(ProptestConfig {
                cases,
                failure_persistence: None,
                ..ProptestConfig::default()
            });
            let outcome = runner.run(&any::<u64>(), |seed| {
                replay_period(seed, scheme, period).map_err(TestCaseError::fail)
            });
            pass &= outcome.is_ok();
            match outcome {
                Ok(()) => notes.push(format!("{scheme}/{period}: {cases} seeds ok")),
                Err(e) => notes.push(format!("{scheme}/{period}: {e}")),
            }
        }
    }
    Check::new(pass, notes.join(", "))
}

fn mean_metric(run: &[TrialOutcome], label: SchemeLabel, f: impl Fn(&TrialOutcome) -> f64) -> f64 {
    let vals: Vec<f64> = run.iter().filter(|o| o.result().scheme == label).map(f).collect();
    mean(&vals)
}

fn scheme_ordering(run: &[TrialOutcome]) -> Check {
    let m = |s| mean_metric(run, SchemeLabel::Dpnct(s), |o| o.result().mae_total_consumption);
    let (h, d, w) = (
        m(CancellationScheme::Hourly),
        m(CancellationScheme::Daily),
        m(CancellationScheme::Weekly),
    );
    Check::new(
        h < d && d < w && h < 0.1,
        format!("MAE hourly {h:.6} < daily {d:.6} < weekly {w:.6}, hourly < 0.1"),
    )
}

fn masking(run: &[TrialOutcome]) -> Check {
    let abs_r = |o: &TrialOutcome| o.result().correlation.abs();
    let drdp: Vec<(u64, f64)> = run
        .iter()
        .filter(|o| o.result().scheme == SchemeLabel::Drdp)
        .map(|o| (o.result().seed, abs_r(o)))
        .collect();
    let drdp_mean = mean(&drdp.iter().map(|p| p.1).collect::<Vec<_>>());
    let mut pass = drdp_mean.is_finite();
    let mut notes = Vec::new();
    for scheme in CancellationScheme::ALL {
        let paired: Vec<(f64, f64)> = run
            .iter()
            .filter(|o| o.result().scheme == SchemeLabel::Dpnct(scheme))
            .map(|o| {
                let seed = o.result().seed;
                let baseline = drdp.iter().find(|p| p.0 == seed).map_or(f64::NAN, |p| p.1);
                (abs_r(o), baseline)
            })
            .collect();
        let ours = mean(&paired.iter().map(|p| p.0).collect::<Vec<_>>());
        let theirs = mean(&paired.iter().map(|p| p.1).collect::<Vec<_>>());
        let wins = paired.iter().filter(|p| p.0 <= p.1).count();
        pass &= ours < 0.3 && ours <= theirs;
        notes.push(format!(
            "{scheme} |r|={ours:.3} (DRDP {theirs:.3}, lower on {wins}/{} seeds)",
            paired.len()
        ));
    }
    Check::new(pass, format!("{}; bound |r| < 0.3", notes.join(", ")))
}

fn bill_free(total: MicroKwh, tariff: &TariffConfig) -> f64 {
    let t = total.kwh();
    let cap = tariff.max_allowed_units;
    t.min(cap) * tariff.unit_price + (t - cap).max(0.0) * tariff.surcharge_price
}

struct TwoPeriods {
    paid: f64,
    noise_free: f64,
    residual: MicroKwh,
    surcharged: bool,
}

/// Runs one meter through two billing periods with the given injections,
/// billing each period and carrying the error report into the second.
fn two_periods(
    truth: &[MicroKwh],
    injections: &[MicroKwh],
    window: usize,
    period: usize,
    tariff: &TariffConfig,
) -> TwoPeriods {
    let mut ledger = NoiseLedger::with_period_length(0, window);
    let mut prior = PriorAdjustments::default();
    let mut paid = 0.0;
    let mut noise_free = 0.0;
    let mut residual = MicroKwh::ZERO;
    let mut surcharged = false;
    for p in 0..2 {
        let mut masked_total = MicroKwh::ZERO;
        let mut nets = Vec::with_capacity(period);
        for t in p * period..(p + 1) * period {
            if t > 0 && t % window == 0 {
                ledger.rotate();
            }
            let reading = MeterReading {
                meter_id: 0,
                timestep: t,
                consumption: truth[t],
            };
            let (masked, _) = ledger.apply(reading, injections[t]).unwrap();
            masked_total += masked.masked_value;
            nets.push(masked.net_noise);
        }
        let bills = bill_calculation(p, &[(0, masked_total)], tariff, &prior);
        let report = compute_error_report(0, p, bills[0].surcharge_units, &nets);
        if p == 0 {
            residual = nets.iter().sum();
            surcharged = bills[0].is_surcharged();
        }
        prior = PriorAdjustments {
            errors: vec![report],
            floored: PriorAdjustments::floored_from(&bills),
        };
        paid += bills[0].total;
        noise_free += bill_free(truth[p * period..(p + 1) * period].iter().copied().sum(), tariff);
    }
    TwoPeriods {
        paid,
        noise_free,
        residual,
        surcharged,
    }
}

/// Spreads `total` over `steps` readings exactly.
fn spread(total: MicroKwh, steps: usize) -> Vec<MicroKwh> {
    let each = MicroKwh(total.0 / steps as i64);
    let mut out = vec![each; steps];
    out[steps - 1] += MicroKwh(total.0 - each.0 * steps as i64);
    out
}

fn refund() -> Check {
    let window = 6;
    let period = 36;
    let premium = TariffConfig::default();
    let at_price = premium.with_credit_valuation(CreditValuation::SurchargePrice);
    let cap = premium.cap();
    let share = GammaShare::new(NoiseScale::new(50.0).unwrap(), 1).unwrap();
    let mut crafted = 0;
    let mut worst_crafted = 0.0f64;
    let mut bound_violations = 0;
    let mut price_violations = 0;
    let mut grid = 0;
    for seed in 0..400u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Noise only in the first period, so the second period cancels it fully.
        let injections: Vec<MicroKwh> = (0..2 * period)
            .map(|t| {
                if t < period {
                    MicroKwh::from_kwh(share.sample(&mut rng))
                } else {
                    MicroKwh::ZERO
                }
            })
            .collect();
        let residual: MicroKwh = injections[period - window..period].iter().sum();
        // Keeps the second period clear of both the floor and the cap, so
        // nothing is left for a third period to settle.
        let second = spread(MicroKwh::from_kwh(rng.random_range(2000.0..3000.0)), period);
        assert!(residual.abs().kwh() < 2000.0);

        if residual.is_positive() {
            // True total sits below the cap; the residual pushes it over.
            let below = MicroKwh(cap.0 - residual.0 / 2);
            let truth: Vec<MicroKwh> = spread(below, period).into_iter().chain(second.clone()).collect();
            let run = two_periods(&truth, &injections, window, period, &premium);
            assert_eq!(run.residual, residual);
            if run.surcharged {
                crafted += 1;
                worst_crafted = worst_crafted.max((run.paid - run.noise_free).abs());
            }
            let loose = two_periods(&truth, &injections, window, period, &at_price);
            if (loose.paid - loose.noise_free).abs() > at_price.surcharge_price * residual.kwh() + 1e-6 {
                price_violations += 1;
            }
        }

        // Anywhere around the cap, the error is at most the premium on the
        // part of a negative residual the clamp refuses to refund.
        for offset in [-3000.0, -500.0, -50.0, 0.0, 50.0, 500.0, 3000.0] {
            let first = MicroKwh::from_kwh(premium.max_allowed_units + offset);
            let truth: Vec<MicroKwh> = spread(first, period).into_iter().chain(second.clone()).collect();
            let run = two_periods(&truth, &injections, window, period, &premium);
            let bound = (premium.surcharge_price - premium.unit_price) * (-residual).max(MicroKwh::ZERO).kwh();
            if (run.paid - run.noise_free).abs() > bound + 1e-6 {
                bound_violations += 1;
            }
            grid += 1;
        }
    }
    Check::new(
        crafted >= 100 && worst_crafted < 1e-6 && bound_violations == 0 && price_violations == 0,
        format!(
            "{crafted} crafted cases, max |paid - noise-free| {worst_crafted:.2e}; \
             {bound_violations}/{grid} grid cases outside clamp bound; \
             {price_violations} surcharge-price credits outside s*residual"
        ),
    )
}

fn drdp_contract(run: &[TrialOutcome], readings: &[Vec<MicroKwh>], tariff: &TariffConfig) -> Check {
    let truth = bill_series(readings, tariff, BILLING_PERIOD_TIMESTEPS);
    let mut seeds = 0;
    let mut identical = 0;
    let mut unit_corr = 0;
    for o in run {
        if let TrialOutcome::Drdp(t) = o {
            seeds += 1;
            let same = t.bills.len() == truth.len()
                && t.bills
                    .iter()
                    .zip(&truth)
                    .all(|(a, b)| a == b && a.total.to_bits() == b.total.to_bits());
            identical += usize::from(same);
            unit_corr += usize::from(t.result.aggregator_input_correlation == 1.0);
        }
    }
    Check::new(
        seeds > 0 && identical == seeds && unit_corr == seeds,
        format!("{identical}/{seeds} seeds bit-identical bills, {unit_corr}/{seeds} input correlation 1.0"),
    )
}

#[test]
fn acceptance_criteria() {
    let base = SimulationConfig::default();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let first = run_scenario(&SimulationConfig {
        output_dir: dir_a.path().to_path_buf(),
        ..base.clone()
    })
    .unwrap();
    let second = run_scenario(&SimulationConfig {
        output_dir: dir_b.path().to_path_buf(),
        ..base.clone()
    })
    .unwrap();
    let outcomes = &first.run.outcomes;
    assert_eq!(outcomes.len(), 80, "60 DPNCT and 20 DRDP trials");
    let readings = base.load_dataset().unwrap().fixed_point();

    let same_csv = fs::read(&first.results_csv).unwrap() == fs::read(&second.results_csv).unwrap();
    let checks = [
        ("Laplace divisibility", divisibility()),
        ("aggregate load exactness", load_exactness(&base)),
        ("telescoping residual", telescoping()),
        ("scheme ordering", scheme_ordering(outcomes)),
        ("masking quality", masking(outcomes)),
        ("billing refund", refund()),
        (
            "DRDP baseline contract",
            drdp_contract(outcomes, &readings, &base.tariff),
        ),
        (
            "determinism",
            Check::new(same_csv, format!("results.csv identical across runs: {same_csv}")),
        ),
    ];

    println!();
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        let verdict = if check.pass { "PASS" } else { "FAIL" };
        println!("{verdict} [{}] {name}: {}", i + 1, check.detail);
        if !check.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
