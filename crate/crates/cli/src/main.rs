use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dpnct::aggregator::CreditValuation;
use dpnct::baseline_drdp::DrdpNoise;
use dpnct::data_io::{generate_synthetic, read_results_csv, write_dataset_file, write_summary_csv};
use dpnct::dp_noise::BudgetMode;
use dpnct::meter::{CancellationScheme, ResidualBasis};
use dpnct::metrics::summarize_rows;
use dpnct::scenario::{run_scenario, NoiseReportMode, SimulationConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "dpnct",
    version,
    about = "Smart-meter privacy simulator with periodic noise cancellation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (scheme, seed) trial and write results CSVs.
    Simulate(Box<SimulateArgs>),
    /// Write a synthetic household-load CSV.
    Generate(GenerateArgs),
    /// Summarise one or more results CSVs per scheme and metric.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Hourly,
    Daily,
    Weekly,
}

impl From<SchemeArg> for CancellationScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Hourly => CancellationScheme::Hourly,
            SchemeArg::Daily => CancellationScheme::Daily,
            SchemeArg::Weekly => CancellationScheme::Weekly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BudgetArg {
    PerReading,
    Composed,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseReportArg {
    Net,
    LiteralAlg2,
}

#[derive(Clone, Copy, ValueEnum)]
enum DrdpNoiseArg {
    Distributed,
    Laplace,
}

#[derive(Clone, Copy, ValueEnum)]
enum CreditArg {
    SurchargePremium,
    SurchargePrice,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResidualArg {
    PeriodNetNoise,
    FinalWindowInjected,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<SchemeArg>>,
    /// Skip the trusted-aggregator baseline.
    #[arg(long)]
    no_drdp: bool,
    #[arg(long)]
    households: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    /// Noise-aggregation groups per round.
    #[arg(long)]
    groups: Option<usize>,
    /// Explicit trial seeds.
    #[arg(long, value_delimiter = ',', conflicts_with = "trials")]
    seeds: Option<Vec<u64>>,
    /// Use seeds 0..N.
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Read household loads from this CSV instead of generating them.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    budget_mode: Option<BudgetArg>,
    #[arg(long, value_enum)]
    noise_report: Option<NoiseReportArg>,
    #[arg(long, value_enum)]
    drdp_noise: Option<DrdpNoiseArg>,
    #[arg(long, value_enum)]
    residual_basis: Option<ResidualArg>,
    /// kWh per billing period billed at the unit price.
    #[arg(long)]
    max_units: Option<f64>,
    #[arg(long)]
    unit_price: Option<f64>,
    #[arg(long)]
    surcharge_price: Option<f64>,
    #[arg(long, value_enum)]
    credit_valuation: Option<CreditArg>,
    /// Timesteps per billing period.
    #[arg(long)]
    billing_period: Option<usize>,
    #[arg(long)]
    profile_household: Option<usize>,
    #[arg(long)]
    profile_day: Option<usize>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Also write per-timestep load reports for every DPNCT trial.
    #[arg(long)]
    load_reports: bool,
    /// Also write bill statements for every trial.
    #[arg(long)]
    bills: bool,
}

impl SimulateArgs {
    fn into_config(self) -> Result<SimulationConfig> {
        let mut c = match &self.config {
            Some(path) => SimulationConfig::from_file(path)?,
            None => SimulationConfig::default(),
        };
        if let Some(v) = self.epsilon {
            c.epsilon = v;
        }
        if let Some(v) = self.schemes {
            c.schemes = v.into_iter().map(Into::into).collect();
        }
        if self.no_drdp {
            c.include_drdp = false;
        }
        if let Some(v) = self.households {
            c.households = v;
        }
        if let Some(v) = self.days {
            c.days = v;
        }
        if let Some(v) = self.groups {
            c.groups = v;
        }
        if let Some(v) = self.seeds {
            c.seeds = v;
        }
        if let Some(n) = self.trials {
            c.seeds = (0..n).collect();
        }
        if let Some(v) = self.data_seed {
            c.data_seed = v;
        }
        if let Some(v) = self.input {
            c.input_csv = Some(v);
        }
        if let Some(v) = self.budget_mode {
            c.budget_mode = match v {
                BudgetArg::PerReading => BudgetMode::PerReading,
                BudgetArg::Composed => BudgetMode::Composed,
            };
        }
        if let Some(v) = self.noise_report {
            c.noise_report = match v {
                NoiseReportArg::Net => NoiseReportMode::Net,
                NoiseReportArg::LiteralAlg2 => NoiseReportMode::LiteralAlg2,
            };
        }
        if let Some(v) = self.drdp_noise {
            c.drdp_noise = match v {
                DrdpNoiseArg::Distributed => DrdpNoise::Distributed,
                DrdpNoiseArg::Laplace => DrdpNoise::Laplace,
            };
        }
        if let Some(v) = self.residual_basis {
            c.residual_basis = match v {
                ResidualArg::PeriodNetNoise => ResidualBasis::PeriodNetNoise,
                ResidualArg::FinalWindowInjected => ResidualBasis::FinalWindowInjected,
            };
        }
        if let Some(v) = self.max_units {
            c.tariff.max_allowed_units = v;
        }
        if let Some(v) = self.unit_price {
            c.tariff.unit_price = v;
        }
        if let Some(v) = self.surcharge_price {
            c.tariff.surcharge_price = v;
        }
        if let Some(v) = self.credit_valuation {
            c.tariff.credit_valuation = match v {
                CreditArg::SurchargePremium => CreditValuation::SurchargePremium,
                CreditArg::SurchargePrice => CreditValuation::SurchargePrice,
            };
        }
        if let Some(v) = self.billing_period {
            c.billing_period_timesteps = v;
        }
        if let Some(v) = self.profile_household {
            c.profile_household = v;
        }
        if let Some(v) = self.profile_day {
            c.profile_day = Some(v);
        }
        if let Some(v) = self.out {
            c.output_dir = v;
        }
        c.write_load_reports |= self.load_reports;
        c.write_bills |= self.bills;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 200)]
    households: usize,
    #[arg(long, default_value_t = 30)]
    days: usize,
    #[arg(long, default_value_t = 2021)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Results CSVs (`scheme,seed,metric,value`).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write the summary as CSV instead of a table on stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let config = args.into_config()?;
    let output = run_scenario(&config)?;
    log::info!(
        "sensitivity {:.6} kWh, lambda {:.6} kWh",
        output.run.sensitivity,
        output.run.scale.lambda()
    );
    let mut stdout = io::stdout().lock();
    for s in output.run.summaries() {
        writeln!(
            stdout,
            "{:<14} trials={:<3} mae_total={:.6} mae_bill={:.6} |r|={:.4}",
            s.scheme.to_string(),
            s.trials,
            s.mae_total_consumption.mean,
            s.mae_bill.mean,
            s.abs_correlation.mean
        )?;
    }
    for path in &output.files {
        writeln!(stdout, "wrote {}", path.display())?;
    }
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let dataset = generate_synthetic(args.households, args.days, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    write_dataset_file(&dataset, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} households x {} timesteps to {}",
        dataset.households(),
        dataset.timesteps(),
        args.out.display()
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.inputs {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        rows.extend(read_results_csv(file).with_context(|| format!("reading {}", path.display()))?);
    }
    if rows.is_empty() {
        bail!("no result rows found");
    }
    let summaries = summarize_rows(rows.iter().map(|r| (r.scheme.as_str(), r.metric.as_str(), r.value)));
    match &args.out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_summary_csv(&summaries, BufWriter::new(file))?;
        }
        None => {
            let mut stdout = io::stdout().lock();
            writeln!(
                stdout,
                "{:<14} {:<30} {:>6} {:>14} {:>14}",
                "scheme", "metric", "trials", "mean", "std_dev"
            )?;
            for s in &summaries {
                writeln!(
                    stdout,
                    "{:<14} {:<30} {:>6} {:>14.6} {:>14.6}",
                    s.scheme, s.metric, s.trials, s.summary.mean, s.summary.std_dev
                )?;
            }
        }
    }
    Ok(())
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.downcast_ref::<io::Error>()
        .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => simulate(*args),
        Command::Generate(args) => generate(args),
        Command::Report(args) => report(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if is_broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
