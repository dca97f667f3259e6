//! Command-line front end: `tune`, `run` and `oracle-check`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rmlmc::harness::{
    self, DistFile, DistSource, ExperimentConfig, FamilyToken, ModelToken, ReportFormat,
    SchemeToken,
};
use rmlmc::level_diff::{catalog_entry, SdeSampler};
use rmlmc::tune;

#[derive(Parser)]
#[command(
    name = "rmlmc",
    version,
    about = "Randomized multilevel Monte Carlo estimators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a pilot and write the tuned level distribution to a file.
    Tune(TuneArgs),
    /// Run a replication experiment and report estimates and IREs.
    Run(RunArgs),
    /// Run the analytic-oracle invariant suite; exits non-zero on violation.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TuneArgs {
    /// Model token: gbm | cir | heston | modgbm.
    #[arg(long)]
    model: ModelToken,
    /// Estimator family the distribution is tuned for.
    #[arg(long, default_value = "single")]
    family: FamilyToken,
    /// Number of pilot levels.
    #[arg(long, default_value_t = 8)]
    max_level: u32,
    /// Pilot samples per level.
    #[arg(long, default_value_t = 10_000)]
    pilot: u64,
    /// Geometric tail rate; omit the tail with --no-tail.
    #[arg(long, default_value_t = 1.5)]
    gamma: f64,
    #[arg(long, default_value_t = false)]
    no_tail: bool,
    /// Reference level for coupled-sum variance proxies.
    #[arg(long, default_value_t = 13)]
    ref_level: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the distribution file (TOML).
    #[arg(long, default_value = "dist.toml")]
    out: PathBuf,
    /// Also write the pilot table as CSV.
    #[arg(long)]
    pilot_out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Config file (TOML) mirroring the experiment configuration; when
    /// given, all other flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model token: gbm | cir | heston | modgbm | det.
    #[arg(long, required_unless_present = "config")]
    model: Option<ModelToken>,
    /// Estimator families (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "single")]
    family: Vec<FamilyToken>,
    /// Schemes: iid | str | sys | res | mlmc | poisson | hybrid | cond-res.
    #[arg(long, value_delimiter = ',', default_value = "str")]
    scheme: Vec<SchemeToken>,
    /// Values of n (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "1000")]
    n: Vec<u64>,
    #[arg(long, default_value_t = 1000)]
    reps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Distribution file written by `tune`; defaults to tuning on the fly.
    #[arg(long)]
    dist: Option<PathBuf>,
    /// Worker threads; defaults to rayon's choice (RAYON_NUM_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the reference value used for IREs.
    #[arg(long)]
    truth: Option<f64>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: ReportFormatArg,
    /// Zero the wall-clock column for byte-reproducible output.
    #[arg(long, default_value_t = false)]
    canonical: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ReportFormatArg {
    Csv,
    Json,
}

impl From<ReportFormatArg> for ReportFormat {
    fn from(value: ReportFormatArg) -> Self {
        match value {
            ReportFormatArg::Csv => ReportFormat::Csv,
            ReportFormatArg::Json => ReportFormat::Json,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tune(args) => run_tune(args),
        Command::Run(args) => run_run(args),
        Command::OracleCheck { seed } => return run_oracle_check(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn run_tune(args: TuneArgs) -> Result<(), String> {
    if args.model == ModelToken::Det {
        return Err("the deterministic chain has zero variance; nothing to tune".into());
    }
    let entry = catalog_entry(args.model.token()).ok_or("unknown model")?;
    let sampler = SdeSampler::new(entry.model);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let needs_ref = args.family == FamilyToken::CoupledSum;
    let pilot = tune::run_pilot(
        &sampler,
        args.max_level,
        args.pilot,
        needs_ref.then_some(args.ref_level),
        &mut rng,
    );
    if let Some(path) = &args.pilot_out {
        let file = std::fs::File::create(path).map_err(|e| e.to_string())?;
        pilot.write_csv(file).map_err(|e| e.to_string())?;
    }
    let gamma = (!args.no_tail).then_some(args.gamma);
    let file = match args.family {
        FamilyToken::Single => DistFile::new(
            &tune::optimal_single_term(&pilot, gamma).map_err(|e| e.to_string())?,
            None,
        ),
        FamilyToken::IndependentSum => DistFile::new(
            &tune::optimal_independent_sum(&pilot, gamma).map_err(|e| e.to_string())?,
            None,
        ),
        FamilyToken::CoupledSum => {
            let plan =
                tune::optimal_coupled_sum(&pilot, pilot.levels.len()).map_err(|e| e.to_string())?;
            println!(
                "subsequence {:?}, objective {:.6e}",
                plan.levels, plan.objective
            );
            DistFile::new(&plan.dist, Some(plan.levels))
        }
    };
    let text = toml::to_string_pretty(&file).map_err(|e| e.to_string())?;
    std::fs::write(&args.out, text).map_err(|e| e.to_string())?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_run(args: RunArgs) -> Result<(), String> {
    let config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
            toml::from_str::<ExperimentConfig>(&text).map_err(|e| e.to_string())?
        }
        None => ExperimentConfig {
            model: args.model.expect("clap enforces --model without --config"),
            families: args.family.clone(),
            schemes: args.scheme.clone(),
            ns: args.n.clone(),
            replications: args.reps,
            seed: args.seed,
            dist: match &args.dist {
                Some(path) => DistSource::File {
                    path: path.display().to_string(),
                },
                None => DistSource::Default,
            },
            threads: args.threads,
            truth_override: args.truth,
        },
    };
    let report = harness::run_experiment(&config).map_err(|e| e.to_string())?;
    let report = if args.canonical {
        report.canonical()
    } else {
        report
    };
    let format = ReportFormat::from(args.format);
    match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| e.to_string())?;
            harness::emit_report(&report, format, file).map_err(|e| e.to_string())?;
            println!("wrote {}", path.display());
        }
        None => {
            let mut buf = Vec::new();
            harness::emit_report(&report, format, &mut buf).map_err(|e| e.to_string())?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
    }
    Ok(())
}

fn run_oracle_check(seed: u64) -> ExitCode {
    let checks = harness::oracle_check(seed);
    let mut all_passed = true;
    for check in &checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} {name}: {detail}",
            name = check.name,
            detail = check.detail
        );
        all_passed &= check.passed;
    }
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
