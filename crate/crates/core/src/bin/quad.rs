use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use quad::baselines::RankingKind;
use quad::calibration::{FitConfig, VarianceModel};
use quad::cli::{
    cmd_evaluate, cmd_fit, cmd_score, cmd_simulate, cmd_sweep, cmd_validate, join_reports,
    DataFormat, EvaluateCommand, FitCommand, ScoreCommand, SimulateConfig, SweepCommand,
    DEFAULT_SWEEP_GRID, RUN_SCHEMA_VERSION,
};
use quad::io::IngestOptions;
use quad::sim::SimConfig;
use quad::{Error, Result};

/// Quality-aware fusion of detector scores over near-duplicate images.
#[derive(Parser)]
#[command(name = "quad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic degradation-tree dataset.
    Simulate(SimulateArgs),
    /// Fit the calibration model on a seeded development split.
    Fit(FitArgs),
    /// Fused score and decision per source.
    Score(ScoreArgs),
    /// Compare baselines and QuAD in a bAcc / NLL table.
    Evaluate(EvaluateArgs),
    /// Accuracy as a function of how many instances are available.
    Sweep(SweepArgs),
    /// Check a dataset file against the schema.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Disable all ingest filters.
    #[arg(long)]
    no_filters: bool,
    /// Minimum shorter image side in pixels.
    #[arg(long, default_value_t = 256)]
    min_short_side: u32,
    /// Minimum instances per source.
    #[arg(long, default_value_t = 10)]
    min_instances: usize,
}

impl IngestArgs {
    fn options(&self) -> IngestOptions {
        if self.no_filters {
            IngestOptions::no_filters()
        } else {
            IngestOptions {
                min_short_side: Some(self.min_short_side),
                dedup_checksum: true,
                min_instances: self.min_instances,
            }
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON simulator config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_real: Option<usize>,
    #[arg(long)]
    n_fake: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Skip writing per-source tree manifests.
    #[arg(long)]
    no_manifests: bool,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of sources used for fitting.
    #[arg(long, default_value_t = 0.5)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 2 adds a quadratic term to the class means.
    #[arg(long, default_value_t = 1)]
    model_order: u8,
    /// Fit quality-independent variances.
    #[arg(long)]
    constant_variance: bool,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "join")]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output path stem; writes `.json` and `.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Column name for this report.
    #[arg(long)]
    detector: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 10, 20])]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = ["qf".to_string(), "size".into(), "date".into(), "iqa".into()])]
    strategies: Vec<String>,
    /// Seeds averaged for the random row.
    #[arg(long, default_value_t = 10)]
    random_repeats: usize,
    /// Add leave-one-out QuAD* rows (one fit per source).
    #[arg(long)]
    loo: bool,
    /// Also evaluate the model's development sources.
    #[arg(long)]
    include_dev: bool,
    /// Render existing report JSON files side by side instead of evaluating.
    #[arg(long, num_args = 1..)]
    join: Vec<PathBuf>,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_GRID)]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    include_dev: bool,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    ingest: IngestArgs,
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(a) => {
            let mut sim: SimConfig = match &a.config {
                Some(p) => {
                    serde_json::from_str(&std::fs::read_to_string(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?)?
                }
                None => SimConfig::default(),
            };
            sim.n_real = a.n_real.unwrap_or(sim.n_real);
            sim.n_fake = a.n_fake.unwrap_or(sim.n_fake);
            sim.seed = a.seed.unwrap_or(sim.seed);
            let cfg = SimulateConfig {
                schema_version: RUN_SCHEMA_VERSION.into(),
                sim,
                out_dir: a.out,
                format: match a.format {
                    Format::Csv => DataFormat::Csv,
                    Format::Json => DataFormat::Json,
                },
                manifests: !a.no_manifests,
            };
            let s = cmd_simulate(&cfg)?;
            println!(
                "simulated {} sources, {} instances -> {} (config {})",
                s.sources,
                s.instances,
                s.dataset_path.display(),
                &s.config_digest[..12]
            );
        }
        Command::Fit(a) => {
            let cmd = FitCommand {
                schema_version: RUN_SCHEMA_VERSION.into(),
                data: a.data,
                out: a.out,
                split: a.split,
                seed: a.seed,
                fit: FitConfig {
                    model_order: a.model_order,
                    variance: if a.constant_variance {
                        VarianceModel::Constant
                    } else {
                        VarianceModel::LogLinear
                    },
                    ..FitConfig::default()
                },
                ingest: a.ingest.options(),
            };
            let m = cmd_fit(&cmd)?;
            println!("{}", serde_json::to_string_pretty(&m.fit_meta.real)?);
            println!("{}", serde_json::to_string_pretty(&m.fit_meta.fake)?);
            println!(
                "fitted on {} dev sources -> {}",
                m.fit_meta.dev_sources.len(),
                cmd.out.display()
            );
        }
        Command::Score(a) => {
            let cmd = ScoreCommand {
                schema_version: RUN_SCHEMA_VERSION.into(),
                data: a.data,
                model: a.model,
                out: a.out,
                ingest: a.ingest.options(),
            };
            let scores = cmd_score(&cmd)?;
            println!("scored {} sources -> {}", scores.len(), cmd.out.display());
        }
        Command::Evaluate(a) => {
            if !a.join.is_empty() {
                let table = join_reports(&a.join)?;
                match &a.out {
                    Some(out) => std::fs::write(out, &table).map_err(|e| Error::Io {
                        path: out.clone(),
                        source: e,
                    })?,
                    None => print!("{table}"),
                }
                return Ok(ExitCode::SUCCESS);
            }
            let mut cmd = EvaluateCommand::new(a.data.expect("required by clap"));
            cmd.model = a.model;
            cmd.out = a.out;
            cmd.detector = a.detector;
            cmd.seed = a.seed;
            cmd.k_values = a.k;
            cmd.strategies = a
                .strategies
                .iter()
                .map(|s| s.parse())
                .collect::<Result<Vec<RankingKind>>>()?;
            cmd.random_repeats = a.random_repeats;
            cmd.loo = a.loo;
            cmd.include_dev = a.include_dev;
            cmd.ingest = a.ingest.options();
            let outcome = cmd_evaluate(&cmd)?;
            print!("{}", outcome.report.to_table());
            for n in &outcome.report.notes {
                println!("# {n}");
            }
            println!("# config {}", outcome.report.config_digest);
        }
        Command::Sweep(a) => {
            let cmd = SweepCommand {
                schema_version: RUN_SCHEMA_VERSION.into(),
                data: a.data,
                model: a.model,
                out: a.out,
                grid: a.grid,
                seed: a.seed,
                include_dev: a.include_dev,
                ingest: a.ingest.options(),
            };
            let report = cmd_sweep(&cmd)?;
            print!("{}", report.to_table());
        }
        Command::Validate(a) => {
            let summary = cmd_validate(&a.data, &a.ingest.options())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if !summary.is_valid() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
