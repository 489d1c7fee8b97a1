mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "zonefuse", version, about = "Particle-filter localization and zone classification from BLE RSSI")]
struct Cli {
    /// Master seed; defaults depend on the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a six-run dataset.
    Simulate(SimulateArgs),
    /// Run the particle filter over one measurement file.
    Localize(LocalizeArgs),
    /// Leave-three-of-six sweep over classifiers, scalers, features and memory.
    Evaluate(EvaluateArgs),
    /// Fit one pipeline on chosen runs and save it as JSON.
    Train(TrainArgs),
    /// Label a measurement file with a saved pipeline.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct ScenarioArg {
    /// Scenario JSON; the built-in default scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PatternArg {
    Directional,
    Omni,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CalibrationArg {
    None,
    PerRun,
    Global,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    #[arg(long)]
    measurements: PathBuf,
    /// Ground-truth CSV; enables the error summary.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "directional")]
    pattern: PatternArg,
    #[arg(long, default_value_t = 20)]
    burn_in: usize,
    /// Re-estimate reference power and floor from this series.
    #[arg(long)]
    calibrate: bool,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_algorithm)]
    classifier: Vec<zonefuse::Algorithm>,
    #[arg(long, value_delimiter = ',', value_parser = parse_scaler)]
    scaler: Vec<zonefuse::ScalerKind>,
    #[arg(long, value_delimiter = ',', value_parser = parse_features)]
    features: Vec<zonefuse::FeatureSet>,
    #[arg(long, value_delimiter = ',')]
    memory: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_source)]
    source: Vec<zonefuse::Source>,
    /// Add the robust scaler to the default scaler list.
    #[arg(long)]
    robust: bool,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Keep every k-th windowed training row.
    #[arg(long, default_value_t = 4)]
    train_stride: usize,
    /// Fit the scaler on windowed rows instead of per-tick features.
    #[arg(long)]
    scale_after_window: bool,
    /// Use the position standard deviation instead of the variance.
    #[arg(long)]
    std_dev: bool,
    #[arg(long, value_enum, default_value = "none")]
    calibrate: CalibrationArg,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Directory written by `simulate`.
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Write per-cell prediction timelines.
    #[arg(long)]
    dump_predictions: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    #[arg(long)]
    dataset: PathBuf,
    /// Training run ids.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    runs: Vec<usize>,
    #[arg(long, value_parser = parse_algorithm, default_value = "svm")]
    classifier: zonefuse::Algorithm,
    #[arg(long, value_parser = parse_scaler, default_value = "power")]
    scaler: zonefuse::ScalerKind,
    #[arg(long, value_parser = parse_features, default_value = "pos_var_vel")]
    features: zonefuse::FeatureSet,
    #[arg(long, default_value_t = 16)]
    memory: usize,
    #[arg(long, value_parser = parse_source, default_value = "filtered")]
    source: zonefuse::Source,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Pipeline JSON written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    measurements: PathBuf,
    /// Ground-truth CSV; enables the accuracy summary.
    #[arg(long)]
    truth: Option<PathBuf>,
}

fn parse_algorithm(s: &str) -> Result<zonefuse::Algorithm, String> {
    zonefuse::Algorithm::parse(s).ok_or_else(|| format!("unknown classifier `{s}` (knn, rf, svm)"))
}

fn parse_scaler(s: &str) -> Result<zonefuse::ScalerKind, String> {
    zonefuse::ScalerKind::parse(s).ok_or_else(|| format!("unknown scaler `{s}` (standard, robust, power)"))
}

fn parse_features(s: &str) -> Result<zonefuse::FeatureSet, String> {
    zonefuse::FeatureSet::parse(s).ok_or_else(|| format!("unknown feature set `{s}` (pos, pos_var, pos_var_vel)"))
}

fn parse_source(s: &str) -> Result<zonefuse::Source, String> {
    zonefuse::Source::parse(s).ok_or_else(|| format!("unknown source `{s}` (filtered, raw)"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }

    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
