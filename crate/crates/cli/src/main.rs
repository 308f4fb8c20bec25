use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use labelmp::eval::{extract_dataset_features, features_to_text};
use labelmp::training::EpochLog;
use labelmp::{
    evaluate, generate_synthetic, grad_check, load_dataset, train_with_log, Dataset, Error, FeatureLayout,
    ModelConfig, ModelFile, Schedule, SynthSpec,
};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "labelmp", version, about = "Message-passing refinement of scene, action and pose scores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset
    Generate(GenerateArgs),
    /// Train a network with the two-phase stepwise schedule
    Train(TrainArgs),
    /// Report accuracies and optionally export features
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Model config (key=value file)
    #[arg(long)]
    config: PathBuf,
    /// RNG seed; defaults to the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    /// Smallest number of real persons per frame
    #[arg(long, default_value_t = 1)]
    persons_min: usize,
    /// Largest number of real persons per frame; defaults to max_persons
    #[arg(long)]
    persons_max: Option<usize>,
    /// Standard deviation of the logit noise
    #[arg(long, default_value_t = 0.5)]
    noise_sigma: f64,
    /// 0 = labels independent of the scene, 1 = full table dependency
    #[arg(long, default_value_t = 1.0)]
    dependency_strength: f64,
    /// Probability of the scene's preferred action
    #[arg(long, default_value_t = 0.7)]
    peak: f64,
    /// Height of the true-label logit
    #[arg(long, default_value_t = 1.0)]
    logit_scale: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Training dataset
    #[arg(long)]
    data: PathBuf,
    /// Output model path
    #[arg(long)]
    model_out: PathBuf,
    /// Training log (TSV); printed to stdout when omitted
    #[arg(long)]
    log: Option<PathBuf>,
    /// Frames whose gradients are summed per update
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
#[value(rename_all = "lowercase")]
enum Layout {
    Scores,
    Factors,
    Both,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained model
    #[arg(long)]
    model: PathBuf,
    /// Evaluation dataset
    #[arg(long)]
    data: PathBuf,
    /// Optional config; its dimensions must match the model's
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print one line per message-passing step
    #[arg(long)]
    per_step: bool,
    /// Write MPFV1 features to this path
    #[arg(long)]
    export_features: Option<PathBuf>,
    /// Step whose activations are exported (1-based); defaults to the last
    #[arg(long)]
    step: Option<usize>,
    #[arg(long, value_enum, default_value_t = Layout::Both)]
    layout: Layout,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step
    #[arg(long, default_value_t = labelmp::gradcheck::DEFAULT_EPSILON)]
    eps: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = labelmp::gradcheck::DEFAULT_TOLERANCE)]
    tol: f64,
    /// Random frames to check
    #[arg(long, default_value_t = 3)]
    trials: usize,
}

enum Failure {
    Usage(String),
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure::Check(format!("{}: {e}", path.display()))
}

/// Prints without panicking when stdout is a closed pipe.
fn stdout(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let cfg = ModelConfig::load(&args.config)?;
    let mut spec = SynthSpec::peaked(&cfg, args.instances, args.peak);
    spec.persons_range = (args.persons_min, args.persons_max.unwrap_or(cfg.max_persons));
    spec.noise_sigma = args.noise_sigma;
    spec.dependency_strength = args.dependency_strength;
    spec.logit_scale = args.logit_scale;
    let ds: Dataset<f64> = generate_synthetic(&spec, &cfg, args.seed.unwrap_or(cfg.rng_seed))?;
    ds.save(&args.out)?;
    eprintln!("wrote {} frames to {}", ds.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = ModelConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    if args.batch_size == 0 {
        return Err(Failure::Usage("batch size must be ≥ 1".into()));
    }
    let ds: Dataset<f64> = load_dataset(&args.data, &cfg)?;
    let mut schedule = Schedule::from_config(&cfg);
    schedule.batch_size = args.batch_size;

    let mut sink: Box<dyn Write> = match &args.log {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(|e| io_error(path, e))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut write_failed = None;
    let mut emit = |line: &str| {
        if write_failed.is_none() {
            if let Err(e) = writeln!(sink, "{line}") {
                write_failed = Some(e);
            }
        }
    };
    emit(EpochLog::TSV_HEADER);
    let state = train_with_log(&ds, &cfg, &schedule, |log| emit(&log.to_string()))?;
    ModelFile::new(cfg, state.params).save(&args.model_out)?;
    match write_failed.or_else(|| sink.flush().err()) {
        Some(e) if args.log.is_some() => Err(Failure::Check(format!("writing training log: {e}"))),
        _ => Ok(()),
    }
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let model = ModelFile::<f64>::load(&args.model)?;
    let cfg = model.config;
    if let Some(path) = &args.config {
        let given = ModelConfig::load(path)?;
        if given.fingerprint() != cfg.fingerprint() {
            return Err(Error::Fingerprint(given.fingerprint(), cfg.fingerprint()).into());
        }
    }
    let ds: Dataset<f64> = load_dataset(&args.data, &cfg)?;
    let report = evaluate(&ds, &model.params, &cfg)?;
    stdout(&report.to_tsv(args.per_step));

    if let Some(path) = &args.export_features {
        let step = args.step.unwrap_or(model.params.num_steps());
        let layout = match args.layout {
            Layout::Scores => FeatureLayout {
                scores: true,
                factors: false,
            },
            Layout::Factors => FeatureLayout {
                scores: false,
                factors: true,
            },
            Layout::Both => FeatureLayout::default(),
        };
        let rows = extract_dataset_features(&ds, &model.params, &cfg, step, layout)?;
        let text = features_to_text(&rows, layout.dim(&cfg), step);
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        std::fs::write(&tmp, text).map_err(|e| io_error(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))?;
    } else if args.step.is_some() {
        return Err(Failure::Usage("--step requires --export-features".into()));
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    if args.trials == 0 {
        return Err(Failure::Usage("trials must be ≥ 1".into()));
    }
    if !(args.eps > 0.0 && args.eps.is_finite()) {
        return Err(Failure::Usage(format!("eps must be a positive number, got {}", args.eps)));
    }
    let cfg = ModelConfig::load(&args.config)?;
    let report = grad_check(&cfg, args.tol, args.eps, args.trials, args.seed)?;
    stdout(&report.to_string());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} of {} coordinates exceed tolerance {:e}",
            report.failures.len(),
            report.checked,
            args.tol
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NonFinite { .. } => EXIT_NUMERIC,
                _ => EXIT_VALIDATION,
            })
        }
    }
}
