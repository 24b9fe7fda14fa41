use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtunet_core::checkpoint;
use mtunet_core::data::{self, SynthConfig};
use mtunet_core::loss::SchemeKind;
use mtunet_lab::ablate;
use mtunet_lab::config::TrainConfig;
use mtunet_lab::evaluate;
use mtunet_lab::sigma_lab::{self, SigmaLabConfig, Task};
use mtunet_lab::train::{self, split_for};
use mtunet_lab::LabError;
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "mtunet", version, about = "Multi-task saliency/classification lab")]
struct Cli {
    /// Flat JSON config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for sigma-lab).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    Generate(GenerateArgs),
    /// Train one network and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train every ablation arm over several seeds.
    Ablate(AblateArgs),
    /// Trace σ under a scripted loss schedule.
    SigmaLab(SigmaLabArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_reductions: Option<usize>,
    /// Any other config key, as KEY=JSON.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Print one JSON line per epoch to stderr.
    #[arg(long)]
    progress: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct SigmaLabArgs {
    /// Phases as LOSS:STEPS, comma separated.
    #[arg(long)]
    schedule: String,
    #[arg(long, default_value_t = 1.0)]
    sigma0: f64,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long, default_value = "MTLS1")]
    scheme: String,
    /// s (saliency) or c (classification).
    #[arg(long, default_value = "s")]
    task: String,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": {"kind": e.kind(), "message": e.to_string()}})
            );
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::Generate(args) => generate(cli.config.as_deref(), cli.seed, cli.out, args),
        Command::Train(args) => {
            let config = train_config(&cli.config, cli.seed, cli.out, &args.overrides)?;
            let progress = args.progress;
            let outcome = train::cmd_train(&config, |row| {
                if progress {
                    eprintln!("{}", serde_json::to_string(row).expect("row serializes"));
                }
            })?;
            let record = outcome.test.record("test", config.model.num_classes);
            let metrics: Map<String, Value> = record.values.into_iter().map(|(k, v)| (k, json!(v))).collect();
            println!(
                "{}",
                json!({"best_epoch": outcome.best_epoch, "epochs": outcome.log.rows.len(), "test": metrics})
            );
            Ok(())
        }
        Command::Eval(args) => eval(cli.out, args),
        Command::Ablate(args) => {
            let config = train_config(&cli.config, cli.seed, None, &args.overrides)?;
            let out = cli
                .out
                .ok_or_else(|| LabError::Config("--out is required".into()))?;
            let path = config
                .dataset
                .as_deref()
                .ok_or_else(|| LabError::Config("dataset path is required".into()))?;
            let dataset = data::load(path)?;
            let seeds: Vec<u64> = (config.seed..config.seed + args.seeds).collect();
            let ablation = ablate::cmd_ablate(&config, &dataset, &seeds, &out)?;
            print!("{}", ablation.table_csv()?);
            Ok(())
        }
        Command::SigmaLab(args) => {
            let config = SigmaLabConfig {
                phases: sigma_lab::parse_schedule(&args.schedule)?,
                sigma0: args.sigma0,
                step: args.step,
                scheme: args.scheme.parse::<SchemeKind>()?,
                task: args.task.parse::<Task>()?,
                lr: args.lr,
            };
            let csv = sigma_lab::to_csv(&sigma_lab::sigma_lab(&config)?)?;
            match cli.out {
                Some(path) => write_file(&path, &csv),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), LabError> {
    std::fs::write(path, text).map_err(|source| LabError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json_object(path: &Path) -> Result<Value, LabError> {
    let text = std::fs::read_to_string(path).map_err(|source| LabError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}

fn generate(
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    args: GenerateArgs,
) -> Result<(), LabError> {
    let mut synth = match config {
        Some(p) => serde_json::from_value::<SynthConfig>(read_json_object(p)?)
            .map_err(|e| LabError::Config(e.to_string()))?,
        None => SynthConfig::default(),
    };
    if let Some(v) = seed {
        synth.seed = v;
    }
    if let Some(v) = args.samples_per_class {
        synth.samples_per_class = v;
    }
    if let Some(v) = args.height {
        synth.height = v;
    }
    if let Some(v) = args.width {
        synth.width = v;
    }
    if let Some(v) = args.num_classes {
        synth.num_classes = v;
    }
    if let Some(v) = args.noise {
        synth.noise = v;
    }
    let out = out.ok_or_else(|| LabError::Config("--out is required".into()))?;
    let dataset = data::generate(&synth)?;
    data::save(&dataset, &out)?;
    println!("{}", json!({"samples": dataset.len(), "out": out}));
    Ok(())
}

fn train_config(
    file: &Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    o: &TrainOverrides,
) -> Result<TrainConfig, LabError> {
    let mut m = Map::new();
    let mut put = |k: &str, v: Value| {
        m.insert(k.to_string(), v);
    };
    if let Some(v) = seed {
        put("seed", json!(v));
    }
    if let Some(v) = out {
        put("out", json!(v));
    }
    if let Some(v) = &o.dataset {
        put("dataset", json!(v));
    }
    if let Some(v) = &o.scheme {
        put("scheme", json!(v.to_ascii_uppercase()));
    }
    if let Some(v) = &o.variant {
        put("variant", json!(v.to_ascii_uppercase()));
    }
    if let Some(v) = o.lr {
        put("lr", json!(v));
    }
    if let Some(v) = o.patience {
        put("patience", json!(v));
    }
    if let Some(v) = o.batch_size {
        put("batch_size", json!(v));
    }
    if let Some(v) = o.max_epochs {
        put("max_epochs", json!(v));
    }
    if let Some(v) = o.max_reductions {
        put("max_reductions", json!(v));
    }
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        put(k, value);
    }
    match file {
        Some(p) => TrainConfig::from_file(p, m),
        None => TrainConfig::from_layers(None, m),
    }
}

fn eval(out: Option<PathBuf>, args: EvalArgs) -> Result<(), LabError> {
    let saved = checkpoint::load(&args.checkpoint)?;
    let dataset = data::load(&args.dataset)?;
    let config = TrainConfig {
        model: saved.model.config().clone(),
        split_seed: args.split_seed,
        ..TrainConfig::default()
    };
    train::check_dataset(&config, &dataset)?;
    let split = split_for(&config, &dataset)?;
    let indices = match args.split.as_str() {
        "train" => split.train,
        "val" => split.val,
        "test" => split.test,
        "all" => (0..dataset.len()).collect(),
        other => return Err(LabError::Config(format!("unknown split {other:?}"))),
    };
    let report = evaluate::evaluate(&saved.model, &saved.sigmas, saved.scheme, &dataset, &indices)?;
    let record = report.record(args.split.as_str(), dataset.num_classes);
    let out = out.unwrap_or_else(|| PathBuf::from("metrics.csv"));
    evaluate::write_records(&out, &[record])?;
    println!("{}", json!({"samples": indices.len(), "out": out}));
    Ok(())
}
