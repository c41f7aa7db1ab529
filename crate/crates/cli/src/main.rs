use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use nmrpm::model::{ModelConfig, VarModel, Variant};
use nmrpm::rpm::{self, Configuration, GeneratorOptions, RpmItem};
use nmrpm::train::{self, EvalReport, TrainConfig, TrainError};
use nmrpm::verify::{self, CheckOutcome};

#[derive(Parser, Debug)]
#[command(
    name = "nmrpm",
    version,
    about = "Generate matrix-reasoning datasets, train and evaluate the multi-path model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset file with its attribute sidecar
    Generate(GenerateArgs),
    /// Split a dataset 60/20/20, train, and keep the best-validation checkpoint
    Train(TrainArgs),
    /// Score a checkpoint on a dataset
    Eval(EvalArgs),
    /// Run a property suite
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    /// Configuration name, a comma-separated list, or "shipped"
    #[arg(long, default_value = "center")]
    config: String,
    #[arg(long, default_value_t = 1000)]
    items: usize,
    #[arg(long, default_value_t = 32)]
    panel_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = RuleSet::All)]
    rules: RuleSet,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RuleSet {
    /// Every rule over every attribute
    All,
    /// Constant, progression and distribute-three over type, size and color
    NoArithmetic,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, default_value = "nonmono")]
    variant: String,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_items: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 7.0)]
    pos_weight: f64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Training is single-threaded; accepted for a uniform interface
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for the report CSV and manifest; defaults to the checkpoint's
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    /// gradcheck, shapes, nonmono, oracle or all
    #[arg(long, default_value = "all")]
    suite: String,
    /// Items per shipped configuration for the oracle suite
    #[arg(long, default_value_t = 1000)]
    oracle_items: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for a report and manifest
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// A usage or validation problem; exits with code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Serialize)]
struct Manifest<'a, A: Serialize> {
    command: &'static str,
    flags: &'a A,
    seeds: Vec<u64>,
    dataset_sha256: Vec<(String, String)>,
    code_version: &'static str,
    started_unix: f64,
    finished_unix: f64,
    outputs: Vec<String>,
    results: serde_json::Value,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    }))
}

#[allow(clippy::too_many_arguments)]
fn write_manifest<A: Serialize>(
    path: &Path,
    command: &'static str,
    flags: &A,
    seeds: Vec<u64>,
    datasets: &[&Path],
    started: f64,
    outputs: &[&Path],
    results: serde_json::Value,
) -> Result<()> {
    let dataset_sha256 = datasets
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        command,
        flags,
        seeds,
        dataset_sha256,
        code_version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        finished_unix: now(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        results,
    };
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn parse_configs(spec: &str) -> Result<Vec<Configuration>> {
    if spec == "shipped" {
        return Ok(Configuration::SHIPPED.to_vec());
    }
    if spec == "all" {
        return Ok(Configuration::ALL.to_vec());
    }
    spec.split(',')
        .map(|name| {
            name.trim().parse::<Configuration>().map_err(|_| {
                let valid: Vec<&str> = Configuration::ALL.iter().map(|c| c.name()).collect();
                usage(format!(
                    "unknown configuration {name:?}; valid names: {}, shipped, all",
                    valid.join(", ")
                ))
            })
        })
        .collect()
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let started = now();
    let configs = parse_configs(&args.config)?;
    if args.panel_size < 16 || args.panel_size > u16::MAX as usize {
        return Err(usage(format!(
            "--panel-size must be between 16 and 65535, got {}",
            args.panel_size
        )));
    }
    if args.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let options = match args.rules {
        RuleSet::All => GeneratorOptions::default(),
        RuleSet::NoArithmetic => GeneratorOptions::no_arithmetic(),
    };
    let items =
        rpm::generate_dataset_parallel(&configs, args.items, args.seed, args.panel_size, &options, args.threads)?;
    let mut passed = 0usize;
    for item in &items {
        passed += rpm::oracle_check(item)?.well_formed as usize;
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    rpm::write_dataset(&items, &args.out)?;
    let rate = if items.is_empty() {
        100.0
    } else {
        100.0 * passed as f64 / items.len() as f64
    };
    println!("items {}", items.len());
    println!("oracle pass rate {rate:.1}");
    let meta = rpm::sidecar_path(&args.out);
    let manifest = args.out.with_extension("manifest.json");
    let mut outputs = vec![args.out.as_path()];
    if meta.exists() {
        outputs.push(&meta);
    }
    write_manifest(
        &manifest,
        "generate",
        args,
        vec![args.seed],
        &[],
        started,
        &outputs,
        serde_json::json!({ "items": items.len(), "oracle_pass_rate": rate, "dataset_sha256": sha256_file(&args.out)? }),
    )
}

fn load_items(path: &Path) -> Result<Vec<RpmItem>> {
    rpm::read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn model_config(preset: &str) -> Result<ModelConfig> {
    ModelConfig::by_name(preset).ok_or_else(|| usage(format!("unknown preset {preset:?}; valid presets: paper, desk")))
}

fn check_panel_size(items: &[RpmItem], config: &ModelConfig) -> Result<()> {
    if let Some(item) = items.iter().find(|i| i.panel_size != config.panel_size) {
        return Err(usage(format!(
            "dataset panel size {} does not match preset {:?} panel size {}",
            item.panel_size, config.preset, config.panel_size
        )));
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = now();
    let config = model_config(&args.preset)?;
    let variant = Variant::by_name(&args.variant).ok_or_else(|| {
        usage(format!(
            "unknown variant {:?}; valid variants: nonmono, monotonic",
            args.variant
        ))
    })?;
    let train_config = TrainConfig {
        lr: args.lr,
        batch_items: args.batch_items,
        epochs: args.epochs,
        seed: args.seed,
        pos_weight: args.pos_weight,
        patience: args.patience,
        ..TrainConfig::default()
    };
    train_config.validate().map_err(|e| usage(e.to_string()))?;
    let items = load_items(&args.data)?;
    if items.len() < 5 {
        return Err(usage(format!(
            "dataset holds {} items; at least 5 are needed for a 60/20/20 split",
            items.len()
        )));
    }
    check_panel_size(&items, &config)?;
    fs::create_dir_all(&args.out_dir)?;
    let ckpt = args.out_dir.join("checkpoint.nmck");
    let csv = args.out_dir.join("metrics.csv");
    let manifest = args.out_dir.join("manifest.json");

    let mut model = VarModel::<f32>::build_variant(&config, variant, args.seed)?;
    let (history, results, failure) = match train::run_experiment(&mut model, &items, &train_config) {
        Ok(run) => {
            let meta = run.checkpoint_meta(&model, &train_config);
            train::save_checkpoint(&model, &meta, &ckpt)?;
            println!(
                "{}",
                table(&format!("{} ({})", variant.name(), config.preset), &run.test)
            );
            let results = serde_json::json!({
                "best_epoch": run.outcome.best_epoch,
                "best_val_accuracy": run.outcome.best_val_accuracy,
                "test_accuracy": run.test.accuracy,
                "test_per_config": config_map(&run.test),
                "param_count": model.param_count(),
            });
            (run.outcome.history, results, None)
        }
        Err(TrainError::NonFinite { epoch, batch, history }) => {
            let best = history
                .phase(train::Phase::Val)
                .fold(None::<(usize, f64)>, |b, r| match b {
                    Some((_, a)) if a >= r.accuracy => b,
                    _ => Some((r.epoch, r.accuracy)),
                });
            let meta = train::CheckpointMeta {
                model: config.clone(),
                variant,
                train: Some(train_config.clone()),
                epoch: best.map_or(0, |b| b.0),
                adam_steps: 0,
                shuffle_seed: args.seed,
                best_val_accuracy: history.best_val_accuracy(),
            };
            train::save_checkpoint(&model, &meta, &ckpt)?;
            let msg = format!("non-finite loss at epoch {epoch}, batch {batch}; last good weights kept");
            (*history, serde_json::json!({ "error": msg }), Some(anyhow!(msg)))
        }
        Err(e) => return Err(e.into()),
    };
    fs::write(&csv, history.to_csv())?;
    write_manifest(
        &manifest,
        "train",
        args,
        vec![args.seed],
        &[&args.data],
        started,
        &[&ckpt, &csv],
        results,
    )?;
    failure.map_or(Ok(()), Err)
}

fn config_map(report: &EvalReport) -> serde_json::Value {
    report
        .config_accuracy()
        .into_iter()
        .map(|(c, a)| (c.name().to_string(), serde_json::json!(a)))
        .collect()
}

fn column_name(c: Configuration) -> &'static str {
    match c {
        Configuration::Center => "Center",
        Configuration::Grid2x2 => "2x2Grid",
        Configuration::Grid3x3 => "3x3Grid",
        Configuration::LeftRight => "L-R",
        Configuration::UpDown => "U-D",
        Configuration::OutInCenter => "O-IC",
        Configuration::OutInGrid => "O-IG",
    }
}

/// Mean of the per-configuration accuracies.
fn average(report: &EvalReport) -> f64 {
    let acc = report.config_accuracy();
    acc.iter().map(|(_, a)| a).sum::<f64>() / acc.len().max(1) as f64
}

/// Accuracy table with an average column followed by one column per
/// configuration present, in percent.
fn table(label: &str, report: &EvalReport) -> String {
    let acc = report.config_accuracy();
    let mut head = format!("{:<20} {:>9}", "Model", "Avg. Acc.");
    let mut row = format!("{:<20} {:>9.2}", label, 100.0 * average(report));
    for (c, a) in &acc {
        write!(head, " {:>8}", column_name(*c)).unwrap();
        write!(row, " {:>8.2}", 100.0 * a).unwrap();
    }
    format!("{head}\n{row}")
}

fn report_csv(report: &EvalReport) -> String {
    let acc = report.config_accuracy();
    let mut head = String::from("items,accuracy,average");
    let mut row = format!(
        "{},{:.6},{:.6}",
        report.responses.len(),
        report.accuracy,
        average(report)
    );
    for (c, a) in &acc {
        write!(head, ",{}", c.name()).unwrap();
        write!(row, ",{a:.6}").unwrap();
    }
    format!("{head}\n{row}\n")
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let started = now();
    let ckpt = train::load_checkpoint(&args.checkpoint, None)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let items = load_items(&args.data)?;
    check_panel_size(&items, &ckpt.meta.model)?;
    if items.is_empty() {
        return Err(usage("dataset holds no items"));
    }
    let mut model = ckpt.model;
    let refs: Vec<&RpmItem> = items.iter().collect();
    let pos_weight = ckpt.meta.train.as_ref().map_or(7.0, |t| t.pos_weight);
    let report = train::evaluate(&mut model, &refs, 16, pos_weight)?;
    let label = format!("{} ({})", ckpt.meta.variant.name(), ckpt.meta.model.preset);
    println!("{}", table(&label, &report));
    let dir = match &args.out_dir {
        Some(d) => d.clone(),
        None => args
            .checkpoint
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    fs::create_dir_all(&dir)?;
    let csv = dir.join("eval.csv");
    fs::write(&csv, report_csv(&report))?;
    write_manifest(
        &dir.join("eval.manifest.json"),
        "eval",
        args,
        vec![],
        &[&args.data, &args.checkpoint],
        started,
        &[&csv],
        serde_json::json!({ "accuracy": report.accuracy, "average": average(&report), "per_config": config_map(&report), "ties": report.ties }),
    )
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let started = now();
    let suites: Vec<&str> = match args.suite.as_str() {
        "all" => vec!["gradcheck", "shapes", "nonmono", "oracle"],
        s @ ("gradcheck" | "shapes" | "nonmono" | "oracle") => vec![s],
        other => {
            return Err(usage(format!(
                "unknown suite {other:?}; valid suites: gradcheck, shapes, nonmono, oracle, all"
            )))
        }
    };
    let mut outcomes: Vec<CheckOutcome> = Vec::new();
    for suite in suites {
        match suite {
            "gradcheck" => {
                outcomes.extend(verify::gradcheck_suite(10)?);
                outcomes.push(verify::model_gradcheck(args.seed, 4)?);
            }
            "shapes" => outcomes.extend(verify::shapes_suite()),
            "nonmono" => outcomes.extend(verify::nonmono_suite(args.seed)),
            _ => outcomes.extend(verify::oracle_suite(args.oracle_items, 10_000, args.seed)?),
        }
    }
    let mut report = String::new();
    for o in &outcomes {
        println!("{o}");
        writeln!(report, "{o}").unwrap();
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("summary checks={} failed={failed}", outcomes.len());
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join("verify.txt");
        fs::write(&path, report)?;
        write_manifest(
            &dir.join("verify.manifest.json"),
            "verify",
            args,
            vec![args.seed],
            &[],
            started,
            &[&path],
            serde_json::json!({ "checks": outcomes.len(), "failed": failed }),
        )?;
    }
    Ok(failed == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
