//! htd: train, evaluate, cross-validate, and apply the hybrid text
//! detector from the command line.
//!
//! Exit codes: 0 success, 2 usage/schema/IO error, 3 training error
//! (degenerate data or divergence), 4 input empty after tokenization.
//! Set `HTD_LOG=error|info|debug` for verbosity. Every successful command
//! writes a `run_manifest.json` recording the resolved config, seed,
//! paths, timings, and artifact checksums.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use htd_core::corpus::{
    expand_examples, kfold, load_corpus, split_train_test, CorpusError, Label, LabeledExample,
};
use htd_core::evalstats::{
    confusion, independence_test, metrics, EvalError, EvalReport, MetricsReport,
};
use htd_core::hybridnet::{
    init_params, predict, prepare_examples, score_examples, train, HybridModelParams,
    HybridNetError, Hyperparams, ModelConfig, PreparedExample, TrainReport, THRESHOLD,
};
use htd_core::persist::{self, ConfigArchive, PersistError};
use htd_core::textproc::{
    clean, fit_vocab, tfidf_fit, tokenize, TextProcError, TfIdfModel, Vocabulary,
};

#[derive(Parser)]
#[command(
    name = "htd",
    version,
    about = "Hybrid detector for AI-generated text: train, evaluate, cross-validate, predict"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector on a corpus CSV and write its artifacts
    Train(TrainArgs),
    /// Evaluate saved artifacts against a labeled corpus
    Evaluate(EvaluateArgs),
    /// K-fold cross-validation on a corpus
    Crossval(CrossvalArgs),
    /// Classify one text with saved artifacts
    Predict(PredictArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus CSV with columns id,human_text,ai_text,instructions
    #[arg(long)]
    data: PathBuf,
    /// Directory the artifacts are written to
    #[arg(long)]
    out: PathBuf,
    /// JSON file overriding model and training settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file; default 42)
    #[arg(long)]
    seed: Option<u64>,
    /// Train fraction in (0,1) (overrides the config file; default 0.7)
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory holding weights.bin, tokenizer.txt, config.json
    #[arg(long)]
    model: PathBuf,
    /// Labeled corpus CSV to score
    #[arg(long)]
    data: PathBuf,
    /// Directory for the report files and run manifest (default ".")
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrossvalArgs {
    /// Labeled corpus CSV
    #[arg(long)]
    data: PathBuf,
    /// Number of folds (at least 2)
    #[arg(long)]
    folds: usize,
    /// Master seed (overrides the config file; default 42)
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file overriding model and training settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the report file and run manifest (default ".")
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory holding weights.bin, tokenizer.txt, config.json
    #[arg(long)]
    model: PathBuf,
    /// Text to classify
    #[arg(long)]
    text: Option<String>,
    /// File whose contents are classified
    #[arg(long)]
    file: Option<PathBuf>,
    /// Directory for the run manifest (default ".")
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Training(String),
    EmptyInput(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Data(_) => 2,
            CliError::Training(_) => 3,
            CliError::EmptyInput(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Data(m)
            | CliError::Training(m)
            | CliError::EmptyInput(m) => m,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TextProcError> for CliError {
    fn from(e: TextProcError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<HybridNetError> for CliError {
    fn from(e: HybridNetError) -> Self {
        match e {
            HybridNetError::EmptyAfterTokenize { .. } => CliError::EmptyInput(e.to_string()),
            HybridNetError::BadConfig(_) => CliError::Usage(e.to_string()),
            HybridNetError::DegenerateTrainingSet | HybridNetError::NonFinite => {
                CliError::Training(e.to_string())
            }
            other => CliError::Training(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HTD_LOG", "error")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Crossval(args) => cmd_crossval(args),
        Command::Predict(args) => cmd_predict(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

/// Everything the commands resolve before touching data: model shape,
/// split ratio, vocabulary limits, and optimizer settings.
struct Settings {
    model: ModelConfig,
    ratio: f64,
    vocab_max_size: usize,
    vocab_min_df: usize,
    hyper: Hyperparams,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            // vocab_size is a placeholder until a vocabulary is fitted.
            model: ModelConfig::new(0),
            ratio: 0.7,
            vocab_max_size: 10_000,
            vocab_min_df: 1,
            hyper: Hyperparams::default(),
        }
    }
}

fn check_ratio(ratio: f64) -> Result<(), CliError> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "--ratio must be strictly between 0 and 1, got {ratio}"
        )))
    }
}

fn apply_config_file(settings: &mut Settings, path: &Path) -> Result<(), CliError> {
    let usage = |m: String| CliError::Usage(format!("config {}: {m}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| usage(e.to_string()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| usage("top level must be an object".to_string()))?;

    let as_usize = |key: &str, v: &serde_json::Value| -> Result<usize, CliError> {
        v.as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| usage(format!("`{key}` must be a non-negative integer")))
    };
    let as_f64 = |key: &str, v: &serde_json::Value| -> Result<f64, CliError> {
        v.as_f64()
            .ok_or_else(|| usage(format!("`{key}` must be a number")))
    };

    for (key, v) in obj {
        match key.as_str() {
            "embed_dim" => settings.model.embed_dim = as_usize(key, v)?,
            "seq_len" => settings.model.seq_len = as_usize(key, v)?,
            "kernel_widths" => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| usage("`kernel_widths` must be an array".to_string()))?;
                settings.model.kernel_widths = arr
                    .iter()
                    .map(|w| as_usize("kernel_widths", w))
                    .collect::<Result<_, _>>()?;
            }
            "filters_per_width" => settings.model.filters_per_width = as_usize(key, v)?,
            "gru_hidden" => settings.model.gru_hidden = as_usize(key, v)?,
            "dense_hidden" => settings.model.dense_hidden = as_usize(key, v)?,
            "use_tfidf_aux" => {
                settings.model.use_tfidf_aux = v
                    .as_bool()
                    .ok_or_else(|| usage("`use_tfidf_aux` must be a boolean".to_string()))?
            }
            "dropout_rate" => settings.model.dropout_rate = as_f64(key, v)?,
            "seed" => {
                settings.model.seed = v
                    .as_u64()
                    .ok_or_else(|| usage("`seed` must be a non-negative integer".to_string()))?
            }
            "split_ratio" => settings.ratio = as_f64(key, v)?,
            "vocab_max_size" => settings.vocab_max_size = as_usize(key, v)?,
            "vocab_min_df" => settings.vocab_min_df = as_usize(key, v)?,
            "epochs" => settings.hyper.epochs = as_usize(key, v)?,
            "batch_size" => settings.hyper.batch_size = as_usize(key, v)?,
            "learning_rate" => settings.hyper.learning_rate = as_f64(key, v)?,
            "early_stop_patience" => settings.hyper.early_stop_patience = as_usize(key, v)?,
            _ => log::warn!("config: ignoring unknown field `{key}`"),
        }
    }
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

/// Writes `run_manifest.json` into `out_dir`, checksumming every listed
/// output file.
fn write_manifest(
    out_dir: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[PathBuf],
    timings_ms: &[(&str, u128)],
) -> Result<(), CliError> {
    let mut checksums = serde_json::Map::new();
    for path in outputs {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| path.display().to_string());
        checksums.insert(
            name,
            serde_json::json!(format!("sha256:{}", sha256_hex(path)?)),
        );
    }
    let timings: serde_json::Map<String, serde_json::Value> = timings_ms
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::json!(*v as u64)))
        .collect();
    let manifest = serde_json::json!({
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "timings_ms": timings,
        "checksums": checksums,
    });
    let path = out_dir.join("run_manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn pick(examples: &[LabeledExample], indices: &[usize]) -> Vec<LabeledExample> {
    indices.iter().map(|&i| examples[i].clone()).collect()
}

struct FittedModel {
    config: ModelConfig,
    vocab: Vocabulary,
    tfidf: Option<TfIdfModel>,
    params: HybridModelParams,
    report: TrainReport,
}

/// Fits vocabulary, TF-IDF stats, and parameters on the train side,
/// early-stopping on the validation side.
fn fit(
    settings: &Settings,
    train_ex: &[LabeledExample],
    val_ex: &[LabeledExample],
) -> Result<FittedModel, CliError> {
    let docs: Vec<Vec<String>> = train_ex
        .iter()
        .map(|ex| tokenize(&clean(&ex.text)))
        .collect();
    let vocab = fit_vocab(&docs, settings.vocab_max_size, settings.vocab_min_df)?;
    let tfidf = if settings.model.use_tfidf_aux {
        Some(tfidf_fit(&docs)?)
    } else {
        None
    };
    let mut config = settings.model.clone();
    config.vocab_size = vocab.size();
    config.validate()?;
    log::info!(
        "vocabulary: {} entries; training on {} examples, validating on {}",
        vocab.size(),
        train_ex.len(),
        val_ex.len()
    );
    let train_set = prepare_examples(train_ex, &vocab, tfidf.as_ref(), &config)?;
    let val_set = prepare_examples(val_ex, &vocab, tfidf.as_ref(), &config)?;
    let params = init_params(&config)?;
    let (params, report) = train(params, &config, &train_set, &val_set, &settings.hyper)?;
    Ok(FittedModel {
        config,
        vocab,
        tfidf,
        params,
        report,
    })
}

fn evaluate_prepared(
    params: &HybridModelParams,
    config: &ModelConfig,
    set: &[PreparedExample],
) -> Result<EvalReport, CliError> {
    let scores = score_examples(params, config, set)?;
    let predictions: Vec<bool> = scores.iter().map(|&s| s >= THRESHOLD).collect();
    let labels: Vec<bool> = set.iter().map(|ex| ex.target == 1.0).collect();
    let m = confusion(&predictions, &labels)?;
    let metrics_report = metrics(&m)?;
    let chi = independence_test(&m).ok();
    Ok(EvalReport {
        confusion: m,
        metrics: metrics_report,
        chi_square: chi,
    })
}

fn render_train_report(r: &TrainReport) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "epoch  train_loss  val_accuracy");
    for i in 0..r.epochs_run {
        let _ = writeln!(
            out,
            "{:>5}  {:>10.6}  {:>12.6}",
            i + 1,
            r.train_loss[i],
            r.val_accuracy[i]
        );
    }
    let _ = writeln!(
        out,
        "epochs run: {}{}",
        r.epochs_run,
        if r.early_stopped {
            " (stopped early)"
        } else {
            ""
        }
    );
    out
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let total_start = Instant::now();
    let mut settings = Settings::default();
    if let Some(path) = &args.config {
        apply_config_file(&mut settings, path)?;
    }
    if let Some(seed) = args.seed {
        settings.model.seed = seed;
    }
    if let Some(ratio) = args.ratio {
        settings.ratio = ratio;
    }
    check_ratio(settings.ratio)?;

    let records = load_corpus(&args.data)?;
    let examples = expand_examples(&records);
    log::info!(
        "loaded {} records ({} labeled examples)",
        records.len(),
        examples.len()
    );
    let plan = split_train_test(&examples, settings.ratio, settings.model.seed)?;
    let train_ex = pick(&examples, &plan.train_indices);
    let test_ex = pick(&examples, &plan.test_indices);

    let train_start = Instant::now();
    let fitted = fit(&settings, &train_ex, &test_ex)?;
    let train_ms = train_start.elapsed().as_millis();

    fs::create_dir_all(&args.out)?;
    let mut outputs = Vec::new();
    let mut emit = |name: &str| -> PathBuf {
        let p = args.out.join(name);
        outputs.push(p.clone());
        p
    };

    persist::save_weights(&fitted.params, &fitted.config, &emit("weights.bin"))?;
    persist::save_tokenizer(&fitted.vocab, &emit("tokenizer.txt"))?;
    let archive = ConfigArchive::new(fitted.config.clone(), settings.ratio);
    persist::save_config(&archive, &emit("config.json"))?;
    if let Some(tfidf) = &fitted.tfidf {
        persist::save_tfidf(tfidf, &emit("tfidf.json"))?;
    }
    fs::write(
        emit("split.json"),
        serde_json::to_string_pretty(&plan)? + "\n",
    )?;
    fs::write(
        emit("train_report.json"),
        serde_json::to_string_pretty(&fitted.report)? + "\n",
    )?;
    let report_text = render_train_report(&fitted.report);
    fs::write(emit("train_report.txt"), &report_text)?;

    print!("{report_text}");
    println!("artifacts: {}", args.out.display());

    write_manifest(
        &args.out,
        "train",
        fitted.config.seed,
        persist::config_value(&archive),
        &[&args.data],
        &outputs,
        &[
            ("total", total_start.elapsed().as_millis()),
            ("train", train_ms),
        ],
    )
}

struct LoadedModel {
    archive: ConfigArchive,
    vocab: Vocabulary,
    tfidf: Option<TfIdfModel>,
    params: HybridModelParams,
}

fn load_model_dir(dir: &Path) -> Result<LoadedModel, CliError> {
    let archive = persist::load_config(&dir.join("config.json"))?;
    let vocab = persist::load_tokenizer(&dir.join("tokenizer.txt"))?;
    if vocab.size() != archive.model.vocab_size {
        return Err(CliError::Data(format!(
            "tokenizer has {} entries but the config says {}",
            vocab.size(),
            archive.model.vocab_size
        )));
    }
    let params = persist::load_weights(&dir.join("weights.bin"), &archive.model)?;
    let tfidf = if archive.model.use_tfidf_aux {
        Some(persist::load_tfidf(&dir.join("tfidf.json"))?)
    } else {
        None
    };
    Ok(LoadedModel {
        archive,
        vocab,
        tfidf,
        params,
    })
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let total_start = Instant::now();
    let model = load_model_dir(&args.model)?;
    let records = load_corpus(&args.data)?;
    let examples = expand_examples(&records);
    let set = prepare_examples(
        &examples,
        &model.vocab,
        model.tfidf.as_ref(),
        &model.archive.model,
    )?;

    let score_start = Instant::now();
    let report = evaluate_prepared(&model.params, &model.archive.model, &set)?;
    let score_ms = score_start.elapsed().as_millis();

    let text = report.render_text();
    let json = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    print!("{json}");

    let out_dir = args.out.unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let txt_path = out_dir.join("eval_report.txt");
    let json_path = out_dir.join("eval_report.json");
    fs::write(&txt_path, &text)?;
    fs::write(&json_path, &json)?;

    write_manifest(
        &out_dir,
        "evaluate",
        model.archive.model.seed,
        persist::config_value(&model.archive),
        &[&args.model, &args.data],
        &[txt_path, json_path],
        &[
            ("total", total_start.elapsed().as_millis()),
            ("score", score_ms),
        ],
    )
}

fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, sd)
}

fn cmd_crossval(args: CrossvalArgs) -> Result<(), CliError> {
    let total_start = Instant::now();
    let mut settings = Settings::default();
    if let Some(path) = &args.config {
        apply_config_file(&mut settings, path)?;
    }
    if let Some(seed) = args.seed {
        settings.model.seed = seed;
    }

    let records = load_corpus(&args.data)?;
    let examples = expand_examples(&records);
    let plan = kfold(&examples, args.folds, settings.model.seed)?;

    let mut rows: Vec<MetricsReport> = Vec::with_capacity(plan.folds.len());
    println!("fold  accuracy  precision  recall    f1");
    for (f, fold) in plan.folds.iter().enumerate() {
        let mut held_out = vec![false; examples.len()];
        for &i in fold {
            held_out[i] = true;
        }
        let train_ex: Vec<LabeledExample> = examples
            .iter()
            .enumerate()
            .filter(|(i, _)| !held_out[*i])
            .map(|(_, ex)| ex.clone())
            .collect();
        let test_ex = pick(&examples, fold);

        let fitted = fit(&settings, &train_ex, &test_ex)?;
        let test_set = prepare_examples(
            &test_ex,
            &fitted.vocab,
            fitted.tfidf.as_ref(),
            &fitted.config,
        )?;
        let report = evaluate_prepared(&fitted.params, &fitted.config, &test_set)?;
        let m = report.metrics;
        println!(
            "{:>4}  {:.6}  {:.6}   {:.6}  {:.6}",
            f + 1,
            m.accuracy,
            m.precision,
            m.recall,
            m.f1
        );
        rows.push(m);
    }

    let columns: [(&str, fn(&MetricsReport) -> f64); 4] = [
        ("accuracy", |m| m.accuracy),
        ("precision", |m| m.precision),
        ("recall", |m| m.recall),
        ("f1", |m| m.f1),
    ];
    let mut means = serde_json::Map::new();
    let mut sds = serde_json::Map::new();
    let mut mean_cells = Vec::new();
    let mut sd_cells = Vec::new();
    for (name, get) in columns {
        let values: Vec<f64> = rows.iter().map(|m| get(m)).collect();
        let (mean, sd) = mean_and_sd(&values);
        means.insert(name.to_string(), serde_json::json!(mean));
        sds.insert(name.to_string(), serde_json::json!(sd));
        mean_cells.push(format!("{mean:.6}"));
        sd_cells.push(format!("{sd:.6}"));
    }
    println!(
        "mean  {}  {}   {}  {}",
        mean_cells[0], mean_cells[1], mean_cells[2], mean_cells[3]
    );
    println!(
        "  sd  {}  {}   {}  {}",
        sd_cells[0], sd_cells[1], sd_cells[2], sd_cells[3]
    );

    let out_dir = args.out.unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let report_path = out_dir.join("crossval_report.json");
    let doc = serde_json::json!({
        "k": args.folds,
        "seed": settings.model.seed,
        "folds": rows,
        "mean": means,
        "sd": sds,
    });
    fs::write(&report_path, serde_json::to_string_pretty(&doc)? + "\n")?;

    let archive = ConfigArchive::new(settings.model.clone(), settings.ratio);
    write_manifest(
        &out_dir,
        "crossval",
        settings.model.seed,
        persist::config_value(&archive),
        &[&args.data],
        &[report_path],
        &[("total", total_start.elapsed().as_millis())],
    )
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let total_start = Instant::now();
    let text = match (&args.text, &args.file) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--text and --file are mutually exclusive".to_string(),
            ))
        }
        (Some(t), None) => t.clone(),
        (None, Some(p)) => fs::read_to_string(p)?,
        (None, None) => {
            return Err(CliError::Usage(
                "one of --text or --file is required".to_string(),
            ))
        }
    };

    let model = load_model_dir(&args.model)?;
    let (label, score) = predict(
        &model.params,
        &model.archive.model,
        &model.vocab,
        model.tfidf.as_ref(),
        &text,
    )?;
    let label_str = match label {
        Label::Ai => "ai",
        Label::Human => "human",
    };
    println!("{label_str} {score:.6}");

    let out_dir = args.out.unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let mut inputs: Vec<&Path> = vec![&args.model];
    if let Some(file) = &args.file {
        inputs.push(file);
    }
    write_manifest(
        &out_dir,
        "predict",
        model.archive.model.seed,
        persist::config_value(&model.archive),
        &inputs,
        &[],
        &[("total", total_start.elapsed().as_millis())],
    )
}
