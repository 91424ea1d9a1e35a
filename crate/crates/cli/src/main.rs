//! `cldd` — pipeline driver for the collaborative disease-detection engine.
//!
//! Subcommands: generate | train | eval | predict | analyze. Every command
//! is deterministic given its flags, embeds the resolved configuration in
//! its output artifacts, and exits 0 on success, 1 on usage or validation
//! errors, and 2 on runtime failures.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;

use cldd_core::analysis::{discrepancy_rank, export_embeddings, write_discrepancy_csv, NodeKindFilter};
use cldd_core::checkpoint;
use cldd_core::data::{load_dataset, synth_generate, Dataset, SynthConfig};
use cldd_core::eval::{case_report, evaluate, write_report_csv, MetricMeans};
use cldd_core::model::{final_embeddings, forward_eval, ModelConfig, ModelState, PropagationGraph};
use cldd_core::train::{fit, EpochStats, FitError, RegScope, TrainConfig};
use config::ConfigFile;

#[derive(Parser, Debug)]
#[command(name = "cldd", version, about = "Graph collaborative learning for disease-risk ranking")]
struct Cli {
    /// Flat key=value config file; explicit flags override its entries.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed driving generation, initialization, and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Directory artifacts are written to.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic planted-structure dataset.
    Generate {
        #[arg(long, default_value_t = 300)]
        patients: usize,
        #[arg(long, default_value_t = 150)]
        diseases: usize,
        /// Rank of the planted preference factors.
        #[arg(long, default_value_t = 8)]
        rank: usize,
        /// Fraction of diseases each patient interacts with, in (0, 0.5).
        #[arg(long, default_value_t = 0.05)]
        density: f64,
        /// Correlate preferences with the age bucket so the demographic
        /// features carry signal.
        #[arg(long, default_value_t = false)]
        confound: bool,
    },

    /// Train on a dataset directory and write a checkpoint plus loss log.
    Train {
        /// Directory holding interactions.csv and demographics.csv.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[command(flatten)]
        data_opts: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Additionally write checkpoint_epoch_NNNN.json every N epochs.
        #[arg(long, value_name = "N")]
        checkpoint_every: Option<usize>,
    },

    /// Evaluate a checkpoint: per-patient metrics and macro means.
    Eval {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[command(flatten)]
        data_opts: DataArgs,
        /// Ranking cutoff.
        #[arg(long)]
        k: Option<usize>,
        /// Also train and evaluate a reference baseline on the same split
        /// (supported: mfbpr).
        #[arg(long, value_name = "MODEL")]
        baseline: Option<String>,
    },

    /// Rank diseases for one patient with hit/miss annotations.
    Predict {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[command(flatten)]
        data_opts: DataArgs,
        /// Patient id as it appears in the interactions file.
        #[arg(long)]
        patient: String,
        #[arg(long)]
        k: Option<usize>,
    },

    /// Disease-pair discrepancy ranking and embedding export.
    Analyze {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[command(flatten)]
        data_opts: DataArgs,
        /// Number of top-discrepancy pairs to keep.
        #[arg(long)]
        top: Option<usize>,
    },
}

#[derive(clap::Args, Debug)]
struct DataArgs {
    /// Keep only the N most frequent diseases before splitting.
    #[arg(long, value_name = "N")]
    max_diseases: Option<usize>,
    /// Per-patient temporal train fraction.
    #[arg(long)]
    split_ratio: Option<f64>,
}

#[derive(clap::Args, Debug)]
struct ModelArgs {
    /// Embedding width k.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Width of the frozen demographic block (0 disables it).
    #[arg(long)]
    fixed_dim: Option<usize>,
    /// Number of propagation layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Maximum hop order mixed per layer.
    #[arg(long)]
    hops: Option<usize>,
    /// Dropout rate applied in every layer.
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    leaky_slope: Option<f64>,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// L2 regularization weight λ.
    #[arg(long)]
    l2: Option<f64>,
    /// Negatives sampled per positive.
    #[arg(long)]
    negatives: Option<usize>,
    /// Which tensors λ‖Θ‖² covers: all | embeddings.
    #[arg(long)]
    reg_scope: Option<String>,
}

/// Usage/validation failures exit 1, everything else 2.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl From<cldd_core::Error> for CliError {
    fn from(e: cldd_core::Error) -> Self {
        use cldd_core::Error::*;
        match e {
            Config(_) | Domain(_) | Ingest { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(anyhow::Error::new(other)),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => ConfigFile::default(),
    };
    let usage = |e: anyhow::Error| CliError::Usage(e.to_string());
    let seed = file.resolve(cli.seed, "seed", 42u64).map_err(usage)?;
    if let Some(threads) = file.resolve_opt(cli.threads, "threads").map_err(usage)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))?;
    }
    let out_dir = match cli.out {
        Some(dir) => dir,
        None => match file.get_raw("out") {
            Some(raw) => PathBuf::from(raw),
            None => PathBuf::from("."),
        },
    };

    match cli.command {
        Command::Generate {
            patients,
            diseases,
            rank,
            density,
            confound,
        } => cmd_generate(&file, &out_dir, seed, patients, diseases, rank, density, confound),
        Command::Train {
            data,
            data_opts,
            model,
            train,
            checkpoint_every,
        } => cmd_train(&file, &out_dir, seed, &data, data_opts, model, train, checkpoint_every),
        Command::Eval {
            data,
            checkpoint,
            data_opts,
            k,
            baseline,
        } => cmd_eval(&file, &out_dir, &data, &checkpoint, data_opts, k, baseline),
        Command::Predict {
            data,
            checkpoint,
            data_opts,
            patient,
            k,
        } => cmd_predict(&file, &out_dir, &data, &checkpoint, data_opts, &patient, k),
        Command::Analyze {
            data,
            checkpoint,
            data_opts,
            top,
        } => cmd_analyze(&file, &out_dir, &data, &checkpoint, data_opts, top),
    }
}

#[derive(Debug, Clone, Serialize)]
struct DataOptions {
    max_diseases: Option<usize>,
    split_ratio: f64,
}

fn resolve_data_options(file: &ConfigFile, args: &DataArgs) -> Result<DataOptions, CliError> {
    let usage = |e: anyhow::Error| CliError::Usage(e.to_string());
    Ok(DataOptions {
        max_diseases: file
            .resolve_opt(args.max_diseases, "max-diseases")
            .map_err(usage)?,
        split_ratio: file
            .resolve(args.split_ratio, "split-ratio", 0.8)
            .map_err(usage)?,
    })
}

fn resolve_model_config(
    file: &ConfigFile,
    args: &ModelArgs,
    seed: u64,
) -> Result<ModelConfig, CliError> {
    let usage = |e: anyhow::Error| CliError::Usage(e.to_string());
    let defaults = ModelConfig::default();
    let embed_dim = file.resolve(args.embed_dim, "embed-dim", defaults.embed_dim).map_err(usage)?;
    let fixed_dim = file.resolve(args.fixed_dim, "fixed-dim", defaults.fixed_dim).map_err(usage)?;
    let layers = file.resolve(args.layers, "layers", defaults.num_layers).map_err(usage)?;
    let hops = file.resolve(args.hops, "hops", defaults.max_hops).map_err(usage)?;
    let dropout = file.resolve(args.dropout, "dropout", 0.1).map_err(usage)?;
    let leaky_slope = file
        .resolve(args.leaky_slope, "leaky-slope", defaults.leaky_slope)
        .map_err(usage)?;
    let cfg = ModelConfig {
        embed_dim,
        fixed_dim,
        num_layers: layers,
        max_hops: hops,
        layer_dims: vec![embed_dim; layers],
        dropout: vec![dropout; layers],
        leaky_slope,
        seed,
    };
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

fn resolve_train_config(
    file: &ConfigFile,
    args: &TrainArgs,
    seed: u64,
) -> Result<TrainConfig, CliError> {
    let usage = |e: anyhow::Error| CliError::Usage(e.to_string());
    let defaults = TrainConfig::default();
    let reg_scope = match file
        .resolve(args.reg_scope.clone(), "reg-scope", "all".to_string())
        .map_err(usage)?
        .as_str()
    {
        "all" => RegScope::All,
        "embeddings" => RegScope::EmbeddingsOnly,
        other => {
            return Err(CliError::Usage(format!(
                "unknown reg-scope `{other}`; expected all or embeddings"
            )))
        }
    };
    let cfg = TrainConfig {
        learning_rate: file
            .resolve(args.learning_rate, "learning-rate", defaults.learning_rate)
            .map_err(usage)?,
        batch_size: file.resolve(args.batch_size, "batch-size", defaults.batch_size).map_err(usage)?,
        epochs: file.resolve(args.epochs, "epochs", defaults.epochs).map_err(usage)?,
        l2_weight: file.resolve(args.l2, "l2", defaults.l2_weight).map_err(usage)?,
        negatives_per_positive: file
            .resolve(args.negatives, "negatives", defaults.negatives_per_positive)
            .map_err(usage)?,
        reg_scope,
        seed,
        ..defaults
    };
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("missing file: {}", path.display())));
    }
    Ok(())
}

/// Load the dataset from a directory holding interactions.csv and
/// demographics.csv; paths are validated before any work starts.
fn load_data_dir(dir: &Path, opts: &DataOptions) -> Result<Dataset, CliError> {
    let interactions = dir.join("interactions.csv");
    let demographics = dir.join("demographics.csv");
    require_file(&interactions)?;
    require_file(&demographics)?;
    load_dataset(&interactions, &demographics, opts.max_diseases, opts.split_ratio)
        .map_err(CliError::from)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    text.push('\n');
    std::fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(CliError::Runtime)
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    file: &ConfigFile,
    out_dir: &Path,
    seed: u64,
    patients: usize,
    diseases: usize,
    rank: usize,
    density: f64,
    confound: bool,
) -> Result<(), CliError> {
    let _ = file;
    let cfg = SynthConfig {
        patients,
        diseases,
        rank,
        density,
        seed,
        confound,
    };
    cfg.validate().map_err(CliError::from)?;
    let output = synth_generate(&cfg, out_dir).map_err(CliError::from)?;
    println!(
        "generated {} interactions for {} patients x {} diseases into {}",
        output.tables.interactions.len(),
        patients,
        diseases,
        out_dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    file: &ConfigFile,
    out_dir: &Path,
    seed: u64,
    data: &Path,
    data_args: DataArgs,
    model_args: ModelArgs,
    train_args: TrainArgs,
    checkpoint_every: Option<usize>,
) -> Result<(), CliError> {
    let data_opts = resolve_data_options(file, &data_args)?;
    let model_cfg = resolve_model_config(file, &model_args, seed)?;
    let train_cfg = resolve_train_config(file, &train_args, seed)?;
    let checkpoint_every = file
        .resolve_opt(checkpoint_every, "checkpoint-every")
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let dataset = load_data_dir(data, &data_opts)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))
        .map_err(CliError::Runtime)?;

    let provenance = serde_json::json!({
        "command": "train",
        "seed": seed,
        "data_options": data_opts,
        "model_config": model_cfg,
        "train_config": train_cfg,
    });

    let log_path = out_dir.join("train_log.csv");
    let mut log_writer = csv::Writer::from_path(&log_path)
        .with_context(|| format!("cannot write {}", log_path.display()))
        .map_err(CliError::Runtime)?;
    log_writer
        .write_record(["epoch", "mean_loss", "wall_seconds"])
        .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;

    let ckpt_provenance = provenance.clone();
    let every = checkpoint_every.unwrap_or(0);
    let out_owned = out_dir.to_path_buf();
    let mut observer = move |state: &ModelState, stats: &EpochStats| -> cldd_core::Result<()> {
        log_writer
            .write_record([
                stats.epoch.to_string(),
                stats.mean_loss.to_string(),
                stats.wall_seconds.to_string(),
            ])
            .map_err(cldd_core::Error::from)?;
        log_writer.flush()?;
        if every > 0 && stats.epoch.is_multiple_of(every) {
            let path = out_owned.join(format!("checkpoint_epoch_{:04}.json", stats.epoch));
            checkpoint::save(state, ckpt_provenance.clone(), &path)?;
        }
        Ok(())
    };

    match fit(&dataset, &model_cfg, &train_cfg, Some(&mut observer)) {
        Ok(result) => {
            let path = out_dir.join("checkpoint.json");
            checkpoint::save(&result.state, provenance, &path).map_err(CliError::from)?;
            let last = result.log.last().map(|s| s.mean_loss).unwrap_or(f64::NAN);
            println!(
                "trained {} epochs ({} positives); final mean loss {last}; checkpoint at {}",
                result.log.len(),
                dataset.train.nnz(),
                path.display()
            );
            Ok(())
        }
        Err(FitError::Diverged {
            epoch,
            reason,
            last_good,
            ..
        }) => {
            let mut provenance = provenance;
            provenance["diverged_at_epoch"] = serde_json::json!(epoch);
            let path = out_dir.join("checkpoint.json");
            checkpoint::save(&last_good, provenance, &path).map_err(CliError::from)?;
            Err(CliError::Runtime(anyhow::anyhow!(
                "training diverged at epoch {epoch}: {reason}; last good state saved to {}",
                path.display()
            )))
        }
        Err(FitError::Core(e)) => Err(CliError::from(e)),
    }
}

/// Pull the data options used at train time out of the checkpoint
/// provenance so eval/predict/analyze reproduce the same split by default.
fn data_options_from_provenance(
    provenance: &serde_json::Value,
    file: &ConfigFile,
    args: &DataArgs,
) -> Result<DataOptions, CliError> {
    let mut opts = resolve_data_options(file, args)?;
    if args.max_diseases.is_none() && file.get_raw("max-diseases").is_none() {
        if let Some(v) = provenance
            .get("data_options")
            .and_then(|d| d.get("max_diseases"))
            .and_then(|v| v.as_u64())
        {
            opts.max_diseases = Some(v as usize);
        }
    }
    if args.split_ratio.is_none() && file.get_raw("split-ratio").is_none() {
        if let Some(v) = provenance
            .get("data_options")
            .and_then(|d| d.get("split_ratio"))
            .and_then(|v| v.as_f64())
        {
            opts.split_ratio = v;
        }
    }
    Ok(opts)
}

fn load_checkpoint_for(
    checkpoint_path: &Path,
    data: &Path,
    file: &ConfigFile,
    args: &DataArgs,
) -> Result<(ModelState, serde_json::Value, DataOptions, Dataset), CliError> {
    require_file(checkpoint_path)?;
    let (state, provenance) = checkpoint::load(checkpoint_path).map_err(CliError::from)?;
    let opts = data_options_from_provenance(&provenance, file, args)?;
    let dataset = load_data_dir(data, &opts)?;
    if state.num_patients() != dataset.num_patients()
        || state.num_diseases() != dataset.num_diseases()
    {
        return Err(CliError::Usage(format!(
            "checkpoint covers {}x{} but the dataset resolves to {}x{}; \
             pass the options used at train time",
            state.num_patients(),
            state.num_diseases(),
            dataset.num_patients(),
            dataset.num_diseases()
        )));
    }
    Ok((state, provenance, opts, dataset))
}

fn means_json(means: &MetricMeans) -> serde_json::Value {
    serde_json::json!({
        "recall": means.recall,
        "precision": means.precision,
        "ndcg": means.ndcg,
        "hit": means.hit,
        "auc": means.auc,
    })
}

fn cmd_eval(
    file: &ConfigFile,
    out_dir: &Path,
    data: &Path,
    checkpoint_path: &Path,
    data_args: DataArgs,
    k: Option<usize>,
    baseline: Option<String>,
) -> Result<(), CliError> {
    let k = file
        .resolve(k, "k", 20usize)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (state, provenance, opts, dataset) =
        load_checkpoint_for(checkpoint_path, data, file, &data_args)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))
        .map_err(CliError::Runtime)?;

    let report = evaluate(&state, &dataset, k).map_err(CliError::from)?;
    write_report_csv(&report, &dataset, &out_dir.join("metrics.csv")).map_err(CliError::from)?;

    let baseline_section = match baseline.as_deref() {
        None => serde_json::Value::Null,
        Some("mfbpr") => {
            // The reference factorization model: same width, no propagation,
            // no fixed block, trained with the checkpoint's own schedule.
            let train_cfg: TrainConfig = provenance
                .get("train_config")
                .cloned()
                .and_then(|v| serde_json::from_value(v).ok())
                .unwrap_or_default();
            let model_cfg =
                ModelConfig::plain_factorization(state.config.embed_dim, state.config.seed);
            let result = fit(&dataset, &model_cfg, &train_cfg, None).map_err(|e| match e {
                FitError::Core(c) => CliError::from(c),
                diverged => CliError::Runtime(anyhow::anyhow!(diverged.to_string())),
            })?;
            let baseline_report = evaluate(&result.state, &dataset, k).map_err(CliError::from)?;
            write_report_csv(
                &baseline_report,
                &dataset,
                &out_dir.join("metrics_mfbpr.csv"),
            )
            .map_err(CliError::from)?;
            serde_json::json!({
                "model": "mfbpr",
                "evaluated_patients": baseline_report.evaluated_patients,
                "means": means_json(&baseline_report.means),
            })
        }
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown baseline `{other}`; supported: mfbpr"
            )))
        }
    };

    let summary = serde_json::json!({
        "command": "eval",
        "k": k,
        "data_options": opts,
        "checkpoint_provenance": provenance,
        "evaluated_patients": report.evaluated_patients,
        "means": means_json(&report.means),
        "baseline": baseline_section,
    });
    write_json(&out_dir.join("eval_summary.json"), &summary)?;
    println!(
        "evaluated {} patients at K={k}: auc {:.4}, recall {:.4}, precision {:.4}, ndcg {:.4}, hit {:.4}",
        report.evaluated_patients,
        report.means.auc,
        report.means.recall,
        report.means.precision,
        report.means.ndcg,
        report.means.hit
    );
    Ok(())
}

fn cmd_predict(
    file: &ConfigFile,
    out_dir: &Path,
    data: &Path,
    checkpoint_path: &Path,
    data_args: DataArgs,
    patient: &str,
    k: Option<usize>,
) -> Result<(), CliError> {
    let k = file
        .resolve(k, "k", 5usize)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (state, provenance, opts, dataset) =
        load_checkpoint_for(checkpoint_path, data, file, &data_args)?;
    if k > dataset.num_diseases() {
        log::warn!(
            "k={k} exceeds the {} known diseases; returning the full ranking",
            dataset.num_diseases()
        );
    }
    let rows = case_report(&state, &dataset, patient, k).map_err(CliError::from)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))
        .map_err(CliError::Runtime)?;

    let path = out_dir.join("prediction.csv");
    let mut writer = csv::Writer::from_path(&path)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(CliError::Runtime)?;
    writer
        .write_record(["rank", "disease_code", "score", "hit"])
        .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    for row in &rows {
        writer
            .write_record([
                row.rank.to_string(),
                row.disease_code.clone(),
                row.score.to_string(),
                (row.hit as u8).to_string(),
            ])
            .map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;
    }
    writer.flush().map_err(|e| CliError::Runtime(anyhow::Error::new(e)))?;

    let meta = serde_json::json!({
        "command": "predict",
        "patient": patient,
        "k": k,
        "rows": rows.len(),
        "data_options": opts,
        "checkpoint_provenance": provenance,
    });
    write_json(&out_dir.join("prediction_meta.json"), &meta)?;
    let hits = rows.iter().filter(|r| r.hit).count();
    println!(
        "top-{} for patient {patient}: {hits} of {} held-out diseases recovered; report at {}",
        rows.len(),
        dataset.test_positives(dataset.patient_index(patient).expect("validated")).len(),
        path.display()
    );
    Ok(())
}

fn cmd_analyze(
    file: &ConfigFile,
    out_dir: &Path,
    data: &Path,
    checkpoint_path: &Path,
    data_args: DataArgs,
    top: Option<usize>,
) -> Result<(), CliError> {
    let top = file
        .resolve(top, "top", 50usize)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (state, provenance, opts, dataset) =
        load_checkpoint_for(checkpoint_path, data, file, &data_args)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))
        .map_err(CliError::Runtime)?;

    let graph = PropagationGraph::from_interactions(&dataset.train);
    let embeddings = final_embeddings(&forward_eval(&state, &graph).map_err(CliError::from)?);
    let full = dataset.full_matrix();
    let disease_block = embeddings
        .matrix()
        .slice(ndarray::s![dataset.num_patients().., ..]);
    let records = discrepancy_rank(&full, &dataset.disease_codes, &disease_block, top)
        .map_err(CliError::from)?;
    write_discrepancy_csv(&records, &out_dir.join("discrepancy.csv")).map_err(CliError::from)?;
    let exported = export_embeddings(
        &embeddings,
        &dataset,
        NodeKindFilter::All,
        &out_dir.join("embeddings.csv"),
    )
    .map_err(CliError::from)?;

    let meta = serde_json::json!({
        "command": "analyze",
        "top": top,
        "records": records.len(),
        "embeddings_exported": exported,
        "low_support_threshold": cldd_core::analysis::LOW_SUPPORT_THRESHOLD,
        "data_options": opts,
        "checkpoint_provenance": provenance,
    });
    write_json(&out_dir.join("analyze_meta.json"), &meta)?;
    println!(
        "wrote {} discrepancy pairs and {exported} embedding rows into {}",
        records.len(),
        out_dir.display()
    );
    Ok(())
}
