//! Command-line front end: `ingest`, `embed`, `fit`, `estimate`,
//! `report`, and `bench` subcommands over a JSON run configuration.
//! Every artifact embeds (directly or via a `.meta.json` sidecar for
//! CSVs) the SHA-256 hash of the configuration that produced it, and
//! identical config + inputs produce byte-identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embed::{load_embeddings, EmbedError};
use crate::estimators::{
    baseline_ate, dre_ate, dse_ate, naive_ate, ols_fit, relatedness_report, tmle_ate, AteEstimate,
    EstimatorError, Method,
};
use crate::ingest::{build_dataset, parse_loan_value, transform, Dataset, IngestError};
use crate::neural::TrainConfig;
use crate::nuisance::{
    build_text_features, evaluate, fit_nuisances_full, read_predictions_csv,
    write_predictions_csv, FeatureMode, FitConfig, LambdaSelection, NuisanceError, NuisanceKind,
    NuisancePredictions, TextFeatures,
};
use crate::synthbench::{
    run_bench, write_bench_csv, DgpConfig, EstimatorSpec, SynthError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("every input record was filtered out; see {0}")]
    AllFiltered(String),
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("embed: {0}")]
    Embed(#[from] EmbedError),
    #[error("nuisance: {0}")]
    Nuisance(#[from] NuisanceError),
    #[error("estimators: {0}")]
    Estimator(#[from] EstimatorError),
    #[error("synthbench: {0}")]
    Synth(#[from] SynthError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn default_workspace() -> PathBuf {
    PathBuf::from("workspace")
}
fn default_split() -> (f64, f64, f64) {
    (0.7, 0.15, 0.15)
}
fn default_features() -> FeatureMode {
    FeatureMode::WithoutText
}
fn default_nuisance() -> NuisanceKind {
    NuisanceKind::Linear
}
fn default_methods() -> Vec<Method> {
    vec![Method::Naive, Method::Baseline, Method::Dse, Method::Dre, Method::Tmle]
}
fn default_trim() -> (f64, f64) {
    crate::estimators::DEFAULT_TRIM
}
fn default_embedding_dim() -> usize {
    100
}
fn default_max_seq_len() -> usize {
    crate::embed::DEFAULT_MAX_SEQ_LEN
}
fn default_alpha() -> f64 {
    0.5
}
fn default_lambda() -> LambdaSelection {
    LambdaSelection::CrossValidated
}

/// Benchmark section of the run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dgp: DgpConfig,
    pub method: Method,
    pub replications: usize,
}

/// The JSON run configuration. Flags override file values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Newline-delimited JSON loan records (or one object with "loans").
    #[serde(default)]
    pub raw_data: Option<PathBuf>,
    /// Pretrained word-vector file: token then components per line.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default = "default_workspace")]
    pub workspace: PathBuf,
    #[serde(default = "default_split")]
    pub split_fractions: (f64, f64, f64),
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_features")]
    pub features: FeatureMode,
    #[serde(default = "default_nuisance")]
    pub nuisance: NuisanceKind,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_trim")]
    pub trim: (f64, f64),
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda: LambdaSelection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let (lo, hi) = self.trim;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(CliError::ConfigInvalid(format!(
                "trim bounds ({lo}, {hi}) must satisfy 0 < lo < hi < 1"
            )));
        }
        let (a, b, c) = self.split_fractions;
        if ((a + b + c) - 1.0).abs() > 1e-9 || a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(CliError::ConfigInvalid(
                "split_fractions must be positive and sum to 1".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CliError::ConfigInvalid("alpha must be in [0, 1]".to_string()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialized configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            train: self.train.clone(),
        }
    }

    fn dataset_path(&self) -> PathBuf {
        self.workspace.join("dataset").join("dataset.json")
    }
    fn predictions_path(&self) -> PathBuf {
        self.workspace
            .join("predictions")
            .join(format!("nuisance_{}_{}.csv", self.nuisance, self.features))
    }
    fn reports_dir(&self) -> PathBuf {
        self.workspace.join("reports")
    }
}

#[derive(Debug, Parser)]
#[command(name = "deepcausal", about = "Causal ATE pipeline for crowdfunding loans")]
pub struct Cli {
    /// JSON run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the feature mode: with_text | without_text.
    #[arg(long)]
    pub features: Option<String>,
    /// Overrides the nuisance kind: linear | mlp | lstm.
    #[arg(long)]
    pub nuisance: Option<String>,
    /// Comma-separated estimator list, e.g. "naive,dre,tmle".
    #[arg(long)]
    pub methods: Option<String>,
    /// Propensity trimming bounds "lo,hi".
    #[arg(long)]
    pub trim: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Parse, clean, and assemble the dataset from raw loan JSON.
    Ingest,
    /// Compute averaged loan vectors from pretrained embeddings.
    Embed,
    /// Fit nuisance models and write the prediction contract.
    Fit,
    /// Run the configured estimators over existing predictions.
    Estimate,
    /// Descriptive statistics, per-arm OLS, and relatedness counts.
    Report,
    /// Synthetic-ground-truth benchmark.
    Bench,
}

fn parse_features(s: &str) -> Result<FeatureMode, CliError> {
    match s {
        "with_text" => Ok(FeatureMode::WithText),
        "without_text" => Ok(FeatureMode::WithoutText),
        other => Err(CliError::ConfigInvalid(format!("unknown feature mode: {other}"))),
    }
}

fn parse_nuisance(s: &str) -> Result<NuisanceKind, CliError> {
    match s {
        "linear" => Ok(NuisanceKind::Linear),
        "mlp" => Ok(NuisanceKind::Mlp),
        "lstm" => Ok(NuisanceKind::Lstm),
        other => Err(CliError::ConfigInvalid(format!("unknown nuisance kind: {other}"))),
    }
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    match s {
        "naive" => Ok(Method::Naive),
        "baseline" => Ok(Method::Baseline),
        "dse" => Ok(Method::Dse),
        "dre" => Ok(Method::Dre),
        "tmle" => Ok(Method::Tmle),
        other => Err(CliError::ConfigInvalid(format!("unknown method: {other}"))),
    }
}

/// Loads the config file (or defaults) and applies flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config: RunConfig = match &cli.config {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(path)
                .map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?,
        )?,
        None => serde_json::from_str("{}")?,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    if let Some(f) = &cli.features {
        config.features = parse_features(f)?;
    }
    if let Some(k) = &cli.nuisance {
        config.nuisance = parse_nuisance(k)?;
    }
    if let Some(m) = &cli.methods {
        config.methods = m
            .split(',')
            .map(|s| parse_method(s.trim()))
            .collect::<Result<_, _>>()?;
    }
    if let Some(t) = &cli.trim {
        let parts: Vec<&str> = t.split(',').collect();
        let parsed: Option<(f64, f64)> = match parts.as_slice() {
            [lo, hi] => lo.trim().parse().ok().zip(hi.trim().parse().ok()),
            _ => None,
        };
        config.trim =
            parsed.ok_or_else(|| CliError::ConfigInvalid(format!("bad --trim value: {t}")))?;
    }
    config.validate()?;
    Ok(config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Sidecar metadata for CSV artifacts (whose column contract is fixed).
fn write_meta(path: &Path, config_hash: &str) -> Result<(), CliError> {
    let meta_path = path.with_extension("meta.json");
    write_json(
        &meta_path,
        &serde_json::json!({ "config_hash": config_hash }),
    )
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct IngestSummary {
    config_hash: String,
    n_input: usize,
    n_parse_failures: usize,
    n_retained: usize,
    filter_reasons: BTreeMap<String, usize>,
}

fn read_raw_values(path: &Path) -> Result<Vec<serde_json::Value>, CliError> {
    let content = fs::read_to_string(path)
        .map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
    // A single object with a "loans" array, or newline-delimited objects.
    if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(&content) {
        if let Some(serde_json::Value::Array(loans)) = map.get("loans") {
            return Ok(loans.clone());
        }
        return Ok(vec![serde_json::Value::Object(map)]);
    }
    let mut values = Vec::new();
    for line in content.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        values.push(
            serde_json::from_str(line).unwrap_or(serde_json::Value::Null),
        );
    }
    Ok(values)
}

fn cmd_ingest(config: &RunConfig) -> Result<(), CliError> {
    let raw_path = config
        .raw_data
        .as_ref()
        .ok_or_else(|| CliError::ConfigInvalid("raw_data path required for ingest".to_string()))?;
    let values = read_raw_values(raw_path)?;

    let mut n_parse_failures = 0usize;
    let mut filter_reasons: BTreeMap<String, usize> = BTreeMap::new();
    let mut records = Vec::new();
    for value in &values {
        match parse_loan_value(value) {
            Ok(raw) => match transform(&raw) {
                Ok(record) => records.push(record),
                Err(reason) => {
                    *filter_reasons.entry(reason.to_string()).or_insert(0) += 1;
                }
            },
            Err(_) => n_parse_failures += 1,
        }
    }

    let summary = IngestSummary {
        config_hash: config.hash(),
        n_input: values.len(),
        n_parse_failures,
        n_retained: records.len(),
        filter_reasons,
    };
    let summary_path = config.reports_dir().join("ingest_summary.json");
    write_json(&summary_path, &summary)?;

    if records.is_empty() {
        // Still write the (empty) dataset so downstream tooling sees a
        // consistent artifact, then fail the command.
        let empty = Dataset {
            records: Vec::new(),
            x: ndarray::Array2::zeros((0, crate::ingest::N_COVARIATES)),
            y: Array1::zeros(0),
            w: Vec::new(),
            split: Vec::new(),
            normalization: (0.0, 1.0),
            split_seed: config.seed,
        };
        write_json(&config.dataset_path(), &empty)?;
        return Err(CliError::AllFiltered(summary_path.display().to_string()));
    }
    let dataset = build_dataset(records, config.split_fractions, config.seed)?;
    write_json(&config.dataset_path(), &dataset)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

fn load_dataset(config: &RunConfig) -> Result<Dataset, CliError> {
    let path = config.dataset_path();
    let content = fs::read_to_string(&path)
        .map_err(|e| CliError::MissingInput(format!("{} (run ingest first): {e}", path.display())))?;
    Ok(serde_json::from_str(&content)?)
}

fn load_text_features(config: &RunConfig, dataset: &Dataset) -> Result<TextFeatures, CliError> {
    let path = config.embeddings.as_ref().ok_or_else(|| {
        CliError::ConfigInvalid("embeddings path required for with_text mode".to_string())
    })?;
    let table = load_embeddings(path, config.embedding_dim)?;
    Ok(build_text_features(dataset, &table, config.max_seq_len))
}

fn cmd_embed(config: &RunConfig) -> Result<(), CliError> {
    let dataset = load_dataset(config)?;
    let features = load_text_features(config, &dataset)?;
    let out = config.workspace.join("embeddings").join("loan_vectors.csv");
    fs::create_dir_all(out.parent().expect("has parent"))?;
    let mut writer = csv::Writer::from_path(&out)
        .map_err(|e| CliError::Io(std::io::Error::new(std::io::ErrorKind::Other, e)))?;
    let mut header = vec!["unit_id".to_string()];
    header.extend((0..features.dim).map(|j| format!("v{j}")));
    let io_err = |e: csv::Error| CliError::Io(std::io::Error::new(std::io::ErrorKind::Other, e));
    writer.write_record(&header).map_err(io_err)?;
    for (i, record) in dataset.records.iter().enumerate() {
        let mut row = vec![record.id.to_string()];
        row.extend((0..features.dim).map(|j| features.vectors[[i, j]].to_string()));
        writer.write_record(&row).map_err(io_err)?;
    }
    writer.flush()?;
    write_meta(&out, &config.hash())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn cmd_fit(config: &RunConfig) -> Result<(), CliError> {
    let dataset = load_dataset(config)?;
    let text = match (config.features, config.nuisance) {
        (FeatureMode::WithText, _) => Some(load_text_features(config, &dataset)?),
        (FeatureMode::WithoutText, _) => None,
    };
    let (preds, models) = fit_nuisances_full(
        config.nuisance,
        &dataset,
        config.features,
        text.as_ref(),
        &config.fit_config(),
    )?;

    let pred_path = config.predictions_path();
    fs::create_dir_all(pred_path.parent().expect("has parent"))?;
    write_predictions_csv(&preds, &pred_path)?;
    write_meta(&pred_path, &config.hash())?;

    let model_path = config
        .workspace
        .join("models")
        .join(format!("nuisance_{}_{}.json", config.nuisance, config.features));
    write_json(
        &model_path,
        &serde_json::json!({ "config_hash": config.hash(), "models": models }),
    )?;

    let metrics = evaluate(&preds, &dataset, crate::ingest::Split::Test)?;
    let metrics_path = config
        .reports_dir()
        .join(format!("metrics_{}_{}.json", config.nuisance, config.features));
    write_json(
        &metrics_path,
        &serde_json::json!({
            "config_hash": config.hash(),
            "nuisance": config.nuisance,
            "features": config.features,
            "metrics": metrics,
        }),
    )
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

fn run_method(
    method: Method,
    config: &RunConfig,
    preds: &NuisancePredictions,
    dataset: &mut Option<Dataset>,
    text: &mut Option<TextFeatures>,
) -> Result<AteEstimate, CliError> {
    match method {
        Method::Naive => {
            let y = Array1::from_vec(preds.y.clone());
            Ok(naive_ate(&y.view(), &preds.w)?)
        }
        Method::Baseline => Ok(baseline_ate(preds)?),
        Method::Dre => Ok(dre_ate(preds, config.trim)?),
        Method::Tmle => Ok(tmle_ate(preds, config.trim)?),
        Method::Dse => {
            if dataset.is_none() {
                *dataset = Some(load_dataset(config)?);
            }
            let ds = dataset.as_ref().expect("just loaded");
            if config.features == FeatureMode::WithText && text.is_none() {
                *text = Some(load_text_features(config, ds)?);
            }
            // DSE's lasso steps fix the mixing at 1 internally.
            Ok(dse_ate(ds, config.features, text.as_ref(), config.lambda, config.seed)?)
        }
    }
}

fn cmd_estimate(config: &RunConfig) -> Result<(), CliError> {
    let pred_path = config.predictions_path();
    let preds = read_predictions_csv(&pred_path).map_err(|e| match e {
        NuisanceError::Csv(_) | NuisanceError::Io(_) => CliError::MissingInput(format!(
            "{} (run fit first): {e}",
            pred_path.display()
        )),
        other => CliError::Nuisance(other),
    })?;

    let mut dataset: Option<Dataset> = None;
    let mut text: Option<TextFeatures> = None;
    let mut estimates = Vec::new();
    for &method in &config.methods {
        let est = run_method(method, config, &preds, &mut dataset, &mut text)?;
        estimates.push(est);
    }

    // One row per (method, feature mode, nuisance kind), Table-style.
    let csv_path = config.reports_dir().join("estimates.csv");
    fs::create_dir_all(csv_path.parent().expect("has parent"))?;
    let io_err = |e: csv::Error| CliError::Io(std::io::Error::new(std::io::ErrorKind::Other, e));
    let mut writer = csv::Writer::from_path(&csv_path).map_err(io_err)?;
    writer
        .write_record([
            "method", "features", "nuisance", "tau_hat", "se", "ci_lo", "ci_hi", "n_used",
        ])
        .map_err(io_err)?;
    for est in &estimates {
        writer
            .write_record([
                est.method.to_string(),
                config.features.to_string(),
                config.nuisance.to_string(),
                est.tau_hat.to_string(),
                est.se.to_string(),
                est.ci95.0.to_string(),
                est.ci95.1.to_string(),
                est.n_used.to_string(),
            ])
            .map_err(io_err)?;
    }
    writer.flush()?;
    write_meta(&csv_path, &config.hash())?;

    write_json(
        &config.reports_dir().join("estimates.json"),
        &serde_json::json!({
            "config_hash": config.hash(),
            "features": config.features,
            "nuisance": config.nuisance,
            "estimates": estimates,
        }),
    )
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn cmd_report(config: &RunConfig) -> Result<(), CliError> {
    let dataset = load_dataset(config)?;
    let stats = crate::ingest::descriptive_stats(&dataset)?;

    // Per-arm simple regression of funding time on the raw loan amount.
    let amounts = dataset.destandardized_amounts();
    let arm_ols = |arm: u8| -> Result<serde_json::Value, CliError> {
        let rows: Vec<usize> = (0..dataset.n()).filter(|&i| dataset.w[i] == arm).collect();
        let x = ndarray::Array2::from_shape_vec(
            (rows.len(), 1),
            rows.iter().map(|&i| amounts[i]).collect(),
        )
        .expect("shape matches");
        let y = Array1::from_iter(rows.iter().map(|&i| dataset.y[i]));
        let fit = ols_fit(&x.view(), &y.view())?;
        Ok(serde_json::json!({
            "n": rows.len(),
            "intercept": fit.coefficients[0],
            "slope": fit.coefficients[1],
            "slope_se": fit.standard_errors[1],
            "slope_t": fit.t_stats[1],
            "r_squared": fit.r_squared,
        }))
    };
    let ols_treated = arm_ols(1)?;
    let ols_control = arm_ols(0)?;

    let relatedness = if config.embeddings.is_some() {
        let text = load_text_features(config, &dataset)?;
        Some(relatedness_report(&dataset, &text)?)
    } else {
        None
    };

    write_json(
        &config.reports_dir().join("summary.json"),
        &serde_json::json!({
            "config_hash": config.hash(),
            "descriptive": stats,
            "ols_y_on_amount": { "treated": ols_treated, "control": ols_control },
            "relatedness": relatedness,
        }),
    )
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(config: &RunConfig) -> Result<(), CliError> {
    let bench = config
        .bench
        .as_ref()
        .ok_or_else(|| CliError::ConfigInvalid("bench section required".to_string()))?;
    if bench.replications == 0 {
        return Err(CliError::ConfigInvalid("replications must be >= 1".to_string()));
    }
    let spec = EstimatorSpec {
        method: bench.method,
        kind: config.nuisance,
        features: config.features,
        trim: config.trim,
        fit: config.fit_config(),
    };
    let result = run_bench(&bench.dgp, &spec, bench.replications)?;

    let csv_path = config.reports_dir().join("bench.csv");
    fs::create_dir_all(csv_path.parent().expect("has parent"))?;
    write_bench_csv(&result, &csv_path)?;
    write_meta(&csv_path, &config.hash())?;
    write_json(
        &config.reports_dir().join("bench_summary.json"),
        &serde_json::json!({
            "config_hash": config.hash(),
            "method": bench.method,
            "nuisance": config.nuisance,
            "replications": bench.replications,
            "true_tau": result.true_tau,
            "true_tau_mc_se": result.true_tau_mc_se,
            "bias": result.bias,
            "rmse": result.rmse,
            "coverage": result.coverage,
            "n_failed": result.n_failed,
        }),
    )
}

/// Executes one subcommand against a resolved configuration.
pub fn run(command: Command, config: &RunConfig) -> Result<(), CliError> {
    config.validate()?;
    match command {
        Command::Ingest => cmd_ingest(config),
        Command::Embed => cmd_embed(config),
        Command::Fit => cmd_fit(config),
        Command::Estimate => cmd_estimate(config),
        Command::Report => cmd_report(config),
        Command::Bench => cmd_bench(config),
    }
}
