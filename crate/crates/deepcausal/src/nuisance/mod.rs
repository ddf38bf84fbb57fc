//! Nuisance models: outcome regressions μ̂(w,·) and the propensity score
//! ê(·), with regularized-linear and neural implementations behind one
//! interface, plus test-set evaluation metrics and the CSV prediction
//! contract consumed by the estimators.

pub mod elastic_net;
pub mod logistic;

use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{loan_sequence, loan_vector, EmbeddingTable};
use crate::ingest::{Dataset, Split};
use crate::neural::{
    sigmoid, train, Arch, DatasetView, Sample, Target, TextInput, TrainConfig, TrainError,
};

pub use elastic_net::{fit_elastic_net, lambda_grid, lambda_max, soft_threshold};
pub use logistic::{clip_probability, fit_logistic_elastic_net, predict_probabilities};

#[derive(Debug, Error)]
pub enum NuisanceError {
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("treatment vector has a single class")]
    SingleClass,
    #[error("no convergence after {max_iters} iterations")]
    NoConvergence {
        max_iters: usize,
        /// Best coefficients reached, flagged for inspection.
        partial: Box<LinearFit>,
    },
    #[error("text features required for this model kind but not provided")]
    MissingTextFeatures,
    #[error("requested split contains no units")]
    EmptySplit,
    #[error("predictions and dataset disagree: {0}")]
    Mismatch(String),
    #[error("neural training failed: {0}")]
    Train(#[from] TrainError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad prediction record: {0}")]
    BadRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    Identity,
    Logistic,
}

/// A fitted (possibly penalized) linear model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearFit {
    pub coefficients: Array1<f64>,
    pub intercept: f64,
    pub lambda: f64,
    /// Elastic-net mixing in [0, 1]: 1 = lasso, 0 = ridge.
    pub alpha: f64,
    pub link: Link,
}

impl LinearFit {
    /// Linear predictor `β₀ + x·β` for every row.
    pub fn linear_predictor(&self, x: &ArrayView2<f64>) -> Array1<f64> {
        Array1::from_iter((0..x.nrows()).map(|i| self.intercept + x.row(i).dot(&self.coefficients)))
    }

    /// Indices of nonzero coefficients (the selected support).
    pub fn support(&self) -> Vec<usize> {
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    Linear,
    Mlp,
    Lstm,
}

impl fmt::Display for NuisanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NuisanceKind::Linear => "linear",
            NuisanceKind::Mlp => "mlp",
            NuisanceKind::Lstm => "lstm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    WithText,
    WithoutText,
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::WithText => "with_text",
            FeatureMode::WithoutText => "without_text",
        })
    }
}

/// Precomputed text inputs for every unit of a dataset, in record order.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub dim: usize,
    /// n x dim averaged word vectors.
    pub vectors: Array2<f64>,
    /// Per-unit ordered word-vector sequences, truncated.
    pub sequences: Vec<Vec<Array1<f64>>>,
}

/// Builds averaged vectors and sequences for every record.
pub fn build_text_features(
    dataset: &Dataset,
    table: &EmbeddingTable,
    max_len: usize,
) -> TextFeatures {
    let n = dataset.n();
    let dim = table.dim();
    let mut vectors = Array2::<f64>::zeros((n, dim));
    let mut sequences = Vec::with_capacity(n);
    for (i, record) in dataset.records.iter().enumerate() {
        let lv = loan_vector(&record.tokens, table);
        vectors.row_mut(i).assign(&lv.values);
        sequences.push(loan_sequence(&record.tokens, table, max_len));
    }
    TextFeatures {
        dim,
        vectors,
        sequences,
    }
}

/// Penalty-strength policy for the linear models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSelection {
    Fixed(f64),
    /// 5-fold cross-validation over a 50-point log grid.
    CrossValidated,
}

pub const CV_FOLDS: usize = 5;
pub const CV_GRID_SIZE: usize = 50;

/// Configuration shared by all nuisance fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda: LambdaSelection,
    /// Elastic-net mixing for the linear kind.
    pub alpha: f64,
    /// Neural training hyperparameters (ignored by the linear kind).
    pub train: TrainConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda: LambdaSelection::CrossValidated,
            alpha: 0.5,
            train: TrainConfig::default(),
        }
    }
}

/// Provenance of a prediction set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTags {
    pub kind: String,
    pub features: String,
}

/// Per-unit nuisance predictions for the whole dataset, in record order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisancePredictions {
    pub unit_id: Vec<u64>,
    pub w: Vec<u8>,
    pub y: Vec<f64>,
    /// μ̂(1, Xᵢ)
    pub mu1: Array1<f64>,
    /// μ̂(0, Xᵢ)
    pub mu0: Array1<f64>,
    /// ê(Xᵢ), strictly inside (0, 1)
    pub e: Array1<f64>,
    pub tags: ModelTags,
}

impl NuisancePredictions {
    pub fn new(
        unit_id: Vec<u64>,
        w: Vec<u8>,
        y: Vec<f64>,
        mu1: Array1<f64>,
        mu0: Array1<f64>,
        e: Array1<f64>,
        tags: ModelTags,
    ) -> Self {
        let n = unit_id.len();
        assert!(
            w.len() == n && y.len() == n && mu1.len() == n && mu0.len() == n && e.len() == n,
            "prediction vectors disagree on length"
        );
        assert!(
            e.iter().all(|&p| p > 0.0 && p < 1.0),
            "propensity predictions must lie strictly inside (0, 1)"
        );
        NuisancePredictions {
            unit_id,
            w,
            y,
            mu1,
            mu0,
            e,
            tags,
        }
    }

    pub fn len(&self) -> usize {
        self.unit_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_id.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Cross-validation for the penalty strength
// ---------------------------------------------------------------------------

fn cv_folds(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    // fold[i] is the fold of row i.
    let k = CV_FOLDS.min(n);
    let mut fold = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

fn take_rows(x: &ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Selects λ for the linear elastic net by K-fold cross-validation on
/// held-out squared error, sweeping a warm-started path from λ_max down.
/// Ties resolve to the larger (more regularized) λ.
pub fn select_lambda_linear(
    x: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    alpha: f64,
    seed: u64,
) -> f64 {
    let n = x.nrows();
    let lmax = lambda_max(x, y, alpha).max(1e-10);
    let grid = lambda_grid(lmax, CV_GRID_SIZE);
    let fold = cv_folds(n, seed);
    let k = CV_FOLDS.min(n);
    let mut errors = vec![0.0f64; grid.len()];
    for f in 0..k {
        let train_rows: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let val_rows: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        if train_rows.is_empty() || val_rows.is_empty() {
            continue;
        }
        let xt = take_rows(x, &train_rows);
        let yt = Array1::from_iter(train_rows.iter().map(|&i| y[i]));
        let mut warm: Option<(f64, Array1<f64>)> = None;
        for (g, &lam) in grid.iter().enumerate() {
            let result =
                elastic_net::coordinate_descent(&xt.view(), &yt.view(), lam, alpha, warm.take());
            for &i in &val_rows {
                let pred = result.intercept + x.row(i).dot(&result.beta);
                errors[g] += (y[i] - pred).powi(2);
            }
            warm = Some((result.intercept, result.beta));
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        if errors[g] < errors[best] {
            best = g;
        }
    }
    grid[best]
}

/// Selects λ for the logistic elastic net by K-fold cross-validation on
/// held-out deviance.
pub fn select_lambda_logistic(x: &ArrayView2<f64>, w: &[u8], alpha: f64, seed: u64) -> f64 {
    let n = x.nrows();
    let wf = Array1::from_iter(w.iter().map(|&v| f64::from(v)));
    let lmax = lambda_max(x, &wf.view(), alpha).max(1e-10);
    let grid = lambda_grid(lmax, CV_GRID_SIZE);
    let fold = cv_folds(n, seed);
    let k = CV_FOLDS.min(n);
    let mut errors = vec![0.0f64; grid.len()];
    for f in 0..k {
        let train_rows: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let val_rows: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let wt: Vec<u8> = train_rows.iter().map(|&i| w[i]).collect();
        if wt.iter().all(|&v| v == wt[0]) {
            continue;
        }
        let xt = take_rows(x, &train_rows);
        let mut warm: Option<(f64, Array1<f64>)> = None;
        for (g, &lam) in grid.iter().enumerate() {
            let fit = match logistic::fit_logistic_warm(&xt.view(), &wt, lam, alpha, warm.take()) {
                Ok(fit) => fit,
                Err(NuisanceError::NoConvergence { partial, .. }) => *partial,
                Err(_) => continue,
            };
            for &i in &val_rows {
                let eta = fit.intercept + x.row(i).dot(&fit.coefficients);
                let p = clip_probability(sigmoid(eta));
                errors[g] -= f64::from(w[i]) * p.ln() + (1.0 - f64::from(w[i])) * (1.0 - p).ln();
            }
            warm = Some((fit.intercept, fit.coefficients));
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        if errors[g] < errors[best] {
            best = g;
        }
    }
    grid[best]
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

use ndarray::ArrayView1;

/// Design matrix for the linear kind: the 17 covariates, with the
/// averaged word vectors appended in with-text mode.
fn linear_design(
    dataset: &Dataset,
    features: FeatureMode,
    text: Option<&TextFeatures>,
) -> Result<Array2<f64>, NuisanceError> {
    match features {
        FeatureMode::WithoutText => Ok(dataset.x.clone()),
        FeatureMode::WithText => {
            let text = text.ok_or(NuisanceError::MissingTextFeatures)?;
            let n = dataset.n();
            let p = dataset.x.ncols() + text.dim;
            let mut design = Array2::<f64>::zeros((n, p));
            design
                .slice_mut(ndarray::s![.., ..dataset.x.ncols()])
                .assign(&dataset.x);
            design
                .slice_mut(ndarray::s![.., dataset.x.ncols()..])
                .assign(&text.vectors);
            Ok(design)
        }
    }
}

fn resolve_lambda_linear(
    cfg: &FitConfig,
    x: &ArrayView2<f64>,
    y: &ArrayView1<f64>,
    seed: u64,
) -> f64 {
    match cfg.lambda {
        LambdaSelection::Fixed(l) => l,
        LambdaSelection::CrossValidated => select_lambda_linear(x, y, cfg.alpha, seed),
    }
}

/// The fitted model objects behind a prediction set, for persistence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum NuisanceModels {
    Linear {
        mu1: LinearFit,
        mu0: LinearFit,
        e: LinearFit,
    },
    Neural {
        mu1: Box<crate::neural::FittedModel>,
        mu0: Box<crate::neural::FittedModel>,
        e: Box<crate::neural::FittedModel>,
    },
}

fn fit_nuisances_linear(
    dataset: &Dataset,
    features: FeatureMode,
    text: Option<&TextFeatures>,
    cfg: &FitConfig,
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>, NuisanceModels), NuisanceError> {
    let design = linear_design(dataset, features, text)?;
    let train_rows = dataset.indices_in(Split::Train);
    if train_rows.is_empty() {
        return Err(NuisanceError::EmptySplit);
    }
    let treated: Vec<usize> = train_rows.iter().copied().filter(|&i| dataset.w[i] == 1).collect();
    let control: Vec<usize> = train_rows.iter().copied().filter(|&i| dataset.w[i] == 0).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(NuisanceError::SingleClass);
    }

    let fit_arm = |rows: &[usize], seed: u64| -> Result<LinearFit, NuisanceError> {
        let xa = design.select(Axis(0), rows);
        let ya = Array1::from_iter(rows.iter().map(|&i| dataset.y[i]));
        let lam = resolve_lambda_linear(cfg, &xa.view(), &ya.view(), seed);
        fit_elastic_net(&xa.view(), &ya.view(), lam, cfg.alpha)
    };

    let seed = cfg.train.seed;
    let (mu_fits, e_fit) = rayon::join(
        || rayon::join(|| fit_arm(&treated, seed), || fit_arm(&control, seed.wrapping_add(1))),
        || -> Result<LinearFit, NuisanceError> {
            let xt = design.select(Axis(0), &train_rows);
            let wt: Vec<u8> = train_rows.iter().map(|&i| dataset.w[i]).collect();
            let lam = match cfg.lambda {
                LambdaSelection::Fixed(l) => l,
                LambdaSelection::CrossValidated => {
                    select_lambda_logistic(&xt.view(), &wt, cfg.alpha, seed.wrapping_add(2))
                }
            };
            fit_logistic_elastic_net(&xt.view(), &wt, lam, cfg.alpha)
        },
    );
    let (fit1, fit0) = (mu_fits.0?, mu_fits.1?);
    let fit_e = e_fit?;

    let mu1 = fit1.linear_predictor(&design.view());
    let mu0 = fit0.linear_predictor(&design.view());
    let e = predict_probabilities(&fit_e, &design.view());
    let models = NuisanceModels::Linear {
        mu1: fit1,
        mu0: fit0,
        e: fit_e,
    };
    Ok((mu1, mu0, e, models))
}

/// Per-unit text input for the given kind and feature mode. Without-text
/// mode feeds an all-zero text input so only the covariate branch carries
/// signal.
fn text_input(
    kind: NuisanceKind,
    features: FeatureMode,
    text: Option<&TextFeatures>,
    i: usize,
) -> Result<TextInput, NuisanceError> {
    match (kind, features) {
        (NuisanceKind::Mlp, FeatureMode::WithText) => {
            let text = text.ok_or(NuisanceError::MissingTextFeatures)?;
            Ok(TextInput::Vector(text.vectors.row(i).to_owned()))
        }
        (NuisanceKind::Mlp, FeatureMode::WithoutText) => Ok(TextInput::Vector(Array1::zeros(1))),
        (NuisanceKind::Lstm, FeatureMode::WithText) => {
            let text = text.ok_or(NuisanceError::MissingTextFeatures)?;
            Ok(TextInput::Sequence(text.sequences[i].clone()))
        }
        (NuisanceKind::Lstm, FeatureMode::WithoutText) => Ok(TextInput::Sequence(Vec::new())),
        (NuisanceKind::Linear, _) => unreachable!("linear kind has no text input"),
    }
}

fn neural_text_dim(features: FeatureMode, text: Option<&TextFeatures>) -> Result<usize, NuisanceError> {
    match features {
        FeatureMode::WithText => Ok(text.ok_or(NuisanceError::MissingTextFeatures)?.dim),
        FeatureMode::WithoutText => Ok(1),
    }
}

fn neural_samples(
    kind: NuisanceKind,
    dataset: &Dataset,
    features: FeatureMode,
    text: Option<&TextFeatures>,
    rows: &[usize],
    target: impl Fn(usize) -> Target,
) -> Result<Vec<Sample>, NuisanceError> {
    rows.iter()
        .map(|&i| {
            Ok(Sample {
                text: text_input(kind, features, text, i)?,
                cov: dataset.x.row(i).to_owned(),
                target: target(i),
            })
        })
        .collect()
}

fn fit_nuisances_neural(
    kind: NuisanceKind,
    dataset: &Dataset,
    features: FeatureMode,
    text: Option<&TextFeatures>,
    cfg: &FitConfig,
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>, NuisanceModels), NuisanceError> {
    let text_dim = neural_text_dim(features, text)?;
    let cov_dim = dataset.x.ncols();
    let (arch_outcome, arch_prop) = match kind {
        NuisanceKind::Mlp => (
            Arch::mlp_outcome(text_dim, cov_dim),
            Arch::mlp_propensity(text_dim, cov_dim),
        ),
        NuisanceKind::Lstm => (
            Arch::lstm_outcome(text_dim, cov_dim),
            Arch::lstm_propensity(text_dim, cov_dim),
        ),
        NuisanceKind::Linear => unreachable!(),
    };

    let train_rows = dataset.indices_in(Split::Train);
    let val_rows = dataset.indices_in(Split::Validation);
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(NuisanceError::EmptySplit);
    }
    let arm = |rows: &[usize], w: u8| -> Vec<usize> {
        rows.iter().copied().filter(|&i| dataset.w[i] == w).collect()
    };
    let (t_tr, t_va) = (arm(&train_rows, 1), arm(&val_rows, 1));
    let (c_tr, c_va) = (arm(&train_rows, 0), arm(&val_rows, 0));
    if t_tr.is_empty() || c_tr.is_empty() || t_va.is_empty() || c_va.is_empty() {
        return Err(NuisanceError::SingleClass);
    }

    let outcome_target = |i: usize| Target::Value(dataset.y[i]);
    let class_target = |i: usize| Target::Class(usize::from(dataset.w[i]));

    let fit_one = |arch: &Arch,
                   tr: &[usize],
                   va: &[usize],
                   target: &dyn Fn(usize) -> Target,
                   seed: u64|
     -> Result<crate::neural::FittedModel, NuisanceError> {
        let train_samples = neural_samples(kind, dataset, features, text, tr, target)?;
        let val_samples = neural_samples(kind, dataset, features, text, va, target)?;
        let view = DatasetView {
            train: &train_samples,
            validation: &val_samples,
        };
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        Ok(train(arch, &view, &tc)?)
    };

    let seed = cfg.train.seed;
    let (mu_nets, e_net) = rayon::join(
        || {
            rayon::join(
                || fit_one(&arch_outcome, &t_tr, &t_va, &outcome_target, seed),
                || fit_one(&arch_outcome, &c_tr, &c_va, &outcome_target, seed.wrapping_add(1)),
            )
        },
        || fit_one(&arch_prop, &train_rows, &val_rows, &class_target, seed.wrapping_add(2)),
    );
    let (model1, model0) = (mu_nets.0?, mu_nets.1?);
    let model_e = e_net?;

    let n = dataset.n();
    let mut mu1 = Array1::<f64>::zeros(n);
    let mut mu0 = Array1::<f64>::zeros(n);
    let mut e = Array1::<f64>::zeros(n);
    for i in 0..n {
        let ti = text_input(kind, features, text, i)?;
        let cov = dataset.x.row(i).to_owned();
        mu1[i] = model1.network.predict(&ti, &cov)[0];
        mu0[i] = model0.network.predict(&ti, &cov)[0];
        e[i] = clip_probability(model_e.network.predict(&ti, &cov)[1]);
    }
    let models = NuisanceModels::Neural {
        mu1: Box::new(model1),
        mu0: Box::new(model0),
        e: Box::new(model_e),
    };
    Ok((mu1, mu0, e, models))
}

/// Fits μ̂(1,·) on treated training units, μ̂(0,·) on control training
/// units, and ê(·) on all training units, then predicts every unit in
/// the dataset. Propensities are clipped strictly inside (0, 1).
pub fn fit_nuisances(
    kind: NuisanceKind,
    dataset: &Dataset,
    features: FeatureMode,
    text: Option<&TextFeatures>,
    cfg: &FitConfig,
) -> Result<NuisancePredictions, NuisanceError> {
    fit_nuisances_full(kind, dataset, features, text, cfg).map(|(preds, _)| preds)
}

/// As `fit_nuisances`, additionally returning the fitted model objects.
pub fn fit_nuisances_full(
    kind: NuisanceKind,
    dataset: &Dataset,
    features: FeatureMode,
    text: Option<&TextFeatures>,
    cfg: &FitConfig,
) -> Result<(NuisancePredictions, NuisanceModels), NuisanceError> {
    let (mu1, mu0, e, models) = match kind {
        NuisanceKind::Linear => fit_nuisances_linear(dataset, features, text, cfg)?,
        NuisanceKind::Mlp | NuisanceKind::Lstm => {
            fit_nuisances_neural(kind, dataset, features, text, cfg)?
        }
    };
    let preds = NuisancePredictions::new(
        dataset.records.iter().map(|r| r.id).collect(),
        dataset.w.clone(),
        dataset.y.to_vec(),
        mu1,
        mu0,
        e,
        ModelTags {
            kind: kind.to_string(),
            features: features.to_string(),
        },
    );
    Ok((preds, models))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Test-set quality of a prediction set: propensity classification at
/// threshold 0.5 (treated = positive), and per-arm outcome RMSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub f1: f64,
    pub accuracy: f64,
    /// RMSE of μ̂(1,·) against Y on treated units of the split.
    pub rmse_treated: f64,
    /// RMSE of μ̂(0,·) against Y on control units of the split.
    pub rmse_control: f64,
}

pub const CLASSIFICATION_THRESHOLD: f64 = 0.5;

/// Computes `EvalMetrics` on the given split. F1 is 0 when precision and
/// recall are both undefined or zero; an arm's RMSE is 0 when the split
/// has no units in that arm.
pub fn evaluate(
    predictions: &NuisancePredictions,
    dataset: &Dataset,
    split: Split,
) -> Result<EvalMetrics, NuisanceError> {
    if predictions.len() != dataset.n() {
        return Err(NuisanceError::Mismatch(format!(
            "{} predictions for {} units",
            predictions.len(),
            dataset.n()
        )));
    }
    let rows = dataset.indices_in(split);
    if rows.is_empty() {
        return Err(NuisanceError::EmptySplit);
    }

    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    let (mut sse1, mut n1, mut sse0, mut n0) = (0.0f64, 0usize, 0.0f64, 0usize);
    for &i in &rows {
        let predicted = predictions.e[i] > CLASSIFICATION_THRESHOLD;
        let actual = dataset.w[i] == 1;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
        if actual {
            sse1 += (predictions.mu1[i] - dataset.y[i]).powi(2);
            n1 += 1;
        } else {
            sse0 += (predictions.mu0[i] - dataset.y[i]).powi(2);
            n0 += 1;
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let accuracy = (tp + tn) as f64 / rows.len() as f64;
    let rmse_treated = if n1 > 0 { (sse1 / n1 as f64).sqrt() } else { 0.0 };
    let rmse_control = if n0 > 0 { (sse0 / n0 as f64).sqrt() } else { 0.0 };
    Ok(EvalMetrics {
        f1,
        accuracy,
        rmse_treated,
        rmse_control,
    })
}

// ---------------------------------------------------------------------------
// CSV contract
// ---------------------------------------------------------------------------

/// Writes the prediction contract: `unit_id,w,y,mu1,mu0,e`.
pub fn write_predictions_csv(
    predictions: &NuisancePredictions,
    path: &Path,
) -> Result<(), NuisanceError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["unit_id", "w", "y", "mu1", "mu0", "e"])?;
    for i in 0..predictions.len() {
        writer.write_record([
            predictions.unit_id[i].to_string(),
            predictions.w[i].to_string(),
            predictions.y[i].to_string(),
            predictions.mu1[i].to_string(),
            predictions.mu0[i].to_string(),
            predictions.e[i].to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a prediction contract written by `write_predictions_csv` (or by
/// an external tool following the same format).
pub fn read_predictions_csv(path: &Path) -> Result<NuisancePredictions, NuisanceError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["unit_id", "w", "y", "mu1", "mu0", "e"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(NuisanceError::BadRecord(format!(
            "unexpected header: {headers:?}"
        )));
    }
    let mut unit_id = Vec::new();
    let mut w = Vec::new();
    let mut y = Vec::new();
    let mut mu1 = Vec::new();
    let mut mu0 = Vec::new();
    let mut e = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |k: usize| -> &str { record.get(k).unwrap_or("") };
        let parse_f = |k: usize| -> Result<f64, NuisanceError> {
            field(k)
                .parse::<f64>()
                .map_err(|_| NuisanceError::BadRecord(format!("line {}: bad float", line + 2)))
        };
        unit_id.push(
            field(0)
                .parse::<u64>()
                .map_err(|_| NuisanceError::BadRecord(format!("line {}: bad id", line + 2)))?,
        );
        let wi = field(1)
            .parse::<u8>()
            .map_err(|_| NuisanceError::BadRecord(format!("line {}: bad w", line + 2)))?;
        if wi > 1 {
            return Err(NuisanceError::BadRecord(format!(
                "line {}: w must be 0 or 1",
                line + 2
            )));
        }
        w.push(wi);
        y.push(parse_f(2)?);
        mu1.push(parse_f(3)?);
        mu0.push(parse_f(4)?);
        let ei = parse_f(5)?;
        if !(ei > 0.0 && ei < 1.0) {
            return Err(NuisanceError::BadRecord(format!(
                "line {}: e must lie in (0, 1)",
                line + 2
            )));
        }
        e.push(ei);
    }
    Ok(NuisancePredictions::new(
        unit_id,
        w,
        y,
        Array1::from_vec(mu1),
        Array1::from_vec(mu0),
        Array1::from_vec(e),
        ModelTags {
            kind: "external".to_string(),
            features: "external".to_string(),
        },
    ))
}
