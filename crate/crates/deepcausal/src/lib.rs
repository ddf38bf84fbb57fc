//! Causal analysis of group-loan formation on crowdfunding funding time.
//!
//! The pipeline turns raw loan records (JSON with free-text descriptions)
//! into a numeric design matrix plus token lists, fits nuisance models
//! (regularized linear or neural) for the outcome regressions and the
//! propensity score, and estimates the average treatment effect with a
//! family of estimators: naive difference in means, regression baseline,
//! double selection, doubly robust (augmented IPW), and targeted maximum
//! likelihood. A synthetic-data benchmark with known ground truth serves
//! as the verification harness.

pub mod cli;
pub mod embed;
pub mod estimators;
pub mod ingest;
pub mod linalg;
pub mod neural;
pub mod nuisance;
pub mod synthbench;

pub use estimators::AteEstimate;
pub use ingest::{Dataset, LoanRecord, RawLoan};
pub use nuisance::NuisancePredictions;
