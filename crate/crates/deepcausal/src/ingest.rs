//! Raw loan parsing, cleaning rules, and dataset assembly.
//!
//! Raw records arrive as newline-delimited JSON, one loan object per line.
//! `parse_loan` extracts the attributes we use, `transform` applies the
//! cleaning rules (drop pre-funded, non-English, borrower-less, and
//! never-funded loans; derive outcome, treatment, gender, risk bearer, and
//! sector dummies), and `build_dataset` assembles the standardized design
//! matrix with deterministic train/validation/test splits.

use chrono::{DateTime, Utc};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

use crate::embed::tokenize;

/// The 15 sector categories, alphabetical. The last one is the dropped
/// reference level, leaving 14 dummy columns.
pub const SECTORS: [&str; 15] = [
    "Agriculture",
    "Arts",
    "Clothing",
    "Construction",
    "Education",
    "Entertainment",
    "Food",
    "Health",
    "Housing",
    "Manufacturing",
    "Personal Use",
    "Retail",
    "Services",
    "Transportation",
    "Wholesale",
];

/// Number of numeric covariates: loan_amount, gender, risker, 14 sector dummies.
pub const N_COVARIATES: usize = 17;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error, PartialEq)]
pub enum ParseFailure {
    #[error("malformed json: {0}")]
    MalformedJson(String),
    #[error("missing required field: {0}")]
    MissingRequiredField(&'static str),
    #[error("invalid value in field {0}: {1}")]
    InvalidField(&'static str, String),
}

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate column: {0} has zero variance")]
    DegenerateColumn(&'static str),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadSplitFractions((f64, f64, f64)),
}

/// Why a raw record was dropped. Filtering is a normal outcome, not an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterReason {
    FundedBeforePosted,
    NoEnglishDescription,
    EmptyDescription,
    NoBorrowers,
    NeverFunded,
}

impl fmt::Display for FilterReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FilterReason::FundedBeforePosted => "funded_before_posted",
            FilterReason::NoEnglishDescription => "no_english_description",
            FilterReason::EmptyDescription => "empty_description",
            FilterReason::NoBorrowers => "no_borrowers",
            FilterReason::NeverFunded => "never_funded",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Borrower {
    pub name: String,
    pub gender: Gender,
}

/// One raw loan as parsed from JSON, before any cleaning.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLoan {
    pub id: u64,
    pub posted_date: DateTime<Utc>,
    pub funded_date: Option<DateTime<Utc>>,
    pub loan_amount: f64,
    pub borrowers: Vec<Borrower>,
    /// language code -> description text
    pub description_texts: BTreeMap<String, String>,
    pub sector: String,
    /// terms.loss_liability.nonpayment: "lender" or "partner"
    pub nonpayment: String,
}

/// One cleaned loan ready for modeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoanRecord {
    pub id: u64,
    /// Funding time in days, strictly positive.
    pub y: f64,
    /// 1 for group loans (more than one borrower).
    pub w: u8,
    pub loan_amount: f64,
    /// Majority of borrower genders, 1 = female. Ties resolve to female.
    pub gender: u8,
    /// 1 when the lender bears the default risk.
    pub risker: u8,
    /// 14 binary values; at most one is set (reference category all zero).
    pub sector_dummies: [u8; 14],
    /// Ordered tokens of the English description, non-empty.
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Immutable design matrix with outcomes, treatments, and split labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<LoanRecord>,
    /// n x 17: standardized loan_amount, gender, risker, 14 sector dummies.
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub w: Vec<u8>,
    pub split: Vec<Split>,
    /// (mean, population std) of loan_amount used for standardization.
    pub normalization: (f64, f64),
    pub split_seed: u64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i] == split).collect()
    }

    /// De-standardized loan amounts, recovered from the stored constants.
    pub fn destandardized_amounts(&self) -> Vec<f64> {
        let (mean, std) = self.normalization;
        (0..self.n()).map(|i| self.x[[i, 0]] * std + mean).collect()
    }
}

fn get_str<'a>(v: &'a serde_json::Value, key: &'static str) -> Option<&'a str> {
    v.get(key).and_then(|x| x.as_str())
}

fn parse_timestamp(s: &str, field: &'static str) -> Result<DateTime<Utc>, ParseFailure> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| ParseFailure::InvalidField(field, e.to_string()))
}

/// Parses one JSON object into a `RawLoan`. Missing optional fields
/// (funded_date, description) become absent values.
pub fn parse_loan(json_text: &str) -> Result<RawLoan, ParseFailure> {
    let v: serde_json::Value = serde_json::from_str(json_text)
        .map_err(|e| ParseFailure::MalformedJson(e.to_string()))?;
    parse_loan_value(&v)
}

/// Same as `parse_loan` but over an already-parsed JSON value.
pub fn parse_loan_value(v: &serde_json::Value) -> Result<RawLoan, ParseFailure> {
    if !v.is_object() {
        return Err(ParseFailure::MalformedJson("expected a JSON object".into()));
    }

    let posted_date = match get_str(v, "posted_date") {
        Some(s) => parse_timestamp(s, "posted_date")?,
        None => return Err(ParseFailure::MissingRequiredField("posted_date")),
    };
    let funded_date = match v.get("funded_date") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(parse_timestamp(s, "funded_date")?),
        Some(other) => {
            return Err(ParseFailure::InvalidField("funded_date", other.to_string()));
        }
    };
    let loan_amount = v
        .get("loan_amount")
        .ok_or(ParseFailure::MissingRequiredField("loan_amount"))?
        .as_f64()
        .ok_or_else(|| ParseFailure::InvalidField("loan_amount", "not a number".into()))?;
    if loan_amount < 0.0 {
        return Err(ParseFailure::InvalidField(
            "loan_amount",
            format!("negative amount {loan_amount}"),
        ));
    }
    let sector = get_str(v, "sector")
        .ok_or(ParseFailure::MissingRequiredField("sector"))?
        .to_string();
    let borrowers_val = v
        .get("borrowers")
        .ok_or(ParseFailure::MissingRequiredField("borrowers"))?
        .as_array()
        .ok_or_else(|| ParseFailure::InvalidField("borrowers", "not an array".into()))?;
    let mut borrowers = Vec::with_capacity(borrowers_val.len());
    for b in borrowers_val {
        let gender = match get_str(b, "gender") {
            Some("M") | Some("m") => Gender::Male,
            Some("F") | Some("f") => Gender::Female,
            other => {
                return Err(ParseFailure::InvalidField(
                    "borrowers.gender",
                    format!("{other:?}"),
                ));
            }
        };
        let name = get_str(b, "first_name")
            .or_else(|| get_str(b, "name"))
            .unwrap_or("")
            .to_string();
        borrowers.push(Borrower { name, gender });
    }
    let nonpayment = v
        .get("terms")
        .and_then(|t| t.get("loss_liability"))
        .and_then(|l| l.get("nonpayment"))
        .and_then(|n| n.as_str())
        .ok_or(ParseFailure::MissingRequiredField(
            "terms.loss_liability.nonpayment",
        ))?
        .to_string();
    let id = v
        .get("id")
        .ok_or(ParseFailure::MissingRequiredField("id"))?
        .as_u64()
        .ok_or_else(|| ParseFailure::InvalidField("id", "not an unsigned integer".into()))?;

    let mut description_texts = BTreeMap::new();
    if let Some(texts) = v
        .get("description")
        .and_then(|d| d.get("texts"))
        .and_then(|t| t.as_object())
    {
        for (lang, text) in texts {
            if let Some(s) = text.as_str() {
                description_texts.insert(lang.clone(), s.to_string());
            }
        }
    }

    Ok(RawLoan {
        id,
        posted_date,
        funded_date,
        loan_amount,
        borrowers,
        description_texts,
        sector,
        nonpayment,
    })
}

/// Applies the cleaning rules in order and derives the modeling fields.
/// Returns the reason code when the record is dropped.
pub fn transform(raw: &RawLoan) -> Result<LoanRecord, FilterReason> {
    // Funded strictly after posting; equal timestamps give y = 0 which is
    // excluded as well.
    if let Some(funded) = raw.funded_date {
        if funded <= raw.posted_date {
            return Err(FilterReason::FundedBeforePosted);
        }
    }

    let text = match raw.description_texts.get("en") {
        Some(t) => t,
        None => return Err(FilterReason::NoEnglishDescription),
    };
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(FilterReason::EmptyDescription);
    }

    if raw.borrowers.is_empty() {
        return Err(FilterReason::NoBorrowers);
    }
    let w = u8::from(raw.borrowers.len() > 1);

    let funded = match raw.funded_date {
        Some(f) => f,
        None => return Err(FilterReason::NeverFunded),
    };
    let seconds = (funded - raw.posted_date).num_seconds();
    let y = seconds as f64 / SECONDS_PER_DAY;

    let n_female = raw
        .borrowers
        .iter()
        .filter(|b| b.gender == Gender::Female)
        .count();
    // Ties resolve to female.
    let gender = u8::from(2 * n_female >= raw.borrowers.len());

    let risker = u8::from(raw.nonpayment == "lender");

    let mut sector_dummies = [0u8; 14];
    if let Some(idx) = SECTORS.iter().position(|s| *s == raw.sector) {
        if idx < 14 {
            sector_dummies[idx] = 1;
        }
    }

    Ok(LoanRecord {
        id: raw.id,
        y,
        w,
        loan_amount: raw.loan_amount,
        gender,
        risker,
        sector_dummies,
        tokens,
    })
}

/// Assembles the covariate matrix, standardizes loan_amount over the full
/// retained set (population mean/std), and assigns random split labels
/// deterministically from the seed.
pub fn build_dataset(
    records: Vec<LoanRecord>,
    split_fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Dataset, IngestError> {
    if records.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let (ft, fv, fs) = split_fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(IngestError::BadSplitFractions(split_fractions));
    }

    let n = records.len();
    let mean = records.iter().map(|r| r.loan_amount).sum::<f64>() / n as f64;
    let var = records
        .iter()
        .map(|r| (r.loan_amount - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    if var <= 0.0 {
        return Err(IngestError::DegenerateColumn("loan_amount"));
    }
    let std = var.sqrt();

    let mut x = Array2::<f64>::zeros((n, N_COVARIATES));
    let mut y = Array1::<f64>::zeros(n);
    let mut w = Vec::with_capacity(n);
    for (i, r) in records.iter().enumerate() {
        x[[i, 0]] = (r.loan_amount - mean) / std;
        x[[i, 1]] = f64::from(r.gender);
        x[[i, 2]] = f64::from(r.risker);
        for (j, &d) in r.sector_dummies.iter().enumerate() {
            x[[i, 3 + j]] = f64::from(d);
        }
        y[i] = r.y;
        w.push(r.w);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < ft {
                Split::Train
            } else if u < ft + fv {
                Split::Validation
            } else {
                Split::Test
            }
        })
        .collect();

    Ok(Dataset {
        records,
        x,
        y,
        w,
        split,
        normalization: (mean, std),
        split_seed: seed,
    })
}

/// Per-arm summary of one outcome-like quantity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub n: usize,
    pub mean_y: f64,
    pub median_y: f64,
    pub min_y: f64,
    pub max_y: f64,
    pub mean_loan_amount: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectorSummary {
    pub sector: String,
    pub n_treated: usize,
    pub n_control: usize,
    pub mean_y_treated: Option<f64>,
    pub mean_y_control: Option<f64>,
}

/// Descriptive statistics of a dataset, including the empirical CDF input
/// for the funding-time over loan-amount-in-$25 ratio, per arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryReport {
    pub n: usize,
    pub treated_share: f64,
    pub overall: ArmSummary,
    pub treated: ArmSummary,
    pub control: ArmSummary,
    pub sectors: Vec<SectorSummary>,
    /// Sorted per-arm values of y / (loan_amount / 25).
    pub ratio_treated: Vec<f64>,
    pub ratio_control: Vec<f64>,
}

fn summarize_arm(ys: &[f64], amounts: &[f64]) -> ArmSummary {
    let n = ys.len();
    if n == 0 {
        return ArmSummary {
            n: 0,
            mean_y: f64::NAN,
            median_y: f64::NAN,
            min_y: f64::NAN,
            max_y: f64::NAN,
            mean_loan_amount: f64::NAN,
        };
    }
    let mut sorted = ys.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    ArmSummary {
        n,
        mean_y: ys.iter().sum::<f64>() / n as f64,
        median_y: median,
        min_y: sorted[0],
        max_y: sorted[n - 1],
        mean_loan_amount: amounts.iter().sum::<f64>() / n as f64,
    }
}

pub fn descriptive_stats(dataset: &Dataset) -> Result<SummaryReport, IngestError> {
    if dataset.n() == 0 {
        return Err(IngestError::EmptyInput);
    }
    let amounts = dataset.destandardized_amounts();
    let n = dataset.n();

    let mut ys_all = Vec::new();
    let mut amt_all = Vec::new();
    let mut ys_t = Vec::new();
    let mut amt_t = Vec::new();
    let mut ys_c = Vec::new();
    let mut amt_c = Vec::new();
    let mut ratio_t = Vec::new();
    let mut ratio_c = Vec::new();
    for i in 0..n {
        let y = dataset.y[i];
        let a = amounts[i];
        ys_all.push(y);
        amt_all.push(a);
        let ratio = if a > 0.0 { y / (a / 25.0) } else { f64::NAN };
        if dataset.w[i] == 1 {
            ys_t.push(y);
            amt_t.push(a);
            ratio_t.push(ratio);
        } else {
            ys_c.push(y);
            amt_c.push(a);
            ratio_c.push(ratio);
        }
    }
    ratio_t.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ratio_c.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));

    let mut sectors = Vec::new();
    for (idx, name) in SECTORS.iter().enumerate() {
        let in_sector = |r: &LoanRecord| {
            if idx < 14 {
                r.sector_dummies[idx] == 1
            } else {
                r.sector_dummies.iter().all(|&d| d == 0)
            }
        };
        let (mut nt, mut nc, mut st, mut sc) = (0usize, 0usize, 0.0f64, 0.0f64);
        for r in &dataset.records {
            if in_sector(r) {
                if r.w == 1 {
                    nt += 1;
                    st += r.y;
                } else {
                    nc += 1;
                    sc += r.y;
                }
            }
        }
        sectors.push(SectorSummary {
            sector: (*name).to_string(),
            n_treated: nt,
            n_control: nc,
            mean_y_treated: (nt > 0).then(|| st / nt as f64),
            mean_y_control: (nc > 0).then(|| sc / nc as f64),
        });
    }

    Ok(SummaryReport {
        n,
        treated_share: ys_t.len() as f64 / n as f64,
        overall: summarize_arm(&ys_all, &amt_all),
        treated: summarize_arm(&ys_t, &amt_t),
        control: summarize_arm(&ys_c, &amt_c),
        sectors,
        ratio_treated: ratio_t,
        ratio_control: ratio_c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// The worked sample record: posted 2015-03-18T18:20:05Z, funded
    /// 2015-03-24T06:06:28Z, one male borrower, Education sector,
    /// lender bears nonpayment risk, amount 1150.
    pub fn sample_record_json() -> String {
        serde_json::json!({
            "id": 853701,
            "posted_date": "2015-03-18T18:20:05Z",
            "funded_date": "2015-03-24T06:06:28Z",
            "loan_amount": 1150,
            "sector": "Education",
            "borrowers": [{"first_name": "Mahesh", "gender": "M", "last_name": ""}],
            "description": {"languages": ["en"], "texts": {"en": "Mahesh is asking for a loan to pay off his course fees."}},
            "terms": {"loss_liability": {"nonpayment": "lender"}}
        })
        .to_string()
    }

    fn toy_record(id: u64, y: f64, w: u8, loan_amount: f64) -> LoanRecord {
        LoanRecord {
            id,
            y,
            w,
            loan_amount,
            gender: 1,
            risker: 0,
            sector_dummies: [0; 14],
            tokens: vec!["hello".into()],
        }
    }

    #[test]
    fn parse_sample_record() {
        let raw = parse_loan(&sample_record_json()).unwrap();
        assert_eq!(raw.id, 853701);
        assert_eq!(raw.loan_amount, 1150.0);
        assert_eq!(raw.sector, "Education");
        assert_eq!(raw.borrowers.len(), 1);
        assert_eq!(raw.nonpayment, "lender");
    }

    #[test]
    fn parse_empty_object_reports_posted_date() {
        assert_eq!(
            parse_loan("{}"),
            Err(ParseFailure::MissingRequiredField("posted_date"))
        );
    }

    #[test]
    fn parse_missing_funded_date_is_absent() {
        let mut v: serde_json::Value = serde_json::from_str(&sample_record_json()).unwrap();
        v.as_object_mut().unwrap().remove("funded_date");
        let raw = parse_loan(&v.to_string()).unwrap();
        assert_eq!(raw.funded_date, None);
    }

    #[test]
    fn parse_malformed_json() {
        assert!(matches!(
            parse_loan("not json"),
            Err(ParseFailure::MalformedJson(_))
        ));
    }

    #[test]
    fn transform_sample_record_exact() {
        let raw = parse_loan(&sample_record_json()).unwrap();
        let rec = transform(&raw).unwrap();
        assert_eq!(rec.w, 0);
        assert_eq!(rec.risker, 1);
        assert_eq!(rec.gender, 0);
        // Education is the 5th of the alphabetical sector list.
        let mut expected = [0u8; 14];
        expected[4] = 1;
        assert_eq!(rec.sector_dummies, expected);
        // 474,383 seconds between the two timestamps.
        assert_abs_diff_eq!(rec.y, 474_383.0 / 86_400.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rec.y, 5.490544, epsilon = 5e-7);
    }

    #[test]
    fn transform_funded_before_posted_filtered() {
        let mut raw = parse_loan(&sample_record_json()).unwrap();
        raw.funded_date = Some(raw.posted_date - chrono::Duration::hours(1));
        assert_eq!(transform(&raw), Err(FilterReason::FundedBeforePosted));
    }

    #[test]
    fn transform_three_borrowers_is_treated() {
        let mut raw = parse_loan(&sample_record_json()).unwrap();
        let b = raw.borrowers[0].clone();
        raw.borrowers = vec![b.clone(), b.clone(), b];
        assert_eq!(transform(&raw).unwrap().w, 1);
    }

    #[test]
    fn transform_gender_majority_and_tie() {
        let mut raw = parse_loan(&sample_record_json()).unwrap();
        raw.borrowers = vec![
            Borrower { name: "a".into(), gender: Gender::Female },
            Borrower { name: "b".into(), gender: Gender::Male },
        ];
        // Even tie resolves to female.
        assert_eq!(transform(&raw).unwrap().gender, 1);
        raw.borrowers.push(Borrower { name: "c".into(), gender: Gender::Male });
        assert_eq!(transform(&raw).unwrap().gender, 0);
    }

    #[test]
    fn transform_filters_in_order() {
        let base = parse_loan(&sample_record_json()).unwrap();

        let mut r = base.clone();
        r.description_texts.clear();
        assert_eq!(transform(&r), Err(FilterReason::NoEnglishDescription));

        let mut r = base.clone();
        r.description_texts.insert("en".into(), "  ... ".into());
        assert_eq!(transform(&r), Err(FilterReason::EmptyDescription));

        let mut r = base.clone();
        r.borrowers.clear();
        assert_eq!(transform(&r), Err(FilterReason::NoBorrowers));

        let mut r = base.clone();
        r.funded_date = None;
        assert_eq!(transform(&r), Err(FilterReason::NeverFunded));
    }

    #[test]
    fn transform_is_idempotent_in_effect() {
        let raw = parse_loan(&sample_record_json()).unwrap();
        assert_eq!(transform(&raw).unwrap(), transform(&raw).unwrap());
    }

    #[test]
    fn build_dataset_standardizes_with_population_std() {
        let records = vec![
            toy_record(1, 1.0, 1, 0.0),
            toy_record(2, 2.0, 0, 25.0),
            toy_record(3, 3.0, 0, 50.0),
        ];
        let ds = build_dataset(records, (0.6, 0.2, 0.2), 7).unwrap();
        let expected = 25.0 / (1250.0f64 / 3.0).sqrt(); // 1.224744...
        assert_abs_diff_eq!(ds.x[[0, 0]], -expected, epsilon = 1e-9);
        assert_abs_diff_eq!(ds.x[[1, 0]], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(ds.x[[2, 0]], expected, epsilon = 1e-9);
        assert_abs_diff_eq!(expected, 1.224744871391589, epsilon = 1e-9);

        // Column mean 0, variance 1 over the population used.
        let col: Vec<f64> = (0..3).map(|i| ds.x[[i, 0]]).collect();
        let m = col.iter().sum::<f64>() / 3.0;
        let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(m, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn build_dataset_split_deterministic() {
        let records: Vec<LoanRecord> = (0..100)
            .map(|i| toy_record(i, 1.0 + i as f64, (i % 2) as u8, i as f64))
            .collect();
        let a = build_dataset(records.clone(), (0.7, 0.15, 0.15), 42).unwrap();
        let b = build_dataset(records, (0.7, 0.15, 0.15), 42).unwrap();
        assert_eq!(a.split, b.split);
        // Exhaustive labels by construction; all three present at n = 100
        // with these fractions and seed.
        assert!(!a.indices_in(Split::Train).is_empty());
        assert!(!a.indices_in(Split::Validation).is_empty());
        assert!(!a.indices_in(Split::Test).is_empty());
    }

    #[test]
    fn build_dataset_degenerate_single_record() {
        let records = vec![toy_record(1, 1.0, 1, 100.0)];
        match build_dataset(records, (0.6, 0.2, 0.2), 1) {
            Err(IngestError::DegenerateColumn("loan_amount")) => {}
            other => panic!("expected DegenerateColumn, got {other:?}"),
        }
    }

    #[test]
    fn standardization_round_trip() {
        let records: Vec<LoanRecord> = (0..50)
            .map(|i| toy_record(i, 1.0, 0, 25.0 * (i as f64 + 1.0)))
            .collect();
        let originals: Vec<f64> = records.iter().map(|r| r.loan_amount).collect();
        let ds = build_dataset(records, (0.8, 0.1, 0.1), 3).unwrap();
        for (orig, recovered) in originals.iter().zip(ds.destandardized_amounts()) {
            assert_abs_diff_eq!(*orig, recovered, epsilon = 1e-9);
        }
    }

    #[test]
    fn descriptive_stats_hand_case() {
        let records = vec![toy_record(1, 2.0, 1, 50.0), toy_record(2, 4.0, 0, 100.0)];
        let ds = build_dataset(records, (0.8, 0.1, 0.1), 1).unwrap();
        let report = descriptive_stats(&ds).unwrap();
        assert_abs_diff_eq!(report.treated.mean_y, 2.0);
        assert_abs_diff_eq!(report.control.mean_y, 4.0);
        assert_abs_diff_eq!(report.treated_share, 0.5);
    }

    #[test]
    fn ratio_cdf_input_value() {
        // y = 1.0 with amount 50 contributes ratio 0.5.
        let records = vec![toy_record(1, 1.0, 1, 50.0), toy_record(2, 2.0, 0, 100.0)];
        let ds = build_dataset(records, (0.8, 0.1, 0.1), 1).unwrap();
        let report = descriptive_stats(&ds).unwrap();
        assert_abs_diff_eq!(report.ratio_treated[0], 0.5, epsilon = 1e-12);
    }
}
