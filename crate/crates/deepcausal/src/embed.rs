//! Pretrained word vectors and loan-description vectorization.
//!
//! Descriptions are represented either as a single bag-of-embeddings
//! average (`loan_vector`) or as an ordered sequence of word vectors
//! (`loan_sequence`). Vectors come from a pretrained table in the usual
//! text layout: one token per line followed by its components.

use ndarray::Array1;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("line {0}: expected {1} vector components, found {2}")]
    DimensionMismatch(usize, usize, usize),
    #[error("line {0}: unparseable component {1:?}")]
    BadComponent(usize, String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Immutable token -> vector map. Shareable across threads after load.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Array1<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&Array1<f64>> {
        self.entries.get(token)
    }

    /// Inserts a vector, keeping the first occurrence on duplicates.
    pub fn insert(&mut self, token: String, vector: Array1<f64>) {
        assert_eq!(vector.len(), self.dim, "vector length must equal dim");
        self.entries.entry(token).or_insert(vector);
    }
}

/// Bag-of-embeddings representation of one description.
#[derive(Debug, Clone, PartialEq)]
pub struct LoanVector {
    pub values: Array1<f64>,
    pub n_matched: usize,
}

/// Loads a pretrained-vector text file: `token v1 v2 ... vd` per line.
/// Duplicate tokens keep the first occurrence.
pub fn load_embeddings(path: &Path, expected_dim: usize) -> Result<EmbeddingTable, EmbedError> {
    let reader = BufReader::new(File::open(path)?);
    let mut table = EmbeddingTable::new(expected_dim);
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = match parts.next() {
            Some(t) => t.to_string(),
            None => continue,
        };
        let mut values = Vec::with_capacity(expected_dim);
        for part in parts {
            let v: f64 = part
                .parse()
                .map_err(|_| EmbedError::BadComponent(line_no, part.to_string()))?;
            values.push(v);
        }
        if values.len() != expected_dim {
            return Err(EmbedError::DimensionMismatch(
                line_no,
                expected_dim,
                values.len(),
            ));
        }
        table.insert(token, Array1::from(values));
    }
    Ok(table)
}

/// Lowercases, strips characters outside letters/digits/apostrophes
/// (replacing them with spaces), and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().map(|s| s.to_string()).collect()
}

/// Mean of the embedding vectors of matched tokens. Out-of-vocabulary
/// tokens are skipped; an all-OOV list maps to the zero vector.
pub fn loan_vector<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable) -> LoanVector {
    let mut sum = Array1::<f64>::zeros(table.dim());
    let mut n_matched = 0usize;
    for token in tokens {
        if let Some(v) = table.get(token.as_ref()) {
            sum += v;
            n_matched += 1;
        }
    }
    if n_matched > 0 {
        sum /= n_matched as f64;
    }
    LoanVector {
        values: sum,
        n_matched,
    }
}

/// Embedding vectors of matched tokens in order, truncated to `max_len`.
pub fn loan_sequence<S: AsRef<str>>(
    tokens: &[S],
    table: &EmbeddingTable,
    max_len: usize,
) -> Vec<Array1<f64>> {
    assert!(max_len >= 1, "max_len must be at least 1");
    tokens
        .iter()
        .filter_map(|t| table.get(t.as_ref()).cloned())
        .take(max_len)
        .collect()
}

/// Default sequence truncation length. Descriptions are short paragraphs;
/// this bounds recurrent-model cost while rarely cutting text.
pub const DEFAULT_MAX_SEQ_LEN: usize = 200;
