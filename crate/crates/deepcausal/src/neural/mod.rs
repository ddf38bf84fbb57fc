//! Minimal neural-network core: parameter containers, forward passes,
//! exact backpropagation (including through time and attention), and an
//! adaptive-moment optimizer. Two architectures are supported:
//!
//! * a feed-forward net over a fixed-dimension text vector plus numeric
//!   covariates, with a softmax head for propensity scores or a ReLU
//!   scalar head for outcomes (with a deeper tail), and
//! * a two-layer recurrent net with LSTM cells over word-vector
//!   sequences, using either the final hidden state (propensity) or an
//!   attention-weighted average of all hidden states (outcome) before
//!   the same dense tail.
//!
//! All arithmetic is in double precision.

mod network;
mod train;

pub use network::{
    backward, forward, numeric_gradient, relu, sigmoid, softmax, ForwardCache,
};
pub use train::{train, Adam, DatasetView, FittedModel, TrainError, TrainLogEntry};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Output-head kind: two-class softmax or non-negative scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Propensity,
    Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    Bag,
    Recurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid target for head")]
    InvalidTarget,
}

/// One dense layer, `w` of shape (out, in).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(out: usize, input: usize) -> Self {
        Dense {
            w: Array2::zeros((out, input)),
            b: Array1::zeros(out),
        }
    }
}

/// One LSTM layer. Gate rows are stacked in order input, forget,
/// candidate, output, so `wx` is (4h, in) and `wh` is (4h, h).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmLayer {
    pub wx: Array2<f64>,
    pub wh: Array2<f64>,
    pub b: Array1<f64>,
}

impl LstmLayer {
    fn zeros(hidden: usize, input: usize) -> Self {
        LstmLayer {
            wx: Array2::zeros((4 * hidden, input)),
            wh: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.ncols()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Encoder {
    /// Two ReLU layers over the averaged word vector: d -> n1 -> n2.
    Bag { l1: Dense, l2: Dense },
    /// Two stacked LSTM layers over the word-vector sequence. The
    /// attention vector, when present, scores each top-layer state for a
    /// softmax-weighted average; otherwise the final state is used.
    Recurrent {
        l1: LstmLayer,
        l2: LstmLayer,
        attention: Option<Array1<f64>>,
    },
}

/// Architecture hyperparameters. `dense_sizes` are the hidden layers
/// applied to the text feature after the encoder; the covariate branch
/// output is concatenated to the input of layer `merge_index`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Arch {
    pub encoder: EncoderKind,
    pub head: Head,
    pub text_dim: usize,
    pub cov_dim: usize,
    /// Bag: (n1, n2). Recurrent: hidden sizes of the two LSTM layers.
    pub encoder_sizes: (usize, usize),
    /// Covariate branch size (s_final).
    pub cov_hidden: usize,
    pub dense_sizes: Vec<usize>,
    pub merge_index: usize,
}

impl Arch {
    /// Feed-forward propensity model: text d -> 64 -> 32, covariates
    /// T -> 8, merged 40 -> 32 -> softmax(2).
    pub fn mlp_propensity(text_dim: usize, cov_dim: usize) -> Self {
        Arch {
            encoder: EncoderKind::Bag,
            head: Head::Propensity,
            text_dim,
            cov_dim,
            encoder_sizes: (64, 32),
            cov_hidden: 8,
            dense_sizes: vec![32],
            merge_index: 0,
        }
    }

    /// Outcome variant: deeper tail (two extra layers) and a ReLU scalar head.
    pub fn mlp_outcome(text_dim: usize, cov_dim: usize) -> Self {
        Arch {
            dense_sizes: vec![32, 16, 8],
            head: Head::Outcome,
            ..Arch::mlp_propensity(text_dim, cov_dim)
        }
    }

    /// Recurrent propensity model: two LSTM layers of 32 units, final
    /// state into a dense chain with the covariate branch merged at the
    /// last hidden layer.
    pub fn lstm_propensity(text_dim: usize, cov_dim: usize) -> Self {
        Arch {
            encoder: EncoderKind::Recurrent,
            head: Head::Propensity,
            text_dim,
            cov_dim,
            encoder_sizes: (32, 32),
            cov_hidden: 8,
            dense_sizes: vec![32, 16, 8],
            merge_index: 2,
        }
    }

    /// Recurrent outcome variant: attention-weighted state average, two
    /// extra tail layers, ReLU scalar head.
    pub fn lstm_outcome(text_dim: usize, cov_dim: usize) -> Self {
        Arch {
            head: Head::Outcome,
            dense_sizes: vec![32, 16, 8, 16, 8],
            ..Arch::lstm_propensity(text_dim, cov_dim)
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            Head::Propensity => 2,
            Head::Outcome => 1,
        }
    }

    fn encoder_out(&self) -> usize {
        self.encoder_sizes.1
    }
}

/// A full model: encoder, covariate branch, dense chain, output layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub arch: Arch,
    pub encoder: Encoder,
    pub cov: Dense,
    pub dense: Vec<Dense>,
    pub out: Dense,
}

impl Network {
    /// All-zero parameters (useful for shape tests and gradient buffers).
    pub fn zeros(arch: &Arch) -> Self {
        let (e1, e2) = arch.encoder_sizes;
        let encoder = match arch.encoder {
            EncoderKind::Bag => Encoder::Bag {
                l1: Dense::zeros(e1, arch.text_dim),
                l2: Dense::zeros(e2, e1),
            },
            EncoderKind::Recurrent => Encoder::Recurrent {
                l1: LstmLayer::zeros(e1, arch.text_dim),
                l2: LstmLayer::zeros(e2, e1),
                attention: matches!(arch.head, Head::Outcome).then(|| Array1::zeros(e2)),
            },
        };
        let cov = Dense::zeros(arch.cov_hidden, arch.cov_dim);
        let mut dense = Vec::new();
        let mut prev = arch.encoder_out();
        for (i, &size) in arch.dense_sizes.iter().enumerate() {
            let input = if i == arch.merge_index {
                prev + arch.cov_hidden
            } else {
                prev
            };
            dense.push(Dense::zeros(size, input));
            prev = size;
        }
        let out = Dense::zeros(arch.out_dim(), prev);
        Network {
            arch: arch.clone(),
            encoder,
            cov,
            dense,
            out,
        }
    }

    /// Scaled-uniform initialization for weights, zeros for biases.
    pub fn init(arch: &Arch, seed: u64) -> Self {
        let mut net = Network::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.for_each_weight_mut(|w| {
            let (rows, cols) = (w.nrows(), w.ncols());
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        });
        if let Encoder::Recurrent {
            attention: Some(att),
            ..
        } = &mut net.encoder
        {
            let bound = (6.0 / (att.len() + 1) as f64).sqrt();
            for v in att.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        // Start the non-negative scalar head in its active region so the
        // output unit has a gradient from the first step.
        if arch.head == Head::Outcome {
            net.out.b[0] = 1.0;
        }
        net
    }

    fn for_each_weight_mut(&mut self, mut f: impl FnMut(&mut Array2<f64>)) {
        match &mut self.encoder {
            Encoder::Bag { l1, l2 } => {
                f(&mut l1.w);
                f(&mut l2.w);
            }
            Encoder::Recurrent { l1, l2, .. } => {
                f(&mut l1.wx);
                f(&mut l1.wh);
                f(&mut l2.wx);
                f(&mut l2.wh);
            }
        }
        f(&mut self.cov.w);
        for d in &mut self.dense {
            f(&mut d.w);
        }
        f(&mut self.out.w);
    }

    /// Sum of squared weight-matrix entries (biases excluded); the
    /// attention vector counts as a weight.
    pub fn weight_square_sum(&self) -> f64 {
        let mut sum = 0.0;
        self.visit(|slice, is_weight| {
            if is_weight {
                sum += slice.iter().map(|v| v * v).sum::<f64>();
            }
        });
        sum
    }

    /// Flat parameter vector in a fixed traversal order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.visit(|slice, _| v.extend_from_slice(slice));
        v
    }

    pub fn n_params(&self) -> usize {
        self.flatten().len()
    }

    /// Overwrites parameters from a flat vector (same order as `flatten`).
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0usize;
        self.visit_mut(|slice, _| {
            slice.copy_from_slice(&flat[offset..offset + slice.len()]);
            offset += slice.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Visits each parameter block as a contiguous slice; the flag marks
    /// weight blocks (subject to the quadratic penalty).
    pub(crate) fn visit(&self, mut f: impl FnMut(&[f64], bool)) {
        let d2 = |d: &Dense, f: &mut dyn FnMut(&[f64], bool)| {
            f(d.w.as_slice().unwrap(), true);
            f(d.b.as_slice().unwrap(), false);
        };
        let l2 = |l: &LstmLayer, f: &mut dyn FnMut(&[f64], bool)| {
            f(l.wx.as_slice().unwrap(), true);
            f(l.wh.as_slice().unwrap(), true);
            f(l.b.as_slice().unwrap(), false);
        };
        match &self.encoder {
            Encoder::Bag { l1, l2: second } => {
                d2(l1, &mut f);
                d2(second, &mut f);
            }
            Encoder::Recurrent { l1, l2: second, attention } => {
                l2(l1, &mut f);
                l2(second, &mut f);
                if let Some(a) = attention {
                    f(a.as_slice().unwrap(), true);
                }
            }
        }
        d2(&self.cov, &mut f);
        for d in &self.dense {
            d2(d, &mut f);
        }
        d2(&self.out, &mut f);
    }

    pub(crate) fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64], bool)) {
        let d2 = |d: &mut Dense, f: &mut dyn FnMut(&mut [f64], bool)| {
            f(d.w.as_slice_mut().unwrap(), true);
            f(d.b.as_slice_mut().unwrap(), false);
        };
        let l2 = |l: &mut LstmLayer, f: &mut dyn FnMut(&mut [f64], bool)| {
            f(l.wx.as_slice_mut().unwrap(), true);
            f(l.wh.as_slice_mut().unwrap(), true);
            f(l.b.as_slice_mut().unwrap(), false);
        };
        match &mut self.encoder {
            Encoder::Bag { l1, l2: second } => {
                d2(l1, &mut f);
                d2(second, &mut f);
            }
            Encoder::Recurrent { l1, l2: second, attention } => {
                l2(l1, &mut f);
                l2(second, &mut f);
                if let Some(a) = attention {
                    f(a.as_slice_mut().unwrap(), true);
                }
            }
        }
        d2(&mut self.cov, &mut f);
        for d in &mut self.dense {
            d2(d, &mut f);
        }
        d2(&mut self.out, &mut f);
    }

    /// Flat 0/1 mask over the parameter vector marking weight entries.
    pub(crate) fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        self.visit(|slice, is_weight| mask.extend(std::iter::repeat(is_weight).take(slice.len())));
        mask
    }

    /// Eval-mode forward pass over one input.
    pub fn predict(&self, text: &TextInput, cov: &Array1<f64>) -> Array1<f64> {
        forward(self, text, cov, Mode::Eval, 0.0, &mut no_dropout_rng()).output
    }
}

pub(crate) fn no_dropout_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Text-side input: averaged vector for the bag encoder, word-vector
/// sequence for the recurrent one.
#[derive(Debug, Clone)]
pub enum TextInput {
    Vector(Array1<f64>),
    Sequence(Vec<Array1<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub text: TextInput,
    pub cov: Array1<f64>,
    pub target: Target,
}

/// Data loss for one output: cross-entropy against the target class for
/// the softmax head, squared error for the scalar head.
pub fn data_loss(output: &Array1<f64>, target: &Target, head: Head) -> Result<f64, NeuralError> {
    match (head, target) {
        (Head::Propensity, Target::Class(c)) => {
            if *c >= output.len() {
                return Err(NeuralError::InvalidTarget);
            }
            Ok(-output[*c].max(1e-300).ln())
        }
        (Head::Outcome, Target::Value(y)) => {
            let r = output[0] - y;
            Ok(r * r)
        }
        _ => Err(NeuralError::InvalidTarget),
    }
}

/// Regularized loss: data loss plus `l2_strength` times the squared
/// weight norm (biases excluded).
pub fn loss(
    output: &Array1<f64>,
    target: &Target,
    net: &Network,
    l2_strength: f64,
) -> Result<f64, NeuralError> {
    Ok(data_loss(output, target, net.arch.head)? + l2_strength * net.weight_square_sum())
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_strength: f64,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping epochs past the best validation loss.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l2_strength: 1e-4,
            dropout_rate: 0.2,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
        }
    }
}
