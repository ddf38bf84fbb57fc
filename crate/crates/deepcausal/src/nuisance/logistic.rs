//! Penalized logistic regression via iteratively reweighted coordinate
//! descent (a quadratic approximation of the negative log-likelihood,
//! solved by weighted elastic-net updates).

use ndarray::{Array1, ArrayView2};

use super::elastic_net::soft_threshold;
use super::{LinearFit, Link, NuisanceError};
use crate::neural::sigmoid;

pub const IRLS_TOLERANCE: f64 = 1e-7;
pub const IRLS_MAX_OUTER: usize = 200;
const INNER_SWEEPS: usize = 200;
/// Floor for the working weights p(1-p), guarding the working response.
const WEIGHT_FLOOR: f64 = 1e-5;
/// Predictions are clipped into this open interval.
pub const PROB_CLIP: f64 = 1e-12;

/// Average penalized negative log-likelihood:
/// `(1/n) Σ [ln(1+exp(η_i)) − w_i η_i] + λ[α‖β‖₁ + (1−α)/2 ‖β‖₂²]`.
pub fn logistic_objective(
    x: &ArrayView2<f64>,
    w: &[u8],
    intercept: f64,
    beta: &Array1<f64>,
    lambda: f64,
    alpha: f64,
) -> f64 {
    let n = x.nrows() as f64;
    let mut nll = 0.0;
    for i in 0..x.nrows() {
        let eta = intercept + x.row(i).dot(beta);
        // ln(1+e^eta) computed stably.
        let log1pexp = if eta > 30.0 { eta } else { (1.0 + eta.exp()).ln() };
        nll += log1pexp - f64::from(w[i]) * eta;
    }
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    let l2: f64 = beta.iter().map(|b| b * b).sum();
    nll / n + lambda * (alpha * l1 + 0.5 * (1.0 - alpha) * l2)
}

/// Fits the logistic elastic net for a binary treatment vector.
pub fn fit_logistic_elastic_net(
    x: &ArrayView2<f64>,
    w: &[u8],
    lambda: f64,
    alpha: f64,
) -> Result<LinearFit, NuisanceError> {
    fit_logistic_warm(x, w, lambda, alpha, None)
}

/// As `fit_logistic_elastic_net`, with an optional warm start
/// (intercept, coefficients) used by the pathwise cross-validation.
pub(crate) fn fit_logistic_warm(
    x: &ArrayView2<f64>,
    w: &[u8],
    lambda: f64,
    alpha: f64,
    warm: Option<(f64, Array1<f64>)>,
) -> Result<LinearFit, NuisanceError> {
    assert_eq!(x.nrows(), w.len(), "design and labels disagree on n");
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NuisanceError::NonFiniteInput);
    }
    let n_pos = w.iter().filter(|&&v| v == 1).count();
    if n_pos == 0 || n_pos == w.len() {
        return Err(NuisanceError::SingleClass);
    }

    let (n, p) = (x.nrows(), x.ncols());
    let nf = n as f64;
    let (mut intercept, mut beta) = warm.unwrap_or_else(|| (0.0, Array1::<f64>::zeros(p)));

    let mut converged = false;
    for _outer in 0..IRLS_MAX_OUTER {
        // Quadratic approximation at the current coefficients.
        let mut weights = Array1::<f64>::zeros(n);
        let mut working = Array1::<f64>::zeros(n);
        for i in 0..n {
            let eta = intercept + x.row(i).dot(&beta);
            let prob = sigmoid(eta);
            let v = (prob * (1.0 - prob)).max(WEIGHT_FLOOR);
            weights[i] = v;
            working[i] = eta + (f64::from(w[i]) - prob) / v;
        }

        // Weighted coordinate descent on the working response.
        let col_sq: Vec<f64> = (0..p)
            .map(|j| {
                x.column(j)
                    .iter()
                    .zip(weights.iter())
                    .map(|(xv, wv)| wv * xv * xv)
                    .sum::<f64>()
                    / nf
            })
            .collect();
        let weight_sum = weights.sum();
        let mut residual = Array1::<f64>::zeros(n);
        for i in 0..n {
            residual[i] = working[i] - intercept - x.row(i).dot(&beta);
        }
        for _sweep in 0..INNER_SWEEPS {
            let mut max_change: f64 = 0.0;
            let delta0 = residual.dot(&weights) / weight_sum;
            intercept += delta0;
            residual -= delta0;
            max_change = max_change.max(delta0.abs());
            for j in 0..p {
                if col_sq[j] == 0.0 {
                    continue;
                }
                let old = beta[j];
                let grad = x
                    .column(j)
                    .iter()
                    .zip(weights.iter())
                    .zip(residual.iter())
                    .map(|((xv, wv), rv)| wv * xv * rv)
                    .sum::<f64>()
                    / nf;
                let z = grad + col_sq[j] * old;
                let new = soft_threshold(z, lambda * alpha) / (col_sq[j] + lambda * (1.0 - alpha));
                if new != old {
                    let diff = old - new;
                    residual.scaled_add(diff, &x.column(j));
                    beta[j] = new;
                    max_change = max_change.max(diff.abs());
                }
            }
            if max_change < IRLS_TOLERANCE {
                break;
            }
        }

        // Outer convergence: the quadratic subproblem left the
        // coefficients (essentially) where they were.
        let mut max_eta_change: f64 = 0.0;
        for i in 0..n {
            let eta = intercept + x.row(i).dot(&beta);
            let prob = sigmoid(eta);
            let v = (prob * (1.0 - prob)).max(WEIGHT_FLOOR);
            let new_working = eta + (f64::from(w[i]) - prob) / v;
            max_eta_change = max_eta_change.max((new_working - working[i]).abs() * v);
        }
        if max_eta_change < IRLS_TOLERANCE * 10.0 {
            converged = true;
            break;
        }
    }

    let fit = LinearFit {
        coefficients: beta,
        intercept,
        lambda,
        alpha,
        link: Link::Logistic,
    };
    if converged {
        Ok(fit)
    } else {
        Err(NuisanceError::NoConvergence {
            max_iters: IRLS_MAX_OUTER,
            partial: Box::new(fit),
        })
    }
}

/// Clips a probability into the open interval `(PROB_CLIP, 1 − PROB_CLIP)`.
pub fn clip_probability(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Predicted treatment probabilities, clipped.
pub fn predict_probabilities(fit: &LinearFit, x: &ArrayView2<f64>) -> Array1<f64> {
    assert_eq!(fit.link, Link::Logistic, "fit is not a logistic model");
    Array1::from_iter(
        (0..x.nrows()).map(|i| clip_probability(sigmoid(fit.intercept + x.row(i).dot(&fit.coefficients)))),
    )
}
