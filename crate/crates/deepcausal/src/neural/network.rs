//! Forward passes with cached activations and exact backpropagation.

use ndarray::{concatenate, Array1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    data_loss, Encoder, Head, LstmLayer, Mode, Network, NeuralError, Sample, Target,
    TextInput,
};

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax.
pub fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = z.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

fn relu_vec(z: &Array1<f64>) -> Array1<f64> {
    z.mapv(relu)
}

fn relu_grad(z: &Array1<f64>) -> Array1<f64> {
    z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Per-timestep LSTM activations kept for backpropagation through time.
#[derive(Debug, Clone, Default)]
struct LstmTrace {
    gate_i: Vec<Array1<f64>>,
    gate_f: Vec<Array1<f64>>,
    gate_g: Vec<Array1<f64>>,
    gate_o: Vec<Array1<f64>>,
    cell: Vec<Array1<f64>>,
    tanh_cell: Vec<Array1<f64>>,
    hidden: Vec<Array1<f64>>,
}

#[derive(Debug, Clone)]
enum EncoderCache {
    Bag {
        x: Array1<f64>,
        z1: Array1<f64>,
        h1: Array1<f64>,
        z2: Array1<f64>,
    },
    Recurrent {
        inputs: Vec<Array1<f64>>,
        trace1: LstmTrace,
        trace2: LstmTrace,
        /// (scores, alphas) when the attention average is used.
        attention: Option<(Array1<f64>, Array1<f64>)>,
    },
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: EncoderCache,
    /// Encoder output before dropout.
    feature: Array1<f64>,
    cov_in: Array1<f64>,
    s_z: Array1<f64>,
    s_final: Array1<f64>,
    mask_feature: Option<Array1<f64>>,
    mask_concat: Option<Array1<f64>>,
    mask_merge_act: Option<Array1<f64>>,
    /// Input actually fed to each dense layer (post-dropout where applied).
    dense_in: Vec<Array1<f64>>,
    dense_z: Vec<Array1<f64>>,
    dense_act: Vec<Array1<f64>>,
    out_z: Array1<f64>,
    pub output: Array1<f64>,
}

fn lstm_step(
    layer: &LstmLayer,
    x: &Array1<f64>,
    h_prev: &Array1<f64>,
    c_prev: &Array1<f64>,
    trace: &mut LstmTrace,
) -> (Array1<f64>, Array1<f64>) {
    let h = layer.hidden();
    let z = layer.wx.dot(x) + layer.wh.dot(h_prev) + &layer.b;
    let gi = z.slice(ndarray::s![0..h]).mapv(sigmoid);
    let gf = z.slice(ndarray::s![h..2 * h]).mapv(sigmoid);
    let gg = z.slice(ndarray::s![2 * h..3 * h]).mapv(f64::tanh);
    let go = z.slice(ndarray::s![3 * h..4 * h]).mapv(sigmoid);
    let c = &gf * c_prev + &gi * &gg;
    let tc = c.mapv(f64::tanh);
    let h_new = &go * &tc;
    trace.gate_i.push(gi);
    trace.gate_f.push(gf);
    trace.gate_g.push(gg);
    trace.gate_o.push(go);
    trace.cell.push(c.clone());
    trace.tanh_cell.push(tc);
    trace.hidden.push(h_new.clone());
    (h_new, c)
}

fn run_lstm(layer: &LstmLayer, inputs: &[Array1<f64>]) -> LstmTrace {
    let h = layer.hidden();
    let mut trace = LstmTrace::default();
    let mut h_prev = Array1::zeros(h);
    let mut c_prev = Array1::zeros(h);
    for x in inputs {
        let (hn, cn) = lstm_step(layer, x, &h_prev, &c_prev, &mut trace);
        h_prev = hn;
        c_prev = cn;
    }
    trace
}

fn dropout_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let keep = 1.0 - rate;
    Array1::from_iter((0..len).map(|_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

/// Forward pass with cached activations. Dropout masks are drawn only in
/// train mode with a positive rate; activations are rescaled at train
/// time so evaluation needs no scaling.
pub fn forward(
    net: &Network,
    text: &TextInput,
    cov: &Array1<f64>,
    mode: Mode,
    dropout_rate: f64,
    rng: &mut ChaCha8Rng,
) -> ForwardCache {
    let use_dropout = mode == Mode::Train && dropout_rate > 0.0;

    let (encoder_cache, feature) = match (&net.encoder, text) {
        (Encoder::Bag { l1, l2 }, TextInput::Vector(x)) => {
            let z1 = l1.w.dot(x) + &l1.b;
            let h1 = relu_vec(&z1);
            let z2 = l2.w.dot(&h1) + &l2.b;
            let h2 = relu_vec(&z2);
            (
                EncoderCache::Bag {
                    x: x.clone(),
                    z1,
                    h1,
                    z2,
                },
                h2,
            )
        }
        (Encoder::Recurrent { l1, l2, attention }, TextInput::Sequence(seq)) => {
            // All-OOV descriptions come through as empty sequences; feed a
            // single zero vector so the recurrent path is total.
            let inputs: Vec<Array1<f64>> = if seq.is_empty() {
                vec![Array1::zeros(net.arch.text_dim)]
            } else {
                seq.clone()
            };
            let trace1 = run_lstm(l1, &inputs);
            let trace2 = run_lstm(l2, &trace1.hidden);
            let steps = trace2.hidden.len();
            let (att_cache, feature) = match attention {
                Some(v) => {
                    let scores = Array1::from_iter(trace2.hidden.iter().map(|h| v.dot(h)));
                    let alphas = softmax(&scores);
                    let mut ctx = Array1::<f64>::zeros(l2.hidden());
                    for t in 0..steps {
                        ctx = ctx + alphas[t] * &trace2.hidden[t];
                    }
                    (Some((scores, alphas)), ctx)
                }
                None => (None, trace2.hidden[steps - 1].clone()),
            };
            (
                EncoderCache::Recurrent {
                    inputs,
                    trace1,
                    trace2,
                    attention: att_cache,
                },
                feature,
            )
        }
        _ => panic!("text input kind does not match encoder kind"),
    };

    let mask_feature = use_dropout.then(|| dropout_mask(feature.len(), dropout_rate, rng));
    let mut current = match &mask_feature {
        Some(m) => &feature * m,
        None => feature.clone(),
    };

    let s_z = net.cov.w.dot(cov) + &net.cov.b;
    let s_final = relu_vec(&s_z);

    let mut mask_concat = None;
    let mut mask_merge_act = None;
    let mut dense_in = Vec::with_capacity(net.dense.len());
    let mut dense_z = Vec::with_capacity(net.dense.len());
    let mut dense_act = Vec::with_capacity(net.dense.len());
    for (i, layer) in net.dense.iter().enumerate() {
        let input = if i == net.arch.merge_index {
            let mut cat = concatenate![Axis(0), current, s_final];
            if use_dropout {
                let m = dropout_mask(cat.len(), dropout_rate, rng);
                cat = &cat * &m;
                mask_concat = Some(m);
            }
            cat
        } else {
            current.clone()
        };
        let z = layer.w.dot(&input) + &layer.b;
        let mut act = relu_vec(&z);
        if i == net.arch.merge_index && use_dropout {
            let m = dropout_mask(act.len(), dropout_rate, rng);
            act = &act * &m;
            mask_merge_act = Some(m);
        }
        dense_in.push(input);
        dense_z.push(z);
        dense_act.push(act.clone());
        current = act;
    }

    let out_z = net.out.w.dot(&current) + &net.out.b;
    let output = match net.arch.head {
        Head::Propensity => softmax(&out_z),
        Head::Outcome => relu_vec(&out_z),
    };

    ForwardCache {
        encoder: encoder_cache,
        feature,
        cov_in: cov.clone(),
        s_z,
        s_final,
        mask_feature,
        mask_concat,
        mask_merge_act,
        dense_in,
        dense_z,
        dense_act,
        out_z,
        output,
    }
}

fn outer_add(grad: &mut ndarray::Array2<f64>, dz: &Array1<f64>, input: &Array1<f64>) {
    for (r, &d) in dz.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let mut row = grad.row_mut(r);
        for (c, &x) in input.iter().enumerate() {
            row[c] += d * x;
        }
    }
}

/// Backpropagation through one LSTM layer given per-step gradients on its
/// hidden states. Returns the gradients with respect to its inputs.
fn lstm_backward(
    layer: &LstmLayer,
    inputs: &[Array1<f64>],
    trace: &LstmTrace,
    dh_inject: &[Array1<f64>],
    grad: &mut LstmLayer,
) -> Vec<Array1<f64>> {
    let h = layer.hidden();
    let steps = inputs.len();
    let mut dx = vec![Array1::<f64>::zeros(inputs[0].len()); steps];
    let mut dh_next = Array1::<f64>::zeros(h);
    let mut dc_next = Array1::<f64>::zeros(h);
    for t in (0..steps).rev() {
        let dh = &dh_inject[t] + &dh_next;
        let gi = &trace.gate_i[t];
        let gf = &trace.gate_f[t];
        let gg = &trace.gate_g[t];
        let go = &trace.gate_o[t];
        let tc = &trace.tanh_cell[t];
        let c_prev = if t == 0 {
            Array1::zeros(h)
        } else {
            trace.cell[t - 1].clone()
        };
        let h_prev = if t == 0 {
            Array1::zeros(h)
        } else {
            trace.hidden[t - 1].clone()
        };

        let d_o = &dh * tc;
        let dc = &dc_next + &(&dh * go * &tc.mapv(|v| 1.0 - v * v));
        let d_f = &dc * &c_prev;
        let d_i = &dc * gg;
        let d_g = &dc * gi;

        let dz_i = &d_i * gi * &gi.mapv(|v| 1.0 - v);
        let dz_f = &d_f * gf * &gf.mapv(|v| 1.0 - v);
        let dz_g = &d_g * &gg.mapv(|v| 1.0 - v * v);
        let dz_o = &d_o * go * &go.mapv(|v| 1.0 - v);

        let dz = concatenate![Axis(0), dz_i, dz_f, dz_g, dz_o];
        outer_add(&mut grad.wx, &dz, &inputs[t]);
        outer_add(&mut grad.wh, &dz, &h_prev);
        grad.b += &dz;
        dx[t] = layer.wx.t().dot(&dz);
        dh_next = layer.wh.t().dot(&dz);
        dc_next = &dc * gf;
    }
    dx
}

/// Accumulates the gradient of the data loss for one sample into `grads`.
fn backprop_sample(
    net: &Network,
    sample: &Sample,
    cache: &ForwardCache,
    grads: &mut Network,
) -> Result<(), NeuralError> {
    // Output-layer gradient.
    let d_out_z: Array1<f64> = match (net.arch.head, &sample.target) {
        (Head::Propensity, Target::Class(c)) => {
            if *c >= cache.output.len() {
                return Err(NeuralError::InvalidTarget);
            }
            let mut d = cache.output.clone();
            d[*c] -= 1.0;
            d
        }
        (Head::Outcome, Target::Value(y)) => {
            let d = 2.0 * (cache.output[0] - y);
            let gate = if cache.out_z[0] > 0.0 { 1.0 } else { 0.0 };
            Array1::from(vec![d * gate])
        }
        _ => return Err(NeuralError::InvalidTarget),
    };

    let last_act = cache
        .dense_act
        .last()
        .cloned()
        .unwrap_or_else(|| cache.feature.clone());
    outer_add(&mut grads.out.w, &d_out_z, &last_act);
    grads.out.b += &d_out_z;
    let mut d_cur = net.out.w.t().dot(&d_out_z);

    let mut d_s_final = Array1::<f64>::zeros(cache.s_final.len());
    for i in (0..net.dense.len()).rev() {
        if i == net.arch.merge_index {
            if let Some(m) = &cache.mask_merge_act {
                d_cur = &d_cur * m;
            }
        }
        let dz = &d_cur * &relu_grad(&cache.dense_z[i]);
        outer_add(&mut grads.dense[i].w, &dz, &cache.dense_in[i]);
        grads.dense[i].b += &dz;
        let mut d_input = net.dense[i].w.t().dot(&dz);
        if i == net.arch.merge_index {
            if let Some(m) = &cache.mask_concat {
                d_input = &d_input * m;
            }
            let split = d_input.len() - cache.s_final.len();
            d_s_final += &d_input.slice(ndarray::s![split..]);
            d_cur = d_input.slice(ndarray::s![..split]).to_owned();
        } else {
            d_cur = d_input;
        }
    }

    // Covariate branch.
    let dz_s = &d_s_final * &relu_grad(&cache.s_z);
    outer_add(&mut grads.cov.w, &dz_s, &cache.cov_in);
    grads.cov.b += &dz_s;

    // Encoder.
    let mut d_feature = d_cur;
    if let Some(m) = &cache.mask_feature {
        d_feature = &d_feature * m;
    }
    match (&net.encoder, &mut grads.encoder, &cache.encoder) {
        (
            Encoder::Bag { l1, l2 },
            Encoder::Bag { l1: g1, l2: g2 },
            EncoderCache::Bag { x, z1, h1, z2 },
        ) => {
            let dz2 = &d_feature * &relu_grad(z2);
            outer_add(&mut g2.w, &dz2, h1);
            g2.b += &dz2;
            let d_h1 = l2.w.t().dot(&dz2);
            let dz1 = &d_h1 * &relu_grad(z1);
            outer_add(&mut g1.w, &dz1, x);
            g1.b += &dz1;
            let _ = l1;
        }
        (
            Encoder::Recurrent { l1, l2, attention },
            Encoder::Recurrent {
                l1: g1,
                l2: g2,
                attention: g_att,
            },
            EncoderCache::Recurrent {
                inputs,
                trace1,
                trace2,
                attention: att_cache,
            },
        ) => {
            let steps = inputs.len();
            let hidden2 = l2.hidden();
            let mut dh2_inject = vec![Array1::<f64>::zeros(hidden2); steps];
            match (attention, att_cache) {
                (Some(v), Some((_, alphas))) => {
                    // context = sum_t alpha_t h_t; scores e_t = v . h_t.
                    let d_alpha: Array1<f64> =
                        Array1::from_iter(trace2.hidden.iter().map(|ht| d_feature.dot(ht)));
                    let weighted: f64 = (0..steps).map(|t| alphas[t] * d_alpha[t]).sum();
                    let g_att = g_att.as_mut().expect("attention gradient buffer");
                    for t in 0..steps {
                        let de_t = alphas[t] * (d_alpha[t] - weighted);
                        dh2_inject[t] = alphas[t] * &d_feature + de_t * v;
                        *g_att += &(de_t * &trace2.hidden[t]);
                    }
                }
                (None, None) => {
                    dh2_inject[steps - 1] = d_feature;
                }
                _ => unreachable!("attention cache must match the model"),
            }
            let dh1 = lstm_backward(l2, &trace1.hidden, trace2, &dh2_inject, g2);
            let _ = lstm_backward(l1, inputs, trace1, &dh1, g1);
        }
        _ => unreachable!("encoder cache must match the model"),
    }
    Ok(())
}

/// Exact gradient of the regularized batch-mean loss. Returns the mean
/// regularized loss and a gradient container shaped like the network.
/// With `Mode::Train` and a positive dropout rate, fresh masks are drawn
/// per sample from `rng` and the gradient is exact for the masked loss.
pub fn backward(
    net: &Network,
    batch: &[Sample],
    l2_strength: f64,
    dropout_rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Network), NeuralError> {
    assert!(!batch.is_empty(), "empty batch");
    let mut grads = Network::zeros(&net.arch);
    let mut total_loss = 0.0;
    for sample in batch {
        let cache = forward(net, &sample.text, &sample.cov, mode, dropout_rate, rng);
        total_loss += data_loss(&cache.output, &sample.target, net.arch.head)?;
        backprop_sample(net, sample, &cache, &mut grads)?;
    }
    let scale = 1.0 / batch.len() as f64;
    let mut flat = grads.flatten();
    for v in flat.iter_mut() {
        *v *= scale;
    }
    // Quadratic penalty enters once per batch: d/dw of l2 * w^2 = 2 l2 w.
    let params = net.flatten();
    let mask = net.weight_mask();
    for j in 0..flat.len() {
        if mask[j] {
            flat[j] += 2.0 * l2_strength * params[j];
        }
    }
    grads.assign_flat(&flat);
    let mean_loss = total_loss * scale + l2_strength * net.weight_square_sum();
    Ok((mean_loss, grads))
}

/// Central finite-difference gradient of the regularized batch-mean loss.
/// Uses only the forward pass, independent of the analytic backward path.
pub fn numeric_gradient(net: &Network, batch: &[Sample], l2_strength: f64, eps: f64) -> Vec<f64> {
    let base = net.flatten();
    let mut grad = vec![0.0; base.len()];
    let mut probe = net.clone();
    let mut eval = |theta: &[f64]| -> f64 {
        probe.assign_flat(theta);
        let mut total = 0.0;
        let mut rng = super::no_dropout_rng();
        for sample in batch {
            let cache = forward(&probe, &sample.text, &sample.cov, Mode::Eval, 0.0, &mut rng);
            total += data_loss(&cache.output, &sample.target, probe.arch.head).unwrap();
        }
        total / batch.len() as f64 + l2_strength * probe.weight_square_sum()
    };
    let mut theta = base.clone();
    for j in 0..base.len() {
        theta[j] = base[j] + eps;
        let up = eval(&theta);
        theta[j] = base[j] - eps;
        let down = eval(&theta);
        theta[j] = base[j];
        grad[j] = (up - down) / (2.0 * eps);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Arch, TextInput};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn small_mlp_batch(seed: u64, head: Head) -> (Network, Vec<Sample>) {
        let arch = match head {
            Head::Propensity => Arch {
                encoder_sizes: (5, 4),
                cov_hidden: 3,
                dense_sizes: vec![4],
                ..Arch::mlp_propensity(4, 3)
            },
            Head::Outcome => Arch {
                encoder_sizes: (5, 4),
                cov_hidden: 3,
                dense_sizes: vec![4, 3, 2],
                ..Arch::mlp_outcome(4, 3)
            },
        };
        let net = randomize_all(Network::init(&arch, seed), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let batch = (0..3)
            .map(|_| Sample {
                text: TextInput::Vector(Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)))),
                cov: Array1::from_iter((0..3).map(|_| rng.gen_range(-1.0..1.0))),
                target: match head {
                    Head::Propensity => Target::Class(rng.gen_range(0..2)),
                    Head::Outcome => Target::Value(rng.gen_range(0.0..2.0)),
                },
            })
            .collect();
        (net, batch)
    }

    /// Draws every parameter (biases included) from a continuous
    /// distribution so no pre-activation lands exactly on a ReLU kink.
    fn randomize_all(mut net: Network, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b9).wrapping_add(17));
        let flat: Vec<f64> = (0..net.n_params())
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        net.assign_flat(&flat);
        net
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_weight_mlp_output_bias_gradient_is_softmax_residual_mean() {
        let arch = Arch {
            encoder_sizes: (3, 3),
            cov_hidden: 2,
            dense_sizes: vec![3],
            ..Arch::mlp_propensity(2, 2)
        };
        let net = Network::zeros(&arch);
        let batch = vec![
            Sample {
                text: TextInput::Vector(array![1.0, -1.0]),
                cov: array![0.5, 0.5],
                target: Target::Class(0),
            },
            Sample {
                text: TextInput::Vector(array![0.3, 0.7]),
                cov: array![1.0, 0.0],
                target: Target::Class(1),
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, grads) = backward(&net, &batch, 0.0, 0.0, Mode::Eval, &mut rng).unwrap();
        // Outputs are (0.5, 0.5); residual mean over targets {0, 1} is
        // ((0.5-1, 0.5) + (0.5, 0.5-1)) / 2 = (0, 0).
        assert_abs_diff_eq!(grads.out.b[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(grads.out.b[1], 0.0, epsilon = 1e-15);

        // Single-sample case: residual is exactly softmax minus one-hot.
        let (_, grads) = backward(&net, &batch[..1], 0.0, 0.0, Mode::Eval, &mut rng).unwrap();
        assert_abs_diff_eq!(grads.out.b[0], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(grads.out.b[1], 0.5, epsilon = 1e-15);

        // Verify against central finite differences.
        let numeric = numeric_gradient(&net, &batch[..1], 0.0, 1e-5);
        let analytic = grads.flatten();
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for seed in 0..3 {
            for head in [Head::Propensity, Head::Outcome] {
                let (net, batch) = small_mlp_batch(seed, head);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (_, grads) = backward(&net, &batch, 0.01, 0.0, Mode::Eval, &mut rng).unwrap();
                let numeric = numeric_gradient(&net, &batch, 0.01, 1e-5);
                let err = max_rel_err(&grads.flatten(), &numeric);
                assert!(err < 1e-4, "seed {seed} head {head:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        for seed in 0..3 {
            for head in [Head::Propensity, Head::Outcome] {
                let mut arch = match head {
                    Head::Propensity => Arch::lstm_propensity(3, 2),
                    Head::Outcome => Arch::lstm_outcome(3, 2),
                };
                arch.encoder_sizes = (4, 4);
                arch.cov_hidden = 2;
                arch.dense_sizes = if head == Head::Propensity {
                    vec![4, 3]
                } else {
                    vec![4, 3, 3]
                };
                arch.merge_index = 1;
                let net = randomize_all(Network::init(&arch, seed + 100), seed + 100);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
                let batch: Vec<Sample> = (0..2)
                    .map(|_| {
                        let len = rng.gen_range(1..=4);
                        Sample {
                            text: TextInput::Sequence(
                                (0..len)
                                    .map(|_| {
                                        Array1::from_iter(
                                            (0..3).map(|_| rng.gen_range(-1.0..1.0)),
                                        )
                                    })
                                    .collect(),
                            ),
                            cov: Array1::from_iter((0..2).map(|_| rng.gen_range(-1.0..1.0))),
                            target: match head {
                                Head::Propensity => Target::Class(rng.gen_range(0..2)),
                                Head::Outcome => Target::Value(rng.gen_range(0.0..2.0)),
                            },
                        }
                    })
                    .collect();
                let mut r0 = ChaCha8Rng::seed_from_u64(0);
                let (_, grads) = backward(&net, &batch, 0.005, 0.0, Mode::Eval, &mut r0).unwrap();
                let numeric = numeric_gradient(&net, &batch, 0.005, 1e-5);
                let err = max_rel_err(&grads.flatten(), &numeric);
                assert!(err < 1e-4, "seed {seed} head {head:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn l2_contributes_two_lambda_w_to_weight_gradients() {
        let (net, batch) = small_mlp_batch(7, Head::Propensity);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, g0) = backward(&net, &batch, 0.0, 0.0, Mode::Eval, &mut rng).unwrap();
        let (_, g1) = backward(&net, &batch, 0.5, 0.0, Mode::Eval, &mut rng).unwrap();
        let params = net.flatten();
        let mask = net.weight_mask();
        let f0 = g0.flatten();
        let f1 = g1.flatten();
        for j in 0..params.len() {
            let expected = if mask[j] { 2.0 * 0.5 * params[j] } else { 0.0 };
            assert_abs_diff_eq!(f1[j] - f0[j], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let arch = Arch::lstm_outcome(3, 2);
        let net = Network::init(&arch, 42);
        let seq: Vec<Array1<f64>> = (0..3)
            .map(|t| array![t as f64 * 0.1, -0.2, 0.3])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = forward(
            &net,
            &TextInput::Sequence(seq),
            &array![1.0, 0.5],
            Mode::Eval,
            0.0,
            &mut rng,
        );
        match &cache.encoder {
            EncoderCache::Recurrent {
                attention: Some((_, alphas)),
                ..
            } => {
                assert!(alphas.iter().all(|&a| a >= 0.0));
                assert_abs_diff_eq!(alphas.sum(), 1.0, epsilon = 1e-12);
            }
            _ => panic!("expected attention cache"),
        }
    }
}
