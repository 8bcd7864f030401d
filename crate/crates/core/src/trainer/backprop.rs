//! Reverse-mode gradients of the supervised loss with respect to the adapter
//! factors. The base weights are only read.
//!
//! The forward pass here mirrors the engine's operation by operation (same
//! kernels, same accumulation order), so at f32 its key and value rows equal
//! the ones the engine caches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{lora_scale, AdapterMode, AdapterSpec, Projection};
use crate::error::{Error, Result};
use crate::model::kernels::{
    attention_weights, gelu, gelu_grad, rms_norm, rms_norm_backward, rope_row, weighted_values,
};
use crate::model::{LayerWeights, ModelConfig, ModelWeights};
use crate::tensor::{dot, vec_mat, vec_mat_t, Matrix, Scalar};
use crate::trainer::SftExample;
use crate::TokenId;

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankParams<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

/// Trainable factors of one adapter, also used to hold their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T> {
    /// Indexed by layer, then [`Projection::index`].
    pub layers: Vec<[Option<LowRankParams<T>>; 3]>,
    pub scale: T,
}

impl<T: Scalar> AdapterParams<T> {
    pub fn from_spec(spec: &AdapterSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|ld| {
                std::array::from_fn(|i| {
                    ld.deltas[i].as_ref().map(|d| LowRankParams {
                        a: d.a.cast(),
                        b: d.b.cast(),
                    })
                })
            })
            .collect();
        Self {
            layers,
            scale: lora_scale(spec.alpha, spec.rank),
        }
    }

    /// Writes the factors back into a copy of `template`.
    pub fn to_spec(&self, template: &AdapterSpec) -> AdapterSpec {
        let mut out = template.clone();
        for (ld, params) in out.layers.iter_mut().zip(&self.layers) {
            for (delta, p) in ld.deltas.iter_mut().zip(params) {
                if let (Some(delta), Some(p)) = (delta.as_mut(), p) {
                    delta.a = p.a.cast();
                    delta.b = p.b.cast();
                }
            }
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                std::array::from_fn(|i| {
                    l[i].as_ref().map(|p| LowRankParams {
                        a: Matrix::zeros(p.a.rows(), p.a.cols()),
                        b: Matrix::zeros(p.b.rows(), p.b.cols()),
                    })
                })
            })
            .collect();
        Self {
            layers,
            scale: self.scale,
        }
    }

    /// Every factor as a flat slice: layer-major, then Q, K, V, then A before B.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flatten()
            .flatten()
            .flat_map(|p| [p.a.as_slice(), p.b.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flatten()
            .flatten()
            .flat_map(|p| [p.a.as_mut_slice(), p.b.as_mut_slice()])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a = *a + b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Inverted dropout on the input of each low-rank path. A rate of zero
/// disables it, leaving the adapted projection identical to inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

impl Dropout {
    pub const OFF: Self = Self { rate: 0.0, seed: 0 };
}

/// Mean cross-entropy of `targets` under the rows of `logits`.
pub fn sft_loss<T: Scalar>(logits: &Matrix<T>, targets: &[TokenId]) -> Result<T> {
    Ok(softmax_xent(logits, targets)?.0)
}

/// Loss and `∂loss/∂logits`.
fn softmax_xent<T: Scalar>(logits: &Matrix<T>, targets: &[TokenId]) -> Result<(T, Matrix<T>)> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::contract(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let count = T::from_usize(targets.len()).unwrap();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = T::zero();
    for (k, &t) in targets.iter().enumerate() {
        let row = logits.row(k);
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::config(format!("target {t} outside vocabulary")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &l in row {
            sum = sum + (l - max).exp();
        }
        let lse = max + sum.ln();
        total = total + (lse - row[t]);
        for (g, &l) in grad.row_mut(k).iter_mut().zip(row) {
            *g = (l - lse).exp() / count;
        }
        let g = grad.get(k, t);
        grad.set(k, t, g - T::one() / count);
    }
    Ok((total / count, grad))
}

fn weight<T>(lw: &LayerWeights<T>, p: Projection) -> &Matrix<T> {
    match p {
        Projection::Q => &lw.w_q,
        Projection::K => &lw.w_k,
        Projection::V => &lw.w_v,
    }
}

fn add_rows<T: Scalar>(h: &mut Matrix<T>, delta: &Matrix<T>) {
    for (a, &b) in h.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *a = *a + b;
    }
}

fn row_product<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for i in 0..x.rows() {
        vec_mat(x.row(i), w, out.row_mut(i));
    }
    out
}

struct LayerTape<T> {
    h_in: Matrix<T>,
    inv_attn: Vec<T>,
    normed: Matrix<T>,
    /// Low-rank path inputs after dropout, when dropout is active.
    dropped: [Option<Matrix<T>>; 3],
    masks: [Option<Matrix<T>>; 3],
    low: [Option<Matrix<T>>; 3],
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Attention weights, indexed `i * n_heads + h`.
    probs: Vec<Vec<T>>,
    h_mid: Matrix<T>,
    inv_mlp: Vec<T>,
    up: Matrix<T>,
}

struct Trace<T> {
    layers: Vec<LayerTape<T>>,
    h_out: Matrix<T>,
    inv_final: Vec<T>,
    logits: Matrix<T>,
}

fn check_inputs<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    params: &AdapterParams<T>,
    tokens: &[TokenId],
) -> Result<()> {
    if params.layers.len() != weights.layers.len() {
        return Err(Error::config(format!(
            "adapter has {} layers, model has {}",
            params.layers.len(),
            weights.layers.len()
        )));
    }
    if tokens.is_empty() || tokens.len() > config.max_positions {
        return Err(Error::config(format!(
            "sequence of {} tokens outside 1..={}",
            tokens.len(),
            config.max_positions
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::config(format!("token {t} outside vocabulary")));
    }
    Ok(())
}

/// Positions `>= activation` use the adapted projections.
fn forward<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    params: &AdapterParams<T>,
    tokens: &[TokenId],
    activation: usize,
    loss_rows: &[usize],
    dropout: Dropout,
) -> Result<Trace<T>> {
    check_inputs(weights, config, params, tokens)?;
    let n = tokens.len();
    let d = config.d_model;
    let (n_heads, d_head) = (config.n_heads, config.d_head);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout.seed);
    let keep = T::from_f64_lossy(1.0 / (1.0 - dropout.rate));

    let mut h = Matrix::from_fn(n, d, |i, j| {
        weights.token_embedding.get(tokens[i] as usize, j)
    });
    let mut tapes = Vec::with_capacity(weights.layers.len());
    for (lw, lp) in weights.layers.iter().zip(&params.layers) {
        let h_in = h.clone();
        let mut normed = Matrix::zeros(n, d);
        let inv_attn: Vec<T> = (0..n)
            .map(|i| rms_norm(h.row(i), &lw.attn_norm, normed.row_mut(i)))
            .collect();

        let mut out: [Matrix<T>; 3] = std::array::from_fn(|_| Matrix::zeros(n, d));
        let mut dropped: [Option<Matrix<T>>; 3] = Default::default();
        let mut masks: [Option<Matrix<T>>; 3] = Default::default();
        let mut lows: [Option<Matrix<T>>; 3] = Default::default();
        for p in Projection::ALL {
            let pi = p.index();
            let dst = &mut out[pi];
            for i in 0..n {
                vec_mat(normed.row(i), weight(lw, p), dst.row_mut(i));
            }
            let Some(lr) = &lp[pi] else { continue };
            let mut low = Matrix::zeros(n, lr.a.cols());
            let mut wide = vec![T::zero(); d];
            let mut input = normed.clone();
            if dropout.rate > 0.0 {
                let mask = Matrix::from_fn(n, d, |_, _| {
                    if rng.random::<f64>() < dropout.rate {
                        T::zero()
                    } else {
                        keep
                    }
                });
                for (x, &m) in input.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *x = *x * m;
                }
                masks[pi] = Some(mask);
            }
            for i in activation.min(n)..n {
                vec_mat(input.row(i), &lr.a, low.row_mut(i));
                vec_mat(low.row(i), &lr.b, &mut wide);
                for (o, &w) in dst.row_mut(i).iter_mut().zip(&wide) {
                    *o = *o + params.scale * w;
                }
            }
            if dropout.rate > 0.0 {
                dropped[pi] = Some(input);
            }
            lows[pi] = Some(low);
        }
        let [mut q, mut k, v] = out;
        for i in 0..n {
            rope_row(q.row_mut(i), d_head, i, config.rope_theta, false);
            rope_row(k.row_mut(i), d_head, i, config.rope_theta, false);
        }

        let mut heads = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(n * n_heads);
        for i in 0..n {
            for hd in 0..n_heads {
                let span = hd * d_head..(hd + 1) * d_head;
                let mut w = vec![T::zero(); i + 1];
                attention_weights(&q.row(i)[span.clone()], |j| &k.row(j)[span.clone()], &mut w);
                weighted_values(
                    &w,
                    |j| &v.row(j)[span.clone()],
                    &mut heads.row_mut(i)[span.clone()],
                );
                probs.push(w);
            }
        }
        add_rows(&mut h, &row_product(&heads, &lw.w_o));

        let h_mid = h.clone();
        let mut m = Matrix::zeros(n, d);
        let inv_mlp: Vec<T> = (0..n)
            .map(|i| rms_norm(h.row(i), &lw.mlp_norm, m.row_mut(i)))
            .collect();
        let up = row_product(&m, &lw.w_up);
        let mut act = up.clone();
        for x in act.as_mut_slice() {
            *x = gelu(*x);
        }
        add_rows(&mut h, &row_product(&act, &lw.w_down));

        tapes.push(LayerTape {
            h_in,
            inv_attn,
            normed,
            dropped,
            masks,
            low: lows,
            q,
            k,
            v,
            probs,
            h_mid,
            inv_mlp,
            up,
        });
    }

    let mut logits = Matrix::zeros(loss_rows.len(), config.vocab_size);
    let mut f = vec![T::zero(); d];
    let mut inv_final = Vec::with_capacity(loss_rows.len());
    for (k, &row) in loss_rows.iter().enumerate() {
        inv_final.push(rms_norm(h.row(row), &weights.final_norm, &mut f));
        vec_mat(&f, &weights.unembedding, logits.row_mut(k));
    }
    Ok(Trace {
        layers: tapes,
        h_out: h,
        inv_final,
        logits,
    })
}

fn backward<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    params: &AdapterParams<T>,
    trace: &Trace<T>,
    loss_rows: &[usize],
    activation: usize,
    dlogits: &Matrix<T>,
) -> AdapterParams<T> {
    let n = trace.h_out.rows();
    let d = config.d_model;
    let (n_heads, d_head) = (config.n_heads, config.d_head);
    let attn_scale = T::one() / T::from_usize(d_head).unwrap().sqrt();
    let mut grads = params.zeros_like();

    let mut dh = Matrix::zeros(n, d);
    let mut df = vec![T::zero(); d];
    for (k, &row) in loss_rows.iter().enumerate() {
        vec_mat_t(dlogits.row(k), &weights.unembedding, &mut df);
        rms_norm_backward(
            trace.h_out.row(row),
            &weights.final_norm,
            trace.inv_final[k],
            &df,
            dh.row_mut(row),
        );
    }

    for (layer, (lw, tape)) in weights.layers.iter().zip(&trace.layers).enumerate().rev() {
        let mut dh_mid = dh.clone();
        let mut dz = vec![T::zero(); lw.w_up.cols()];
        let mut dm = vec![T::zero(); d];
        for i in 0..n {
            vec_mat_t(dh.row(i), &lw.w_down, &mut dz);
            for (g, &u) in dz.iter_mut().zip(tape.up.row(i)) {
                *g = *g * gelu_grad(u);
            }
            vec_mat_t(&dz, &lw.w_up, &mut dm);
            rms_norm_backward(
                tape.h_mid.row(i),
                &lw.mlp_norm,
                tape.inv_mlp[i],
                &dm,
                dh_mid.row_mut(i),
            );
        }

        let mut dheads = Matrix::zeros(n, d);
        for i in 0..n {
            vec_mat_t(dh_mid.row(i), &lw.w_o, dheads.row_mut(i));
        }
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut dw = Vec::with_capacity(n);
        for i in 0..n {
            for hd in 0..n_heads {
                let span = hd * d_head..(hd + 1) * d_head;
                let w = &tape.probs[i * n_heads + hd];
                let d_out = &dheads.row(i)[span.clone()];
                dw.clear();
                dw.extend((0..=i).map(|j| dot(d_out, &tape.v.row(j)[span.clone()])));
                let mut s = T::zero();
                for j in 0..=i {
                    s = s + w[j] * dw[j];
                    for (g, &o) in dv.row_mut(j)[span.clone()].iter_mut().zip(d_out) {
                        *g = *g + w[j] * o;
                    }
                }
                for j in 0..=i {
                    let ds = w[j] * (dw[j] - s) * attn_scale;
                    let (q_i, k_j) = (&tape.q.row(i)[span.clone()], &tape.k.row(j)[span.clone()]);
                    for (g, &kv) in dq.row_mut(i)[span.clone()].iter_mut().zip(k_j) {
                        *g = *g + ds * kv;
                    }
                    for (g, &qv) in dk.row_mut(j)[span.clone()].iter_mut().zip(q_i) {
                        *g = *g + ds * qv;
                    }
                }
            }
        }
        for i in 0..n {
            rope_row(dq.row_mut(i), d_head, i, config.rope_theta, true);
            rope_row(dk.row_mut(i), d_head, i, config.rope_theta, true);
        }

        let mut dnormed = Matrix::zeros(n, d);
        let mut tmp = vec![T::zero(); d];
        for (p, g) in [
            (Projection::Q, &dq),
            (Projection::K, &dk),
            (Projection::V, &dv),
        ] {
            let pi = p.index();
            for i in 0..n {
                vec_mat_t(g.row(i), weight(lw, p), &mut tmp);
                for (a, &b) in dnormed.row_mut(i).iter_mut().zip(&tmp) {
                    *a = *a + b;
                }
            }
            let (Some(lr), Some(gr)) = (&params.layers[layer][pi], &mut grads.layers[layer][pi])
            else {
                continue;
            };
            let low = tape.low[pi]
                .as_ref()
                .expect("low-rank activations recorded");
            let input = tape.dropped[pi].as_ref().unwrap_or(&tape.normed);
            let r = lr.a.cols();
            let mut dlow = vec![T::zero(); r];
            for i in activation.min(n)..n {
                let gi = g.row(i);
                for (rr, &l) in low.row(i).iter().enumerate() {
                    let c = params.scale * l;
                    for (gb, &gv) in gr.b.row_mut(rr).iter_mut().zip(gi) {
                        *gb = *gb + c * gv;
                    }
                }
                vec_mat_t(gi, &lr.b, &mut dlow);
                for v in dlow.iter_mut() {
                    *v = *v * params.scale;
                }
                for (row, &x) in input.row(i).iter().enumerate() {
                    for (ga, &dl) in gr.a.row_mut(row).iter_mut().zip(&dlow) {
                        *ga = *ga + x * dl;
                    }
                }
                vec_mat_t(&dlow, &lr.a, &mut tmp);
                if let Some(mask) = &tape.masks[pi] {
                    for (t, &m) in tmp.iter_mut().zip(mask.row(i)) {
                        *t = *t * m;
                    }
                }
                for (a, &b) in dnormed.row_mut(i).iter_mut().zip(&tmp) {
                    *a = *a + b;
                }
            }
        }

        dh = dh_mid;
        for i in 0..n {
            rms_norm_backward(
                tape.h_in.row(i),
                &lw.attn_norm,
                tape.inv_attn[i],
                dnormed.row(i),
                dh.row_mut(i),
            );
        }
    }
    grads
}

/// First position trained with adapted weights for `example` under `mode`.
pub fn activation_for(example: &SftExample, mode: AdapterMode) -> usize {
    match mode {
        AdapterMode::Alora => example.t_invoke(),
        AdapterMode::Lora => 0,
    }
}

/// Input tokens (the sequence minus its final token) and the rows whose
/// logits predict each target.
fn loss_layout(example: &SftExample) -> (Vec<TokenId>, Vec<usize>) {
    let mut tokens = example.tokens();
    tokens.pop();
    let rows = example.target_positions().map(|p| p - 1).collect();
    (tokens, rows)
}

pub fn example_loss<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    params: &AdapterParams<T>,
    example: &SftExample,
    mode: AdapterMode,
) -> Result<T> {
    let (tokens, rows) = loss_layout(example);
    let activation = activation_for(example, mode);
    let trace = forward(
        weights,
        config,
        params,
        &tokens,
        activation,
        &rows,
        Dropout::OFF,
    )?;
    sft_loss(&trace.logits, &example.target)
}

/// Loss of one example and its gradient with respect to every factor.
pub fn loss_and_grad<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    params: &AdapterParams<T>,
    example: &SftExample,
    mode: AdapterMode,
    dropout: Dropout,
) -> Result<(T, AdapterParams<T>)> {
    if !(0.0..1.0).contains(&dropout.rate) {
        return Err(Error::config(format!(
            "dropout rate {} outside [0, 1)",
            dropout.rate
        )));
    }
    let (tokens, rows) = loss_layout(example);
    let activation = activation_for(example, mode);
    let trace = forward(weights, config, params, &tokens, activation, &rows, dropout)?;
    let (loss, dlogits) = softmax_xent(&trace.logits, &example.target)?;
    let grads = backward(weights, config, params, &trace, &rows, activation, &dlogits);
    Ok((loss, grads))
}

/// Rotated key rows and value rows of every layer, as the training forward
/// pass computes them.
pub fn kv_rows<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &ModelConfig,
    params: &AdapterParams<T>,
    tokens: &[TokenId],
    activation: usize,
) -> Result<Vec<(Matrix<T>, Matrix<T>)>> {
    let trace = forward(
        weights,
        config,
        params,
        tokens,
        activation,
        &[],
        Dropout::OFF,
    )?;
    Ok(trace.layers.into_iter().map(|t| (t.k, t.v)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Relative gap `|a - b| / max(|a|, |b|, floor)`. The floor keeps entries
/// whose true gradient is essentially zero from dividing by round-off.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central differences of the f64 loss against the analytic gradient, over
/// every factor entry. Entries are checked in parallel under `exec`.
pub fn finite_difference_check(
    weights: &ModelWeights<f64>,
    config: &ModelConfig,
    params: &AdapterParams<f64>,
    example: &SftExample,
    mode: AdapterMode,
    eps: f64,
    exec: crate::exec::Exec,
) -> Result<GradCheck> {
    let (_, grads) = loss_and_grad(weights, config, params, example, mode, Dropout::OFF)?;
    let analytic: Vec<f64> = grads.tensors().concat();
    let errors = exec.map_range(analytic.len(), |flat| -> Result<f64> {
        let probe = |delta: f64| {
            let mut p = params.clone();
            let mut k = flat;
            for t in p.tensors_mut() {
                if k < t.len() {
                    t[k] += delta;
                    break;
                }
                k -= t.len();
            }
            example_loss(weights, config, &p, example, mode)
        };
        let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
        Ok(relative_error(numeric, analytic[flat], REL_ERROR_FLOOR))
    });
    let mut max_rel_error = 0.0f64;
    for e in errors {
        max_rel_error = max_rel_error.max(e?);
    }
    Ok(GradCheck {
        checked: analytic.len(),
        max_rel_error,
    })
}
