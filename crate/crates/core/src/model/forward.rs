//! Projection, attention and the cached forward pass.

use crate::adapters::{add_low_rank, Projection, ProjectionPolicy, Verdict};
use crate::cost::{CostEvent, CostLedger};
use crate::error::{Error, Result};
use crate::kv_cache::{CacheStore, Provenance};
use crate::model::kernels::{
    attention_weights, gelu, rms_norm, rope_row, rotate_pair, weighted_values,
};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::{vec_mat, Matrix};
use crate::TokenId;

/// Hidden states for a contiguous run of positions.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenRows {
    /// `positions × d_model`
    pub rows: Matrix<f32>,
    /// Absolute position of the first row.
    pub start_position: usize,
}

/// Un-rotated query, key and value rows of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionTriple {
    pub q: Matrix<f32>,
    pub k: Matrix<f32>,
    pub v: Matrix<f32>,
}

/// Projects each row of `x` with base or adapted weights, as `policy`
/// decides for its absolute position. Adapted rows add the low-rank update
/// after the dense product.
pub fn project_segment(
    x: &HiddenRows,
    layer: usize,
    weights: &ModelWeights,
    policy: &ProjectionPolicy<'_>,
    ledger: &mut CostLedger,
) -> Result<ProjectionTriple> {
    let lw = weights
        .layers
        .get(layer)
        .ok_or_else(|| Error::config(format!("no layer {layer}")))?;
    let d = lw.w_q.rows();
    if x.rows.cols() != d {
        return Err(Error::config(format!(
            "hidden rows are {} wide, model width is {d}",
            x.rows.cols()
        )));
    }
    if let Some(spec) = policy.adapter() {
        if spec.layers.len() != weights.layers.len() {
            return Err(Error::config(format!(
                "{} has {} layers, model has {}",
                spec.id,
                spec.layers.len(),
                weights.layers.len()
            )));
        }
    }
    let n = x.rows.rows();
    let adapted_rows = (0..n)
        .filter(|&i| policy.verdict(x.start_position + i) == Verdict::Adapted)
        .count() as u64;

    let mut out = [
        Matrix::zeros(n, d),
        Matrix::zeros(n, d),
        Matrix::zeros(n, d),
    ];
    for p in Projection::ALL {
        let w = lw.projection(p);
        let dst = &mut out[p.index()];
        ledger.record(CostEvent::Matmul {
            m: n as u64,
            k: d as u64,
            n: d as u64,
        });
        for i in 0..n {
            vec_mat(x.rows.row(i), w, dst.row_mut(i));
        }
        let Some(delta) = policy.adapter().and_then(|s| s.delta(layer, p)) else {
            continue;
        };
        if delta.d_model() != d {
            return Err(Error::config(format!(
                "layer {layer} {} delta is {} wide, model is {d}",
                p.name(),
                delta.d_model()
            )));
        }
        let r = delta.rank();
        let scale = delta.scale::<f32>();
        let mut low = vec![0.0; r];
        let mut wide = vec![0.0; d];
        for i in 0..n {
            if policy.verdict(x.start_position + i) == Verdict::Adapted {
                add_low_rank(
                    x.rows.row(i),
                    &delta.a,
                    &delta.b,
                    scale,
                    &mut low,
                    &mut wide,
                    dst.row_mut(i),
                );
            }
        }
        ledger.record(CostEvent::Matmul {
            m: adapted_rows,
            k: d as u64,
            n: r as u64,
        });
        ledger.record(CostEvent::Matmul {
            m: adapted_rows,
            k: r as u64,
            n: d as u64,
        });
    }
    let [q, k, v] = out;
    Ok(ProjectionTriple { q, k, v })
}

/// Rotary embedding of one head-sized vector at `position`.
pub fn rope_rotate(vec: &[f32], position: usize, config: &ModelConfig) -> Result<Vec<f32>> {
    if !config.d_head.is_multiple_of(2) {
        return Err(Error::config(format!("d_head {} is odd", config.d_head)));
    }
    if vec.len() != config.d_head {
        return Err(Error::config(format!(
            "vector of length {} is not head-sized ({})",
            vec.len(),
            config.d_head
        )));
    }
    let mut out = vec.to_vec();
    rope_row(&mut out, config.d_head, position, config.rope_theta, false);
    Ok(out)
}

/// Rotates a single pair by an explicit angle; exposed for tests of the
/// rotation itself.
pub fn rotate_pair_f32(x0: f32, x1: f32, angle: f64) -> (f32, f32) {
    rotate_pair(x0, x1, angle)
}

/// Causal multi-head attention of queries at `start..start+n` over key and
/// value rows `0..start+n`. Returns the concatenated head outputs before the
/// output projection.
pub(crate) fn attend_rows(
    q: &Matrix<f32>,
    start: usize,
    keys: &[&[f32]],
    values: &[&[f32]],
    n_heads: usize,
    d_head: usize,
    ledger: &mut CostLedger,
) -> Result<Matrix<f32>> {
    let n = q.rows();
    if start + n > keys.len() || keys.len() != values.len() {
        return Err(Error::contract(format!(
            "queries reach position {} but keys cover {} and values {} positions",
            start + n,
            keys.len(),
            values.len()
        )));
    }
    let d = n_heads * d_head;
    let mut out = Matrix::zeros(n, d);
    let mut weights = vec![0.0f32; start + n];
    for i in 0..n {
        let pos = start + i;
        let w = &mut weights[..=pos];
        for h in 0..n_heads {
            let span = h * d_head..(h + 1) * d_head;
            attention_weights(&q.row(i)[span.clone()], |j| &keys[j][span.clone()], w);
            weighted_values(
                w,
                |j| &values[j][span.clone()],
                &mut out.row_mut(i)[span.clone()],
            );
        }
    }
    let pairs = (n * start + n * (n + 1) / 2) as u64;
    ledger.record(CostEvent::Attention {
        pairs,
        d_model: d as u64,
        n_heads: n_heads as u64,
    });
    Ok(out)
}

/// Dense attention over explicit key/value matrices, followed by `w_o`.
/// `q_new` holds rotated queries for positions `start..start+n`; `k_all` and
/// `v_all` cover positions `0..start+n` at least.
pub fn attend(
    q_new: &HiddenRows,
    k_all: &Matrix<f32>,
    v_all: &Matrix<f32>,
    w_o: &Matrix<f32>,
    config: &ModelConfig,
    ledger: &mut CostLedger,
) -> Result<HiddenRows> {
    let keys: Vec<&[f32]> = (0..k_all.rows()).map(|j| k_all.row(j)).collect();
    let values: Vec<&[f32]> = (0..v_all.rows()).map(|j| v_all.row(j)).collect();
    let heads = attend_rows(
        &q_new.rows,
        q_new.start_position,
        &keys,
        &values,
        config.n_heads,
        config.d_head,
        ledger,
    )?;
    let rows = project_out(&heads, w_o, ledger);
    Ok(HiddenRows {
        rows,
        start_position: q_new.start_position,
    })
}

fn project_out(x: &Matrix<f32>, w: &Matrix<f32>, ledger: &mut CostLedger) -> Matrix<f32> {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for i in 0..x.rows() {
        vec_mat(x.row(i), w, out.row_mut(i));
    }
    ledger.record(CostEvent::Matmul {
        m: x.rows() as u64,
        k: w.rows() as u64,
        n: w.cols() as u64,
    });
    out
}

fn norm_rows(x: &Matrix<f32>, gain: &[f32]) -> Matrix<f32> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        rms_norm(x.row(i), gain, out.row_mut(i));
    }
    out
}

fn add_into(h: &mut Matrix<f32>, delta: &Matrix<f32>) {
    for (a, b) in h.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *a += b;
    }
}

/// Runs `tokens` (absolute positions `start_position..`) through every layer,
/// appending their key/value rows to `cache` tagged with the policy's
/// provenance. Returns the logits of the last position.
pub fn forward_segment(
    tokens: &[TokenId],
    start_position: usize,
    weights: &ModelWeights,
    config: &ModelConfig,
    policy: &ProjectionPolicy<'_>,
    cache: &mut CacheStore,
    ledger: &mut CostLedger,
) -> Result<Vec<f32>> {
    if tokens.is_empty() {
        return Err(Error::contract("forward_segment needs at least one token"));
    }
    if cache.len() != start_position {
        return Err(Error::contract(format!(
            "cache holds {} positions but segment starts at {start_position}",
            cache.len()
        )));
    }
    cache.check_integrity()?;
    if cache.n_layers() != config.n_layers || cache.d_model() != config.d_model {
        return Err(Error::config("cache dimensions do not match the model"));
    }
    let n = tokens.len();
    if start_position + n > config.max_positions {
        return Err(Error::config(format!(
            "sequence of {} positions exceeds max_positions {}",
            start_position + n,
            config.max_positions
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::config(format!(
            "token {t} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let d = config.d_model;
    ledger.record(CostEvent::FreshRows(n as u64));
    let provenance: Vec<Provenance> = (start_position..start_position + n)
        .map(|p| policy.provenance(p))
        .collect();
    cache.append_tokens(tokens);

    let mut h = Matrix::from_fn(n, d, |i, j| {
        weights.token_embedding.get(tokens[i] as usize, j)
    });
    for (layer, lw) in weights.layers.iter().enumerate() {
        let normed = HiddenRows {
            rows: norm_rows(&h, &lw.attn_norm),
            start_position,
        };
        let ProjectionTriple { mut q, mut k, v } =
            project_segment(&normed, layer, weights, policy, ledger)?;
        for i in 0..n {
            let pos = start_position + i;
            rope_row(q.row_mut(i), config.d_head, pos, config.rope_theta, false);
            rope_row(k.row_mut(i), config.d_head, pos, config.rope_theta, false);
        }
        cache.append_rows(layer, k.as_slice(), v.as_slice(), &provenance)?;
        let heads = {
            let view = cache.layer_view(layer);
            attend_rows(
                &q,
                start_position,
                &view.keys,
                &view.values,
                config.n_heads,
                config.d_head,
                ledger,
            )?
        };
        add_into(&mut h, &project_out(&heads, &lw.w_o, ledger));

        let normed = norm_rows(&h, &lw.mlp_norm);
        let mut up = project_out(&normed, &lw.w_up, ledger);
        for v in up.as_mut_slice() {
            *v = gelu(*v);
        }
        add_into(&mut h, &project_out(&up, &lw.w_down, ledger));
    }
    let mut last = vec![0.0; d];
    rms_norm(h.row(n - 1), &weights.final_norm, &mut last);
    let mut logits = vec![0.0; config.vocab_size];
    vec_mat(&last, &weights.unembedding, &mut logits);
    ledger.record(CostEvent::Matmul {
        m: 1,
        k: d as u64,
        n: config.vocab_size as u64,
    });
    Ok(logits)
}

/// Argmax with ties broken toward the lowest token id.
pub fn greedy_pick(logits: &[f32]) -> Result<TokenId> {
    greedy_pick_excluding(logits, None)
}

/// [`greedy_pick`] ignoring `exclude`, used to hold back end-of-sequence.
pub fn greedy_pick_excluding(logits: &[f32], exclude: Option<TokenId>) -> Result<TokenId> {
    if logits.is_empty() {
        return Err(Error::contract("cannot pick from empty logits"));
    }
    if let Some(i) = logits.iter().position(|v| v.is_nan()) {
        return Err(Error::contract(format!("logit {i} is NaN")));
    }
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if exclude == Some(i as TokenId) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i as TokenId)
        .ok_or_else(|| Error::contract("every token was excluded"))
}
