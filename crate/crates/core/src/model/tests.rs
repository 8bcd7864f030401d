use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adapters::{
    build_policy, ActivationPoint, AdapterMode, AdapterShape, AdapterSpec, LowRankDelta,
    ProjectionPolicy,
};
use crate::cost::CostLedger;
use crate::kv_cache::CacheStore;
use crate::tensor::{l2_norm, Matrix};

fn setup(seed: u64) -> (ModelConfig, ModelWeights) {
    let cfg = ModelConfig {
        max_positions: 512,
        ..ModelConfig::tiny()
    };
    let w = ModelWeights::random(&cfg, seed).unwrap();
    (cfg, w)
}

fn tokens(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn run(
    cfg: &ModelConfig,
    w: &ModelWeights,
    policy: &ProjectionPolicy,
    segments: &[&[u32]],
) -> (Vec<f32>, CacheStore) {
    let mut cache = CacheStore::new(cfg);
    let mut ledger = CostLedger::default();
    let mut logits = Vec::new();
    let mut pos = 0;
    for seg in segments {
        logits = forward_segment(seg, pos, w, cfg, policy, &mut cache, &mut ledger).unwrap();
        pos += seg.len();
    }
    (logits, cache)
}

#[test]
fn base_projection_is_plain_product() {
    let (_, w) = setup(1);
    let x = HiddenRows {
        rows: Matrix::from_fn(1, 16, |_, j| j as f32 * 0.1 - 0.5),
        start_position: 0,
    };
    let t = project_segment(
        &x,
        0,
        &w,
        &ProjectionPolicy::base(),
        &mut CostLedger::default(),
    )
    .unwrap();
    assert_eq!(t.q, x.rows.matmul(&w.layers[0].w_q).unwrap());
    assert_eq!(t.v, x.rows.matmul(&w.layers[0].w_v).unwrap());
}

#[test]
fn two_by_two_adapted_projection() {
    // x=[[1,0]], W_Q=[[1,2],[3,4]], Δ_Q=[[0.5,0],[0,0]] -> Q=[[1.5,2]]
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 2,
        d_head: 2,
        vocab_size: 4,
        max_positions: 8,
        rope_theta: 10_000.0,
    };
    let mut w = ModelWeights::random(&cfg, 0).unwrap();
    w.layers[0].w_q = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut spec = AdapterSpec::random(
        &cfg,
        AdapterShape::new(1, AdapterMode::Lora, 1).with_alpha(1.0),
        0.1,
        0,
    )
    .unwrap();
    spec.layers[0].deltas[0] = Some(
        LowRankDelta::new(
            Matrix::new(2, 1, vec![0.5, 0.0]).unwrap(),
            Matrix::new(1, 2, vec![1.0, 0.0]).unwrap(),
            1.0,
        )
        .unwrap(),
    );
    let policy = build_policy(&spec, None).unwrap();
    let x = HiddenRows {
        rows: Matrix::new(1, 2, vec![1.0, 0.0]).unwrap(),
        start_position: 0,
    };
    let t = project_segment(&x, 0, &w, &policy, &mut CostLedger::default()).unwrap();
    assert_eq!(t.q.as_slice(), &[1.5, 2.0]);
}

#[test]
fn projection_shape_mismatch_is_config_error() {
    let (_, w) = setup(1);
    let x = HiddenRows {
        rows: Matrix::zeros(2, 15),
        start_position: 0,
    };
    let r = project_segment(
        &x,
        0,
        &w,
        &ProjectionPolicy::base(),
        &mut CostLedger::default(),
    );
    assert!(matches!(r, Err(crate::Error::Config(_))));
}

#[test]
fn zero_delta_projection_is_bitwise_base() {
    let (cfg, w) = setup(2);
    let spec = AdapterSpec::random(&cfg, AdapterShape::new(1, AdapterMode::Lora, 4), 0.3, 9)
        .unwrap()
        .zeroed();
    let policy = build_policy(&spec, None).unwrap();
    let x = HiddenRows {
        rows: Matrix::from_fn(3, 16, |i, j| ((i * 16 + j) as f32 * 0.37).sin()),
        start_position: 4,
    };
    let mut l = CostLedger::default();
    let a = project_segment(&x, 1, &w, &policy, &mut l).unwrap();
    let b = project_segment(&x, 1, &w, &ProjectionPolicy::base(), &mut l).unwrap();
    assert_eq!(bits(a.k.as_slice()), bits(b.k.as_slice()));
    assert_eq!(bits(a.q.as_slice()), bits(b.q.as_slice()));
}

#[test]
fn rope_position_zero_is_identity_and_odd_width_rejected() {
    let cfg = ModelConfig::tiny();
    let v: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
    assert_eq!(rope_rotate(&v, 0, &cfg).unwrap(), v);
    assert!(rope_rotate(&v[..7], 3, &cfg).is_err());
    let odd = ModelConfig { d_head: 3, ..cfg };
    assert!(rope_rotate(&v[..3], 1, &odd).is_err());
    let (a, b) = rotate_pair_f32(1.0, 0.0, std::f64::consts::FRAC_PI_2);
    assert!(a.abs() < 1e-6 && (b - 1.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn rope_preserves_norm(seed in any::<u64>(), pos in 0usize..10_000) {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..cfg.d_head).map(|_| rng.random_range(-2.0..2.0)).collect();
        let r = rope_rotate(&v, pos, &cfg).unwrap();
        prop_assert!((l2_norm(&r) - l2_norm(&v)).abs() <= 1e-6 * l2_norm(&v).max(1.0));
    }

    #[test]
    fn rope_matches_explicit_rotation_matrices(seed in any::<u64>(), pos in 0usize..5000) {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..cfg.d_head).map(|_| rng.random_range(-2.0..2.0)).collect();
        let vf: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        let got = rope_rotate(&vf, pos, &cfg).unwrap();
        for i in 0..cfg.d_head / 2 {
            let theta = pos as f64 / cfg.rope_theta.powf(2.0 * i as f64 / cfg.d_head as f64);
            let m = [[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
            let x = [vf[2 * i] as f64, vf[2 * i + 1] as f64];
            let e0 = m[0][0] * x[0] + m[0][1] * x[1];
            let e1 = m[1][0] * x[0] + m[1][1] * x[1];
            prop_assert!((got[2 * i] as f64 - e0).abs() < 1e-5);
            prop_assert!((got[2 * i + 1] as f64 - e1).abs() < 1e-5);
        }
    }
}

#[test]
fn attend_single_position_returns_value_times_wo() {
    let cfg = ModelConfig::tiny();
    let w = ModelWeights::random(&cfg, 3).unwrap();
    let q = HiddenRows {
        rows: Matrix::from_fn(1, 16, |_, j| j as f32),
        start_position: 0,
    };
    let k = Matrix::from_fn(1, 16, |_, j| -(j as f32));
    let v = Matrix::from_fn(1, 16, |_, j| (j as f32 * 0.3).cos());
    let out = attend(
        &q,
        &k,
        &v,
        &w.layers[0].w_o,
        &cfg,
        &mut CostLedger::default(),
    )
    .unwrap();
    assert_eq!(out.rows, v.matmul(&w.layers[0].w_o).unwrap());
}

#[test]
fn attend_equal_keys_averages_values() {
    let cfg = ModelConfig::tiny();
    let q = HiddenRows {
        rows: Matrix::from_fn(1, 16, |_, j| j as f32 * 0.1),
        start_position: 1,
    };
    let k = Matrix::from_fn(2, 16, |_, j| 1.0 + j as f32);
    let v = Matrix::from_fn(2, 16, |i, j| if i == 0 { j as f32 } else { 2.0 - j as f32 });
    let out = attend(
        &q,
        &k,
        &v,
        &Matrix::identity(16),
        &cfg,
        &mut CostLedger::default(),
    )
    .unwrap();
    for j in 0..16 {
        assert!((out.rows.get(0, j) - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attend_rejects_uncovered_query() {
    let cfg = ModelConfig::tiny();
    let q = HiddenRows {
        rows: Matrix::zeros(2, 16),
        start_position: 3,
    };
    let k = Matrix::zeros(4, 16);
    let r = attend(
        &q,
        &k,
        &k,
        &Matrix::identity(16),
        &cfg,
        &mut CostLedger::default(),
    );
    assert!(matches!(r, Err(crate::Error::Contract(_))));
}

/// Full-sequence transformer that never touches a cache, written out with
/// explicit loops. It follows the same arithmetic order as the engine.
fn dense_reference(cfg: &ModelConfig, w: &ModelWeights, toks: &[u32]) -> Vec<f32> {
    let (n, d, dh) = (toks.len(), cfg.d_model, cfg.d_head);
    let mut h: Vec<Vec<f32>> = toks
        .iter()
        .map(|&t| w.token_embedding.row(t as usize).to_vec())
        .collect();
    let norm = |x: &[f32], g: &[f32]| -> Vec<f32> {
        let mut ss = 0.0f32;
        for v in x {
            ss += v * v;
        }
        let inv = 1.0 / (ss / x.len() as f32 + 1e-5f32).sqrt();
        x.iter().zip(g).map(|(v, g)| g * (v * inv)).collect()
    };
    let matvec = |x: &[f32], m: &Matrix<f32>| -> Vec<f32> {
        let mut out = vec![0.0f32; m.cols()];
        for (i, xi) in x.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += xi * m.get(i, j);
            }
        }
        out
    };
    for lw in &w.layers {
        let a: Vec<Vec<f32>> = h.iter().map(|x| norm(x, &lw.attn_norm)).collect();
        let mut q: Vec<Vec<f32>> = a.iter().map(|x| matvec(x, &lw.w_q)).collect();
        let mut k: Vec<Vec<f32>> = a.iter().map(|x| matvec(x, &lw.w_k)).collect();
        let v: Vec<Vec<f32>> = a.iter().map(|x| matvec(x, &lw.w_v)).collect();
        for p in 0..n {
            q[p] = (0..cfg.n_heads)
                .flat_map(|hd| rope_rotate(&q[p][hd * dh..(hd + 1) * dh], p, cfg).unwrap())
                .collect();
            k[p] = (0..cfg.n_heads)
                .flat_map(|hd| rope_rotate(&k[p][hd * dh..(hd + 1) * dh], p, cfg).unwrap())
                .collect();
        }
        for p in 0..n {
            let mut o = vec![0.0f32; d];
            for hd in 0..cfg.n_heads {
                let s = hd * dh;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut scores: Vec<f32> = (0..=p)
                    .map(|j| {
                        let mut acc = 0.0f32;
                        for c in 0..dh {
                            acc += q[p][s + c] * k[j][s + c];
                        }
                        acc * scale
                    })
                    .collect();
                let max = scores
                    .iter()
                    .fold(f32::NEG_INFINITY, |m, &x| if x > m { x } else { m });
                let mut sum = 0.0f32;
                for x in scores.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for (j, x) in scores.iter().enumerate() {
                    let wgt = x / sum;
                    for c in 0..dh {
                        o[s + c] += wgt * v[j][s + c];
                    }
                }
            }
            let proj = matvec(&o, &lw.w_o);
            for c in 0..d {
                h[p][c] += proj[c];
            }
        }
        for row in h.iter_mut() {
            let m = norm(row, &lw.mlp_norm);
            let u: Vec<f32> = matvec(&m, &lw.w_up)
                .into_iter()
                .map(kernels::gelu)
                .collect();
            let z = matvec(&u, &lw.w_down);
            for c in 0..d {
                row[c] += z[c];
            }
        }
    }
    matvec(&norm(&h[n - 1], &w.final_norm), &w.unembedding)
}

#[test]
fn cached_forward_matches_dense_reference() {
    for seed in 0..4 {
        let (cfg, w) = setup(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toks = tokens(&mut rng, 4, cfg.vocab_size);
        let (logits, _) = run(&cfg, &w, &ProjectionPolicy::base(), &[&toks]);
        assert_eq!(bits(&logits), bits(&dense_reference(&cfg, &w, &toks)));
        let (inc, _) = run(
            &cfg,
            &w,
            &ProjectionPolicy::base(),
            &[&toks[..1], &toks[1..3], &toks[3..]],
        );
        assert_eq!(bits(&inc), bits(&logits));
    }
}

#[test]
fn single_token_prefill() {
    let (cfg, w) = setup(5);
    let (logits, cache) = run(&cfg, &w, &ProjectionPolicy::base(), &[&[3]]);
    assert!(logits.iter().all(|v| v.is_finite()));
    for l in 0..cfg.n_layers {
        assert_eq!(cache.layer_len(l), 1);
    }
}

#[test]
fn one_segment_equals_eight_single_steps() {
    let (cfg, w) = setup(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let toks = tokens(&mut rng, 8, cfg.vocab_size);
    let (batch, bc) = run(&cfg, &w, &ProjectionPolicy::base(), &[&toks]);
    let singles: Vec<&[u32]> = toks.chunks(1).collect();
    let (inc, ic) = run(&cfg, &w, &ProjectionPolicy::base(), &singles);
    assert_eq!(bits(&batch), bits(&inc));
    for l in 0..cfg.n_layers {
        for p in 0..8 {
            assert_eq!(
                bits(bc.key_row(l, p).unwrap()),
                bits(ic.key_row(l, p).unwrap())
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_segmentation_is_bitwise_equal(seed in any::<u64>(), cuts in proptest::collection::vec(1usize..5, 1..6)) {
        let (cfg, w) = setup(seed % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = cuts.iter().sum();
        let toks = tokens(&mut rng, total, cfg.vocab_size);
        let spec = AdapterSpec::random(&cfg, AdapterShape::new(2, AdapterMode::Alora, 4).with_invocation(vec![1]), 0.2, seed).unwrap();
        let policy = build_policy(&spec, Some(ActivationPoint(total / 2))).unwrap();
        let mut segs = Vec::new();
        let mut at = 0;
        for c in &cuts {
            segs.push(&toks[at..at + c]);
            at += c;
        }
        let (a, _) = run(&cfg, &w, &policy, &[&toks]);
        let (b, _) = run(&cfg, &w, &policy, &segs);
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn causality(seed in any::<u64>(), prefix in 1usize..10, extra in 1usize..6) {
        let (cfg, w) = setup(seed % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toks = tokens(&mut rng, prefix + extra, cfg.vocab_size);
        let (short, sc) = run(&cfg, &w, &ProjectionPolicy::base(), &[&toks[..prefix]]);
        let (_, lc) = run(&cfg, &w, &ProjectionPolicy::base(), &[&toks]);
        // Logits at the prefix's last position, recomputed inside the longer run.
        let (again, _) = run(&cfg, &w, &ProjectionPolicy::base(), &[&toks[..prefix]]);
        prop_assert_eq!(bits(&short), bits(&again));
        for l in 0..cfg.n_layers {
            for p in 0..prefix {
                prop_assert_eq!(bits(sc.key_row(l, p).unwrap()), bits(lc.key_row(l, p).unwrap()));
                prop_assert_eq!(bits(sc.value_row(l, p).unwrap()), bits(lc.value_row(l, p).unwrap()));
            }
        }
    }
}

#[test]
fn zero_delta_adapter_matches_base_forward() {
    let (cfg, w) = setup(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let toks = tokens(&mut rng, 9, cfg.vocab_size);
    let spec = AdapterSpec::random(&cfg, AdapterShape::new(1, AdapterMode::Lora, 8), 0.3, 1)
        .unwrap()
        .zeroed();
    let (a, _) = run(&cfg, &w, &build_policy(&spec, None).unwrap(), &[&toks]);
    let (b, _) = run(&cfg, &w, &ProjectionPolicy::base(), &[&toks]);
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn forward_rejects_misaligned_cache() {
    let (cfg, w) = setup(8);
    let mut cache = CacheStore::new(&cfg);
    let mut l = CostLedger::default();
    let r = forward_segment(
        &[1, 2],
        3,
        &w,
        &cfg,
        &ProjectionPolicy::base(),
        &mut cache,
        &mut l,
    );
    assert!(matches!(r, Err(crate::Error::Contract(_))));
}

#[test]
fn greedy_pick_cases() {
    assert_eq!(greedy_pick(&[0.1, 0.9, 0.3]).unwrap(), 1);
    assert_eq!(greedy_pick(&[0.5, 0.5]).unwrap(), 0);
    assert!(greedy_pick(&[]).is_err());
    assert!(greedy_pick(&[0.1, f32::NAN]).is_err());
    assert_eq!(greedy_pick_excluding(&[0.9, 0.5, 0.5], Some(0)).unwrap(), 1);
}

proptest! {
    #[test]
    fn greedy_pick_matches_linear_scan(v in proptest::collection::vec(-4i32..4, 1..50)) {
        let logits: Vec<f32> = v.iter().map(|&x| x as f32 * 0.5).collect();
        let mut best = 0;
        for i in 0..logits.len() {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        prop_assert_eq!(greedy_pick(&logits).unwrap() as usize, best);
    }
}

#[test]
fn checkpoint_roundtrip_and_determinism() {
    let (cfg, w) = setup(9);
    let bytes = encode_checkpoint(&cfg, &w);
    assert_eq!(
        bytes,
        encode_checkpoint(&cfg, &ModelWeights::random(&cfg, 9).unwrap())
    );
    assert_eq!(&bytes[..4], b"ALRE");
    let (c2, w2) = decode_checkpoint(&bytes).unwrap();
    assert_eq!((c2, w2), (cfg, w));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 4]),
        Err(crate::Error::Format { .. })
    ));
}
