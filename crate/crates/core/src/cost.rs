//! Exact operation and byte accounting, and closed-form predictions of the
//! same counters for the first adapter token.
//!
//! Counting conventions (shared by instrumentation and prediction):
//! * an `m×k · k×n` product costs `2·m·k·n` matmul flops;
//! * each causal (query, key) pair costs `2·d_model` score flops plus
//!   `2·d_model` weighted-sum flops, and one softmax op per head;
//! * norms, activations and rotary embeddings are not counted.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub matmul_flops: u64,
    pub attention_score_flops: u64,
    pub softmax_ops: u64,
    pub rows_projected_fresh: u64,
    pub rows_reused: u64,
    pub cache_bytes_incremental: u64,
    pub wall_ns: u64,
    /// Set when any counter saturated.
    pub overflowed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostEvent {
    Matmul {
        m: u64,
        k: u64,
        n: u64,
    },
    /// `pairs` causal (query, key) pairs at width `d_model` split over `n_heads`.
    Attention {
        pairs: u64,
        d_model: u64,
        n_heads: u64,
    },
    FreshRows(u64),
    ReusedRows(u64),
    CacheBytes(u64),
    Wall(u64),
}

fn add(counter: &mut u64, amount: Option<u64>, overflowed: &mut bool) {
    match amount.and_then(|a| counter.checked_add(a)) {
        Some(v) => *counter = v,
        None => {
            *counter = u64::MAX;
            *overflowed = true;
        }
    }
}

impl CostLedger {
    pub fn record(&mut self, event: CostEvent) {
        let of = &mut self.overflowed;
        match event {
            CostEvent::Matmul { m, k, n } => {
                let f = 2u64
                    .checked_mul(m)
                    .and_then(|x| x.checked_mul(k))
                    .and_then(|x| x.checked_mul(n));
                add(&mut self.matmul_flops, f, of);
            }
            CostEvent::Attention {
                pairs,
                d_model,
                n_heads,
            } => {
                let f = pairs.checked_mul(4).and_then(|x| x.checked_mul(d_model));
                add(&mut self.attention_score_flops, f, of);
                add(&mut self.softmax_ops, pairs.checked_mul(n_heads), of);
            }
            CostEvent::FreshRows(n) => add(&mut self.rows_projected_fresh, Some(n), of),
            CostEvent::ReusedRows(n) => add(&mut self.rows_reused, Some(n), of),
            CostEvent::CacheBytes(n) => add(&mut self.cache_bytes_incremental, Some(n), of),
            CostEvent::Wall(n) => add(&mut self.wall_ns, Some(n), of),
        }
    }

    /// Fieldwise sum.
    pub fn merge(&mut self, other: &CostLedger) {
        let of = &mut self.overflowed;
        add(&mut self.matmul_flops, Some(other.matmul_flops), of);
        add(
            &mut self.attention_score_flops,
            Some(other.attention_score_flops),
            of,
        );
        add(&mut self.softmax_ops, Some(other.softmax_ops), of);
        add(
            &mut self.rows_projected_fresh,
            Some(other.rows_projected_fresh),
            of,
        );
        add(&mut self.rows_reused, Some(other.rows_reused), of);
        add(
            &mut self.cache_bytes_incremental,
            Some(other.cache_bytes_incremental),
            of,
        );
        add(&mut self.wall_ns, Some(other.wall_ns), of);
        self.overflowed |= other.overflowed;
    }

    pub fn merged<'a>(ledgers: impl IntoIterator<Item = &'a CostLedger>) -> CostLedger {
        let mut out = CostLedger::default();
        for l in ledgers {
            out.merge(l);
        }
        out
    }

    pub fn total_flops(&self) -> u64 {
        self.matmul_flops
            .saturating_add(self.attention_score_flops)
            .saturating_add(self.softmax_ops)
    }

    /// The ledger with its wall-clock field cleared, for determinism checks.
    pub fn without_wall(mut self) -> Self {
        self.wall_ns = 0;
        self
    }
}

/// Parameters of one first-token cost prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct CostQuery {
    /// Input tokens covered by a base cache.
    pub t_cache: usize,
    /// Input tokens without cache (the invocation sequence and what follows).
    pub t_new: usize,
    /// Adapters invoked on the same cached input.
    pub n_adapters: usize,
    pub mode: AdapterMode,
    pub config: ModelConfig,
    pub rank: usize,
    /// Adapted projections per layer.
    pub targets: usize,
    /// Uncached positions an activated adapter still projects with base
    /// weights (the first invocation token, under the activation rule).
    pub base_fresh_rows: usize,
}

impl CostQuery {
    pub fn new(
        config: &ModelConfig,
        mode: AdapterMode,
        t_cache: usize,
        t_new: usize,
        n: usize,
        rank: usize,
    ) -> Self {
        Self {
            t_cache,
            t_new,
            n_adapters: n,
            mode,
            config: config.clone(),
            rank,
            targets: 3,
            base_fresh_rows: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_new == 0 || self.n_adapters == 0 {
            return Err(Error::contract("cost queries need T_new >= 1 and N >= 1"));
        }
        if self.mode == AdapterMode::Alora && self.base_fresh_rows > self.t_new {
            return Err(Error::contract(
                "more base-projected fresh rows than fresh tokens",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub matmul_flops: u64,
    pub attention_score_flops: u64,
    pub softmax_ops: u64,
    pub fresh_rows: u64,
    pub bytes: u64,
}

impl Prediction {
    pub fn flops(&self) -> u64 {
        self.matmul_flops + self.attention_score_flops + self.softmax_ops
    }
}

/// Predicts the counters for producing the first adapter token and feeding it
/// back: `T_new + 1` fresh rows for an activated adapter (its uncached input
/// plus the generated token), `T_cache + T_new + 1` for LoRA, which cannot
/// reuse base rows. Memory is the input cache each adapter adds on top of the
/// shared base cache.
pub fn predict_first_token(q: &CostQuery) -> Result<Prediction> {
    q.validate()?;
    let c = &q.config;
    let (layers, d, heads, vocab) = (
        c.n_layers as u64,
        c.d_model as u64,
        c.n_heads as u64,
        c.vocab_size as u64,
    );
    let (t_cache, t_new, n) = (q.t_cache as u64, q.t_new as u64, q.n_adapters as u64);
    let (start, fresh, adapted) = match q.mode {
        AdapterMode::Alora => (t_cache, t_new + 1, t_new + 1 - q.base_fresh_rows as u64),
        AdapterMode::Lora => (0, t_cache + t_new + 1, t_cache + t_new + 1),
    };
    // Per fresh row and layer: Q, K, V, O projections (4·2d²) and the MLP
    // (2·2·d·4d) give 24·d² flops; each adapted projection adds 2·2·d·r.
    let dense = layers * fresh * 24 * d * d;
    let low_rank = layers * adapted * q.targets as u64 * 4 * d * q.rank as u64;
    // Logits are computed for the last prefill row and for the fed-back token.
    let head = 2 * 2 * d * vocab;
    // Query at absolute position p attends to p + 1 keys.
    let pairs = fresh * start + fresh * (fresh + 1) / 2;
    let bytes = match q.mode {
        AdapterMode::Alora => t_new,
        AdapterMode::Lora => t_cache + t_new,
    } * c.kv_row_bytes();
    Ok(Prediction {
        matmul_flops: n * (dense + low_rank + head),
        attention_score_flops: n * layers * pairs * 4 * d,
        softmax_ops: n * layers * pairs * heads,
        fresh_rows: n * fresh,
        bytes: n * bytes,
    })
}

/// One measured workload: what was run and what the ledgers said.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub query: CostQuery,
    pub first_token: CostLedger,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub t_cache: usize,
    pub t_new: usize,
    pub n_adapters: usize,
    pub measured_ratio: f64,
    pub predicted_ratio: f64,
    pub relative_deviation: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpeedupReport {
    pub rows: Vec<SpeedupRow>,
    pub diagnostics: Vec<String>,
}

impl SpeedupReport {
    /// Whether the measured ratio strictly increases with `T_cache` within
    /// every `(T_new, N)` group.
    pub fn ratios_increase_with_cache(&self) -> bool {
        let mut rows: Vec<&SpeedupRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| (r.t_new, r.n_adapters, r.t_cache));
        rows.windows(2).all(|w| {
            (w[0].t_new, w[0].n_adapters) != (w[1].t_new, w[1].n_adapters)
                || w[1].measured_ratio > w[0].measured_ratio
        })
    }
}

/// Pairs LoRA and aLoRA measurements sharing `(T_cache, T_new, N)` and
/// reports measured and predicted LoRA/aLoRA first-token flop ratios.
pub fn speedup_report(measurements: &[Measurement]) -> Result<SpeedupReport> {
    let mut report = SpeedupReport::default();
    let mut keys: Vec<(usize, usize, usize)> = Vec::new();
    for m in measurements {
        if m.query.t_new == 0 {
            report.diagnostics.push(format!(
                "skipped {} measurement at T_cache={} with zero-length adapter input",
                m.query.mode, m.query.t_cache
            ));
            continue;
        }
        let k = (m.query.t_cache, m.query.t_new, m.query.n_adapters);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (t_cache, t_new, n) in keys {
        let find = |mode| {
            let mut it = measurements.iter().filter(|m| {
                m.query.mode == mode
                    && (m.query.t_cache, m.query.t_new, m.query.n_adapters) == (t_cache, t_new, n)
            });
            it.next()
        };
        let (Some(lora), Some(alora)) = (find(AdapterMode::Lora), find(AdapterMode::Alora)) else {
            return Err(Error::Report(format!(
                "measurement at T_cache={t_cache}, T_new={t_new}, N={n} has no LoRA/aLoRA partner"
            )));
        };
        let measured =
            lora.first_token.total_flops() as f64 / alora.first_token.total_flops() as f64;
        let predicted = predict_first_token(&lora.query)?.flops() as f64
            / predict_first_token(&alora.query)?.flops() as f64;
        report.rows.push(SpeedupRow {
            t_cache,
            t_new,
            n_adapters: n,
            measured_ratio: measured,
            predicted_ratio: predicted,
            relative_deviation: (measured - predicted).abs() / predicted,
        });
    }
    report
        .rows
        .sort_by_key(|r| (r.t_new, r.n_adapters, r.t_cache));
    Ok(report)
}

pub const CSV_HEADER: [&str; 11] = [
    "mode",
    "seed",
    "T_cache",
    "T_new",
    "N",
    "first_token_flops",
    "total_flops",
    "cache_bytes_incremental",
    "wall_ns",
    "predicted_flops",
    "predicted_bytes",
];

/// One line of the benchmark report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchRow {
    pub mode: AdapterMode,
    pub seed: u64,
    pub t_cache: usize,
    pub t_new: usize,
    pub n_adapters: usize,
    pub first_token_flops: u64,
    pub total_flops: u64,
    pub cache_bytes_incremental: u64,
    pub wall_ns: u64,
    pub predicted_flops: u64,
    pub predicted_bytes: u64,
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Report(format!("writing CSV: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.seed.to_string(),
            r.t_cache.to_string(),
            r.t_new.to_string(),
            r.n_adapters.to_string(),
            r.first_token_flops.to_string(),
            r.total_flops.to_string(),
            r.cache_bytes_incremental.to_string(),
            r.wall_ns.to_string(),
            r.predicted_flops.to_string(),
            r.predicted_bytes.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Report(format!("writing CSV: {e}")))?;
    Ok(())
}
