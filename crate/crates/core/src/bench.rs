//! The first-token cost benchmark: one base conversation per cell, then
//! `N` adapters evaluating it with and without base-cache reuse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{AdapterMode, AdapterShape, AdapterSpec};
use crate::cost::{predict_first_token, BenchRow, CostLedger, CostQuery, Measurement};
use crate::engine::{DecodeSettings, Engine, GenerationRequest, GenerationResult};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::verify::RANDOM_ADAPTER_STD;
use crate::TokenId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchPlan {
    pub prompt_lengths: Vec<usize>,
    /// Tokens the base model generates before the adapters are invoked.
    pub answer_tokens: usize,
    /// Tokens each adapter generates.
    pub eval_tokens: usize,
    /// Uncached input per adapter: the invocation sequence followed by
    /// filler up to this length.
    pub new_tokens: usize,
    pub n_adapters: Vec<usize>,
    pub lora_rank: usize,
    pub alora_rank: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self {
            prompt_lengths: vec![256, 1024, 4096],
            answer_tokens: 256,
            eval_tokens: 16,
            new_tokens: 16,
            n_adapters: vec![1, 5],
            lora_rank: 8,
            alora_rank: 32,
            repetitions: 3,
            seed: 0,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self, engine: &Engine) -> Result<()> {
        let c = engine.config();
        let longest = self.prompt_lengths.iter().max().copied().unwrap_or(0);
        let needed = longest + self.answer_tokens + self.new_tokens + self.eval_tokens;
        if needed > c.max_positions {
            return Err(Error::config(format!(
                "plan needs {needed} positions, model allows {}",
                c.max_positions
            )));
        }
        if self.prompt_lengths.contains(&0) || self.n_adapters.contains(&0) {
            return Err(Error::config(
                "prompt lengths and adapter counts must be positive",
            ));
        }
        if self.answer_tokens == 0 || self.eval_tokens == 0 {
            return Err(Error::config(
                "answer and eval token counts must be positive",
            ));
        }
        if self.new_tokens < INVOCATION_LEN {
            return Err(Error::config(format!(
                "new_tokens must cover the {INVOCATION_LEN}-token invocation sequence"
            )));
        }
        for r in [self.lora_rank, self.alora_rank] {
            if r == 0 || r > c.d_model {
                return Err(Error::config(format!("rank {r} outside 1..={}", c.d_model)));
            }
        }
        Ok(())
    }
}

const INVOCATION_LEN: usize = 3;

/// Measured rows plus the first-token measurements behind them.
#[derive(Clone, Debug)]
pub struct BenchOutput {
    pub rows: Vec<BenchRow>,
    pub measurements: Vec<Measurement>,
}

struct Cell {
    prompt_length: usize,
    n: usize,
    cell_index: u64,
}

pub fn run_bench(engine: &Engine, plan: &BenchPlan, exec: Exec) -> Result<BenchOutput> {
    plan.validate(engine)?;
    let mut cells = Vec::new();
    for &prompt_length in &plan.prompt_lengths {
        for &n in &plan.n_adapters {
            for _ in 0..plan.repetitions {
                let cell_index = cells.len() as u64 / plan.repetitions as u64;
                cells.push(Cell {
                    prompt_length,
                    n,
                    cell_index,
                });
            }
        }
    }
    let results = exec.map(&cells, |cell| run_cell(engine, plan, cell));
    let mut out = BenchOutput {
        rows: Vec::new(),
        measurements: Vec::new(),
    };
    for r in results {
        for (row, m) in r? {
            out.rows.push(row);
            out.measurements.push(m);
        }
    }
    Ok(out)
}

fn invocation(vocab: usize) -> Vec<TokenId> {
    let v = vocab as TokenId;
    (v - INVOCATION_LEN as TokenId..v).collect()
}

fn run_cell(
    engine: &Engine,
    plan: &BenchPlan,
    cell: &Cell,
) -> Result<Vec<(BenchRow, Measurement)>> {
    let config = engine.config();
    let inv = invocation(config.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(cell.cell_index);
    let mut tokens =
        |n: usize| -> Vec<TokenId> { (0..n).map(|_| rng.random_range(1..inv[0])).collect() };
    let prompt = tokens(cell.prompt_length);
    let judge = tokens(plan.new_tokens - inv.len());

    // The base answer; its last token is committed to the cache so the
    // cached input is exactly prompt + answer.
    let base = engine.generate(&GenerationRequest::new(
        prompt,
        DecodeSettings::exactly(plan.answer_tokens),
    ))?;
    let last = *base.new_tokens.last().expect("answer_tokens is positive");
    let mut setup = CostLedger::default();
    let base_cache = engine.extend_base(&base.cache, &[last], &mut setup)?;
    let t_cache = base_cache.len();
    let mut extra = inv.clone();
    extra.extend_from_slice(&judge);
    let settings = DecodeSettings::exactly(plan.eval_tokens);

    let adapters = |mode: AdapterMode, rank: usize| -> Result<Vec<AdapterSpec>> {
        (0..cell.n)
            .map(|i| {
                let mut shape = AdapterShape::new(i as u32 + 1, mode, rank);
                if mode == AdapterMode::Alora {
                    shape = shape.with_invocation(inv.clone());
                }
                let seed = plan.seed ^ (cell.cell_index << 16) ^ ((mode as u64) << 8) ^ i as u64;
                AdapterSpec::random(config, shape, RANDOM_ADAPTER_STD, seed)
            })
            .collect()
    };

    let alora = adapters(AdapterMode::Alora, plan.alora_rank)?;
    let extras = vec![extra.clone(); cell.n];
    let alora_runs = engine.fanout(&base_cache, &alora, &extras, settings, Exec::Sequential)?;

    let lora = adapters(AdapterMode::Lora, plan.lora_rank)?;
    let mut full = base_cache.token_ids();
    full.extend_from_slice(&extra);
    let lora_runs = lora
        .iter()
        .map(|a| engine.lora_invoke(&full, a, settings))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    for (mode, rank, runs) in [
        (AdapterMode::Alora, plan.alora_rank, &alora_runs),
        (AdapterMode::Lora, plan.lora_rank, &lora_runs),
    ] {
        let query = CostQuery::new(config, mode, t_cache, plan.new_tokens, cell.n, rank);
        let predicted = predict_first_token(&query)?;
        let first = CostLedger::merged(runs.iter().map(|r: &GenerationResult| &r.first_token));
        let total = CostLedger::merged(runs.iter().map(|r| &r.cost));
        out.push((
            BenchRow {
                mode,
                seed: plan.seed,
                t_cache,
                t_new: plan.new_tokens,
                n_adapters: cell.n,
                first_token_flops: first.total_flops(),
                total_flops: total.total_flops(),
                cache_bytes_incremental: total.cache_bytes_incremental,
                wall_ns: total.wall_ns,
                predicted_flops: predicted.flops(),
                predicted_bytes: predicted.bytes,
            },
            Measurement {
                query,
                first_token: first,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{speedup_report, write_csv};
    use crate::model::{ModelConfig, ModelWeights};

    fn engine() -> Engine {
        let c = ModelConfig::tiny();
        Engine::new(c.clone(), ModelWeights::random(&c, 2).unwrap()).unwrap()
    }

    fn plan() -> BenchPlan {
        BenchPlan {
            prompt_lengths: vec![8, 24, 48],
            answer_tokens: 6,
            eval_tokens: 4,
            new_tokens: 5,
            n_adapters: vec![1, 3],
            lora_rank: 2,
            alora_rank: 4,
            repetitions: 2,
            seed: 9,
        }
    }

    #[test]
    fn measured_matches_predicted_on_every_row() {
        let out = run_bench(&engine(), &plan(), Exec::Parallel).unwrap();
        assert_eq!(out.rows.len(), 3 * 2 * 2 * 2);
        for r in &out.rows {
            assert_eq!(r.first_token_flops, r.predicted_flops, "{r:?}");
            assert_eq!(r.cache_bytes_incremental, r.predicted_bytes, "{r:?}");
            assert_eq!(
                r.t_cache,
                [8, 24, 48].iter().find(|&&p| p + 6 == r.t_cache).unwrap() + 6
            );
        }
        let report = speedup_report(&out.measurements).unwrap();
        assert!(report.ratios_increase_with_cache());
        assert!(report.rows.iter().all(|r| r.relative_deviation == 0.0));
    }

    #[test]
    fn csv_is_deterministic_apart_from_wall_time() {
        let e = engine();
        let csv = |exec| {
            let mut rows = run_bench(&e, &plan(), exec).unwrap().rows;
            for r in &mut rows {
                r.wall_ns = 0;
            }
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf).unwrap();
            buf
        };
        assert_eq!(csv(Exec::Parallel), csv(Exec::Sequential));
    }

    #[test]
    fn repetitions_agree() {
        let out = run_bench(&engine(), &plan(), Exec::Parallel).unwrap();
        for pair in out.rows.chunks(4) {
            assert_eq!(pair[0].total_flops, pair[2].total_flops);
            assert_eq!(pair[1].first_token_flops, pair[3].first_token_flops);
        }
    }

    #[test]
    fn oversized_plan_is_a_configuration_error() {
        let p = BenchPlan {
            prompt_lengths: vec![250],
            ..plan()
        };
        assert!(matches!(
            run_bench(&engine(), &p, Exec::Parallel),
            Err(Error::Config(_))
        ));
    }
}
