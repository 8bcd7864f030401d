//! Seeded invariant suite behind the `verify` command.
//!
//! Each check runs independent trials (fanned out under [`Exec`]) and
//! records the first few failures. Equality is bitwise throughout.

use std::fmt;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{
    build_policy, ActivationPoint, AdapterId, AdapterMode, AdapterShape, AdapterSpec,
    ProjectionPolicy,
};
use crate::cost::CostLedger;
use crate::engine::{DecodeSettings, Engine, GenerationRequest, GenerationResult};
use crate::error::Result;
use crate::exec::Exec;
use crate::kv_cache::{CacheStore, Provenance};
use crate::TokenId;

/// Std of the Gaussian factors of random (untrained) adapters.
pub const RANDOM_ADAPTER_STD: f32 = 0.02;

const MAX_REPORTED_FAILURES: usize = 5;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub kv_trials: usize,
    pub oracle_trials: usize,
    pub reduction_trials: usize,
    /// Random adapters draw their rank from this list.
    pub ranks: Vec<usize>,
    pub prompt_lengths: RangeInclusive<usize>,
    pub generated_tokens: usize,
    /// Check this adapter instead of random ones. Must be activated.
    pub adapter: Option<AdapterSpec>,
    /// Flip one pre-invocation verdict in every prefix-equality trial. The
    /// suite is expected to fail when this is set.
    pub mutate: bool,
    pub exec: Exec,
}

impl VerifyOptions {
    /// `trials` prefix-equality trials, half as many cache-reuse trials and a
    /// fifth as many for each reduction and provenance check.
    pub fn new(trials: usize, seed: u64) -> Self {
        Self {
            seed,
            kv_trials: trials,
            oracle_trials: trials.div_ceil(2),
            reduction_trials: trials.div_ceil(5),
            ranks: vec![8, 32],
            prompt_lengths: 16..=128,
            generated_tokens: 32,
            adapter: None,
            mutate: false,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub failed: usize,
    /// Descriptions of the first few failing trials.
    pub failures: Vec<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        for c in &self.checks {
            let status = if c.passed() { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "{status} {} ({} of {} trials failed)",
                c.name, c.failed, c.trials
            )?;
            for msg in &c.failures {
                writeln!(f, "    {msg}")?;
            }
        }
        Ok(())
    }
}

pub const KV_PREFIX: &str = "kv_prefix_equality";
pub const ORACLE: &str = "cache_reuse_oracle";
pub const ACTIVATION_ZERO: &str = "activation_zero_is_lora";
pub const ZERO_DELTA: &str = "zero_delta_is_base";
pub const PROVENANCE: &str = "provenance_rules";

pub fn run_verify(engine: &Engine, options: &VerifyOptions) -> Result<VerifyReport> {
    if let Some(a) = &options.adapter {
        a.validate(engine.config())?;
        if a.mode != AdapterMode::Alora {
            return Err(crate::Error::config(format!(
                "{} is a LoRA adapter; verification needs an activated one",
                a.id
            )));
        }
    }
    let suite = Suite { engine, options };
    let mut warnings = Vec::new();
    let total = options.kv_trials + options.oracle_trials + 2 * options.reduction_trials;
    if total == 0 {
        warnings.push("no trials requested; every check passes vacuously".to_string());
    }
    if options.mutate {
        warnings.push("mutation enabled: prefix equality is expected to fail".to_string());
    }
    let checks = vec![
        suite.run(KV_PREFIX, 1, options.kv_trials, Suite::kv_prefix),
        suite.run(ORACLE, 2, options.oracle_trials, Suite::oracle),
        suite.run(
            ACTIVATION_ZERO,
            3,
            options.reduction_trials,
            Suite::activation_zero,
        ),
        suite.run(ZERO_DELTA, 4, options.reduction_trials, Suite::zero_delta),
        suite.run(PROVENANCE, 5, options.reduction_trials, Suite::provenance),
    ];
    Ok(VerifyReport { checks, warnings })
}

/// `Ok(None)` is a pass, `Ok(Some(reason))` a failure.
type TrialResult = Result<Option<String>>;

struct Suite<'a> {
    engine: &'a Engine,
    options: &'a VerifyOptions,
}

struct Trial {
    adapter: AdapterSpec,
    prompt: Vec<TokenId>,
    t_invoke: usize,
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn logits_equal(a: &[Vec<f32>], b: &[Vec<f32>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| bits_equal(x, y))
}

/// First `(layer, position)` below `limit` whose key or value rows differ.
fn first_kv_mismatch(a: &CacheStore, b: &CacheStore, limit: usize) -> Option<(usize, usize)> {
    (0..a.n_layers()).find_map(|layer| {
        (0..limit)
            .find(|&p| {
                let keys = bits_equal(
                    a.key_row(layer, p).unwrap_or(&[]),
                    b.key_row(layer, p).unwrap_or(&[]),
                );
                let values = bits_equal(
                    a.value_row(layer, p).unwrap_or(&[]),
                    b.value_row(layer, p).unwrap_or(&[]),
                );
                !(keys && values)
            })
            .map(|p| (layer, p))
    })
}

fn compare_runs(a: &GenerationResult, b: &GenerationResult) -> Option<String> {
    if a.new_tokens != b.new_tokens {
        return Some(format!(
            "tokens differ: {:?} vs {:?}",
            a.new_tokens, b.new_tokens
        ));
    }
    if !logits_equal(&a.logits, &b.logits) {
        return Some("logits differ".to_string());
    }
    let len = a.cache.len().min(b.cache.len());
    first_kv_mismatch(&a.cache, &b.cache, len)
        .map(|(l, p)| format!("cache rows differ at layer {l}, position {p}"))
}

impl<'a> Suite<'a> {
    fn run(
        &self,
        name: &'static str,
        stream: u64,
        trials: usize,
        trial: fn(&Self, &mut ChaCha8Rng) -> TrialResult,
    ) -> CheckOutcome {
        let results = self.options.exec.map_range(trials, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
            rng.set_stream((stream << 32) | i as u64);
            trial(self, &mut rng).unwrap_or_else(|e| Some(format!("error: {e}")))
        });
        let failures: Vec<String> = results
            .into_iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|msg| format!("trial {i}: {msg}")))
            .collect();
        CheckOutcome {
            name,
            trials,
            failed: failures.len(),
            failures: failures.into_iter().take(MAX_REPORTED_FAILURES).collect(),
        }
    }

    fn vocab(&self) -> TokenId {
        self.engine.config().vocab_size as TokenId
    }

    fn adapter(&self, rng: &mut ChaCha8Rng, mode: AdapterMode) -> Result<AdapterSpec> {
        if let Some(a) = &self.options.adapter {
            return Ok(a.with_mode(mode, a.id));
        }
        let d = self.engine.config().d_model;
        let rank = self.options.ranks[rng.random_range(0..self.options.ranks.len())].min(d);
        let v = self.vocab();
        let shape = AdapterShape::new(1, mode, rank).with_invocation(vec![v - 3, v - 2, v - 1]);
        let shape = if mode == AdapterMode::Lora {
            shape.with_invocation(Vec::new())
        } else {
            shape
        };
        AdapterSpec::random(
            self.engine.config(),
            shape,
            RANDOM_ADAPTER_STD,
            rng.random(),
        )
    }

    /// Random tokens that never contain any token of `avoid`, so an
    /// invocation sequence cannot occur in them by accident.
    fn tokens(&self, rng: &mut ChaCha8Rng, n: usize, avoid: &[TokenId]) -> Vec<TokenId> {
        let v = self.vocab();
        (0..n)
            .map(|_| loop {
                let t = rng.random_range(1..v);
                if !avoid.contains(&t) {
                    break t;
                }
            })
            .collect()
    }

    fn prompt_length(&self, rng: &mut ChaCha8Rng) -> usize {
        let room = self.engine.config().max_positions - self.options.generated_tokens - 1;
        let (lo, hi) = self.options.prompt_lengths.clone().into_inner();
        rng.random_range(lo.min(room)..=hi.min(room))
    }

    /// Random prompt with the invocation placed at a random position.
    fn trial(&self, rng: &mut ChaCha8Rng) -> Result<Trial> {
        let adapter = self.adapter(rng, AdapterMode::Alora)?;
        let inv = adapter.invocation_sequence.clone();
        let len = self.prompt_length(rng).max(inv.len());
        let start = rng.random_range(0..=len - inv.len());
        let mut prompt = self.tokens(rng, len - inv.len(), &inv);
        prompt.splice(start..start, inv.iter().copied());
        Ok(Trial {
            adapter,
            prompt,
            t_invoke: start + 1,
        })
    }

    fn prefill(&self, prompt: &[TokenId], policy: &ProjectionPolicy<'_>) -> Result<CacheStore> {
        let request = GenerationRequest::new(prompt.to_vec(), DecodeSettings::exactly(0));
        let mut ledger = CostLedger::default();
        Ok(self.engine.prefill(&request, policy, &mut ledger)?.0)
    }

    fn kv_prefix(&self, rng: &mut ChaCha8Rng) -> TrialResult {
        let t = self.trial(rng)?;
        let mut policy = self.engine.policy_for(&t.prompt, Some(&t.adapter))?;
        if policy.activation() != Some(ActivationPoint(t.t_invoke)) {
            return Ok(Some(format!(
                "activation {:?}, expected {}",
                policy.activation(),
                t.t_invoke
            )));
        }
        if self.options.mutate {
            policy = policy.with_flipped_verdict(rng.random_range(0..t.t_invoke));
        }
        let base = self.prefill(&t.prompt, &ProjectionPolicy::base())?;
        let adapted = self.prefill(&t.prompt, &policy)?;
        Ok(
            first_kv_mismatch(&base, &adapted, t.t_invoke).map(|(l, p)| {
                format!(
                    "rank {} adapter, t_invoke {}: rows differ at layer {l}, position {p}",
                    t.adapter.rank, t.t_invoke
                )
            }),
        )
    }

    fn oracle(&self, rng: &mut ChaCha8Rng) -> TrialResult {
        let adapter = self.adapter(rng, AdapterMode::Alora)?;
        let inv = &adapter.invocation_sequence;
        let len = self.prompt_length(rng);
        let conversation = self.tokens(rng, len, inv);
        let extra_len = rng.random_range(0..4);
        let extra = self.tokens(rng, extra_len, inv);
        let base_cache = self.prefill(&conversation, &ProjectionPolicy::base())?;
        let settings = DecodeSettings::exactly(self.options.generated_tokens);
        let reused = self
            .engine
            .invoke_intrinsic(&base_cache, &extra, &adapter, settings)?;
        if reused.cost.rows_reused != conversation.len() as u64 {
            return Ok(Some(format!(
                "reused {} rows of a {}-token base cache",
                reused.cost.rows_reused,
                conversation.len()
            )));
        }
        let request =
            GenerationRequest::new(reused.prompt_tokens.clone(), settings).with_adapter(&adapter);
        let scratch = self.engine.generate(&request)?;
        Ok(compare_runs(&reused, &scratch))
    }

    fn activation_zero(&self, rng: &mut ChaCha8Rng) -> TrialResult {
        let alora = self.adapter(rng, AdapterMode::Alora)?;
        let lora = alora.with_mode(AdapterMode::Lora, alora.id);
        let len = self.prompt_length(rng);
        let prompt = self.tokens(rng, len, &[]);
        let settings = DecodeSettings::exactly(self.options.generated_tokens);
        let request = GenerationRequest::new(prompt, settings);
        let a = self
            .engine
            .generate_with_policy(&request, &build_policy(&alora, Some(ActivationPoint(0)))?)?;
        let b = self.engine.generate(&GenerationRequest {
            adapter: Some(&lora),
            ..request.clone()
        })?;
        Ok(compare_runs(&a, &b))
    }

    fn zero_delta(&self, rng: &mut ChaCha8Rng) -> TrialResult {
        let t = self.trial(rng)?;
        let zero = t.adapter.zeroed();
        let settings = DecodeSettings::exactly(self.options.generated_tokens);
        let base = self
            .engine
            .generate(&GenerationRequest::new(t.prompt.clone(), settings))?;
        let adapted = self
            .engine
            .generate(&GenerationRequest::new(t.prompt, settings).with_adapter(&zero))?;
        Ok(compare_runs(&base, &adapted))
    }

    fn provenance(&self, rng: &mut ChaCha8Rng) -> TrialResult {
        let t = self.trial(rng)?;
        let id = t.adapter.id;
        let settings = DecodeSettings::exactly(4);
        let run = self.engine.generate(
            &GenerationRequest::new(t.prompt.clone(), settings).with_adapter(&t.adapter),
        )?;
        let cache = &run.cache;
        let tags = cache.provenance();
        if let Some(p) = (0..tags.len()).find(|&p| {
            tags[p]
                != if p < t.t_invoke {
                    Provenance::Base
                } else {
                    Provenance::Adapter(id)
                }
        }) {
            return Ok(Some(format!("position {p} tagged {}", tags[p])));
        }
        let other = Provenance::Adapter(AdapterId(id.0.wrapping_add(1)));
        let prefixes = [
            (Provenance::Base, t.t_invoke),
            (other, t.t_invoke),
            (Provenance::Adapter(id), cache.len()),
        ];
        for (consumer, expected) in prefixes {
            let got = cache.reusable_prefix(consumer);
            if got != expected {
                return Ok(Some(format!(
                    "{consumer} may reuse {got} rows, expected {expected}"
                )));
            }
        }
        // The base model resuming the conversation keeps exactly the
        // base-produced rows and must match a pass without any cache.
        let continuation = self.tokens(rng, 2, &t.adapter.invocation_sequence);
        let resumed = self.engine.resume_base(&run, &continuation, settings)?;
        if resumed.cost.rows_reused != t.t_invoke as u64 {
            return Ok(Some(format!(
                "base resume reused {} rows, expected {}",
                resumed.cost.rows_reused, t.t_invoke
            )));
        }
        let scratch = self.engine.generate(&GenerationRequest::new(
            resumed.prompt_tokens.clone(),
            settings,
        ))?;
        Ok(compare_runs(&resumed, &scratch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelWeights};

    fn engine() -> Engine {
        let c = ModelConfig::tiny();
        Engine::new(c.clone(), ModelWeights::random(&c, 3).unwrap()).unwrap()
    }

    fn small(trials: usize) -> VerifyOptions {
        VerifyOptions {
            ranks: vec![2, 8],
            prompt_lengths: 8..=24,
            generated_tokens: 6,
            ..VerifyOptions::new(trials, 7)
        }
    }

    #[test]
    fn suite_passes_on_a_random_model() {
        let report = run_verify(&engine(), &small(10)).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.check(KV_PREFIX).unwrap().trials, 10);
        assert_eq!(report.check(ORACLE).unwrap().trials, 5);
        assert_eq!(report.check(ZERO_DELTA).unwrap().trials, 2);
    }

    #[test]
    fn mutation_is_detected() {
        let report = run_verify(
            &engine(),
            &VerifyOptions {
                mutate: true,
                ..small(6)
            },
        )
        .unwrap();
        let kv = report.check(KV_PREFIX).unwrap();
        assert_eq!(kv.failed, 6, "{report}");
        assert!(report.check(ORACLE).unwrap().passed());
    }

    #[test]
    fn zero_trials_pass_with_warning() {
        let report = run_verify(&engine(), &small(0)).unwrap();
        assert!(report.passed());
        assert_eq!(report.warnings.len(), 1);
        assert!(report.to_string().starts_with("warning:"));
    }

    #[test]
    fn report_is_seeded() {
        let e = engine();
        let a = run_verify(
            &e,
            &VerifyOptions {
                mutate: true,
                ..small(4)
            },
        )
        .unwrap();
        let b = run_verify(
            &e,
            &VerifyOptions {
                mutate: true,
                exec: Exec::Sequential,
                ..small(4)
            },
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lora_adapter_rejected() {
        let c = ModelConfig::tiny();
        let lora =
            AdapterSpec::random(&c, AdapterShape::new(1, AdapterMode::Lora, 2), 0.02, 1).unwrap();
        let opts = VerifyOptions {
            adapter: Some(lora),
            ..small(1)
        };
        assert!(run_verify(&engine(), &opts).is_err());
    }
}
