//! Prefill and greedy decoding for base, LoRA and aLoRA requests, and the
//! cache-reuse patterns built on top:
//!
//! - an activated adapter reuses a base cache ([`Engine::invoke_intrinsic`]);
//! - the base model reuses what an adapter prefilled ([`Engine::resume_base`]);
//! - many adapters share one base cache ([`Engine::fanout`]).

use std::sync::Arc;
use std::time::Instant;

use crate::adapters::{
    build_policy, find_invocation, last_occurrence, AdapterMode, AdapterSpec, ProjectionPolicy,
};
use crate::cost::{CostEvent, CostLedger};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kv_cache::CacheStore;
use crate::model::{forward_segment, greedy_pick_excluding, ModelConfig, ModelWeights};
use crate::{TokenId, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeSettings {
    /// End-of-sequence is suppressed until this many tokens exist.
    pub min_new_tokens: usize,
    pub max_new_tokens: usize,
}

impl DecodeSettings {
    pub fn exactly(n: usize) -> Self {
        Self {
            min_new_tokens: n,
            max_new_tokens: n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerationRequest<'a> {
    pub prompt_tokens: Vec<TokenId>,
    pub adapter: Option<&'a AdapterSpec>,
    /// Sealed cache whose token ids are a prefix of `prompt_tokens`.
    pub reuse_cache: Option<&'a CacheStore>,
    pub settings: DecodeSettings,
    /// Recorded with results; greedy decoding draws no randomness.
    pub seed: u64,
}

impl<'a> GenerationRequest<'a> {
    pub fn new(prompt_tokens: Vec<TokenId>, settings: DecodeSettings) -> Self {
        Self {
            prompt_tokens,
            adapter: None,
            reuse_cache: None,
            settings,
            seed: 0,
        }
    }

    pub fn with_adapter(mut self, adapter: &'a AdapterSpec) -> Self {
        self.adapter = Some(adapter);
        self
    }

    pub fn reusing(mut self, cache: &'a CacheStore) -> Self {
        self.reuse_cache = Some(cache);
        self
    }
}

#[derive(Clone, Debug)]
pub struct GenerationResult {
    /// The full input, including an invocation sequence the engine appended.
    pub prompt_tokens: Vec<TokenId>,
    pub new_tokens: Vec<TokenId>,
    /// Logits each new token was picked from.
    pub logits: Vec<Vec<f32>>,
    /// Covers the prompt and every generated token except the last.
    pub cache: CacheStore,
    pub cost: CostLedger,
    /// Counters up to and including feeding the first generated token back
    /// through the model (the prefill alone if generation stopped earlier).
    pub first_token: CostLedger,
    pub t_invoke: Option<usize>,
}

impl GenerationResult {
    /// Prompt followed by every generated token.
    pub fn all_tokens(&self) -> Vec<TokenId> {
        let mut t = self.prompt_tokens.clone();
        t.extend_from_slice(&self.new_tokens);
        t
    }
}

/// Stateless driver over shared, immutable weights.
#[derive(Clone, Debug)]
pub struct Engine {
    config: ModelConfig,
    weights: Arc<ModelWeights>,
}

impl Engine {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        weights.validate(&config)?;
        Ok(Self {
            config,
            weights: Arc::new(weights),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// Policy a request runs under, and its activation point.
    pub fn policy_for<'s>(
        &self,
        tokens: &[TokenId],
        adapter: Option<&'s AdapterSpec>,
    ) -> Result<ProjectionPolicy<'s>> {
        match adapter {
            None => Ok(ProjectionPolicy::base()),
            Some(spec) => {
                spec.validate(&self.config)?;
                match spec.mode {
                    AdapterMode::Lora => build_policy(spec, None),
                    AdapterMode::Alora => build_policy(spec, Some(find_invocation(tokens, spec)?)),
                }
            }
        }
    }

    /// Longest prefix of `cache` whose rows this policy would have produced.
    fn reusable_for(&self, cache: &CacheStore, policy: &ProjectionPolicy<'_>) -> usize {
        let by_rule = cache.reusable_prefix(policy.consumer());
        cache
            .provenance()
            .iter()
            .take(by_rule)
            .enumerate()
            .take_while(|&(p, &prov)| prov == policy.provenance(p))
            .count()
    }

    /// Builds the request's cache over every prompt position and returns it
    /// sealed, together with the last prompt position's logits. Reused
    /// positions alias `reuse_cache`; the rest are projected under `policy`.
    pub fn prefill(
        &self,
        request: &GenerationRequest<'_>,
        policy: &ProjectionPolicy<'_>,
        ledger: &mut CostLedger,
    ) -> Result<(CacheStore, Vec<f32>)> {
        let prompt = &request.prompt_tokens;
        if prompt.is_empty() {
            return Err(Error::contract("prompt must not be empty"));
        }
        let (mut cache, reused) = match request.reuse_cache {
            None => (CacheStore::new(&self.config), 0),
            Some(reuse) => {
                reuse.check_integrity()?;
                let cached = reuse.token_ids();
                if let Some(p) = (0..cached.len()).find(|&p| prompt.get(p) != Some(&cached[p])) {
                    return Err(Error::contract(format!(
                        "reuse cache diverges from the prompt at position {p}"
                    )));
                }
                // At least one position is recomputed so the last prompt
                // token has logits to decode from.
                let len = self
                    .reusable_for(reuse, policy)
                    .min(reuse.sealed_length())
                    .min(prompt.len() - 1);
                (reuse.fork_shared(len)?, len)
            }
        };
        ledger.record(CostEvent::ReusedRows(reused as u64));
        let logits = forward_segment(
            &prompt[reused..],
            reused,
            &self.weights,
            &self.config,
            policy,
            &mut cache,
            ledger,
        )?;
        ledger.record(CostEvent::CacheBytes(cache.incremental_bytes()));
        cache.seal()?;
        Ok((cache, logits))
    }

    /// Prefill followed by greedy decoding.
    pub fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult> {
        let policy = self.policy_for(&request.prompt_tokens, request.adapter)?;
        self.generate_with_policy(request, &policy)
    }

    /// [`Engine::generate`] under an explicit policy. `request.adapter` is
    /// ignored; the policy carries the adapter. Used to force an activation
    /// point and by the verification suite's mutation check.
    pub fn generate_with_policy(
        &self,
        request: &GenerationRequest<'_>,
        policy: &ProjectionPolicy<'_>,
    ) -> Result<GenerationResult> {
        let s = request.settings;
        if s.min_new_tokens > s.max_new_tokens {
            return Err(Error::config(format!(
                "min_new_tokens {} exceeds max_new_tokens {}",
                s.min_new_tokens, s.max_new_tokens
            )));
        }
        let total = request.prompt_tokens.len() + s.max_new_tokens;
        if total > self.config.max_positions {
            return Err(Error::config(format!(
                "request needs up to {total} positions, model allows {}",
                self.config.max_positions
            )));
        }
        if let Some(spec) = policy.adapter() {
            spec.validate(&self.config)?;
        }
        let clock = Instant::now();
        let mut ledger = CostLedger::default();
        let (mut cache, mut logits) = self.prefill(request, policy, &mut ledger)?;

        let mut new_tokens = Vec::new();
        let mut all_logits = Vec::new();
        let mut first_token = None;
        for step in 0..s.max_new_tokens {
            let hold_eos = (step < s.min_new_tokens).then_some(EOS);
            let token = greedy_pick_excluding(&logits, hold_eos)?;
            new_tokens.push(token);
            all_logits.push(std::mem::take(&mut logits));
            if (token == EOS && hold_eos.is_none()) || new_tokens.len() == s.max_new_tokens {
                break;
            }
            let position = cache.len();
            logits = forward_segment(
                &[token],
                position,
                &self.weights,
                &self.config,
                policy,
                &mut cache,
                &mut ledger,
            )?;
            if first_token.is_none() {
                let mut snap = ledger;
                snap.record(CostEvent::Wall(clock.elapsed().as_nanos() as u64));
                first_token = Some(snap);
            }
        }
        cache.seal()?;
        ledger.record(CostEvent::Wall(clock.elapsed().as_nanos() as u64));
        Ok(GenerationResult {
            prompt_tokens: request.prompt_tokens.clone(),
            new_tokens,
            logits: all_logits,
            cache,
            first_token: first_token.unwrap_or(ledger),
            cost: ledger,
            t_invoke: policy.activation().map(|a| a.0),
        })
    }

    /// An activated adapter evaluates a conversation whose base
    /// cache already exists. The invocation sequence is appended when
    /// `extra_tokens` do not contain it.
    pub fn invoke_intrinsic(
        &self,
        base_cache: &CacheStore,
        extra_tokens: &[TokenId],
        adapter: &AdapterSpec,
        settings: DecodeSettings,
    ) -> Result<GenerationResult> {
        if adapter.mode != AdapterMode::Alora {
            return Err(Error::contract(format!(
                "{} is a LoRA adapter; use lora_invoke",
                adapter.id
            )));
        }
        if !base_cache.is_sealed() {
            return Err(Error::contract("base cache must be sealed before reuse"));
        }
        let mut tokens = base_cache.token_ids();
        tokens.extend_from_slice(extra_tokens);
        if last_occurrence(&tokens, &adapter.invocation_sequence).is_none() {
            tokens.extend_from_slice(&adapter.invocation_sequence);
        }
        let request = GenerationRequest::new(tokens, settings)
            .with_adapter(adapter)
            .reusing(base_cache);
        self.generate(&request)
    }

    /// A LoRA adapter cannot use base rows, so it recomputes every position.
    pub fn lora_invoke(
        &self,
        full_tokens: &[TokenId],
        adapter: &AdapterSpec,
        settings: DecodeSettings,
    ) -> Result<GenerationResult> {
        if adapter.mode != AdapterMode::Lora {
            return Err(Error::contract(format!(
                "{} is an activated adapter; use invoke_intrinsic",
                adapter.id
            )));
        }
        let request = GenerationRequest::new(full_tokens.to_vec(), settings).with_adapter(adapter);
        self.generate(&request)
    }

    /// Every adapter evaluates the same base cache through its own
    /// fork of it. Results come back in adapter order.
    pub fn fanout(
        &self,
        base_cache: &CacheStore,
        adapters: &[AdapterSpec],
        extra_tokens: &[Vec<TokenId>],
        settings: DecodeSettings,
        exec: Exec,
    ) -> Result<Vec<GenerationResult>> {
        if adapters.len() != extra_tokens.len() {
            return Err(Error::contract(format!(
                "{} adapters but {} extra token lists",
                adapters.len(),
                extra_tokens.len()
            )));
        }
        if let Some(a) = adapters.iter().find(|a| a.mode != AdapterMode::Alora) {
            return Err(Error::contract(format!(
                "{} is not an activated adapter",
                a.id
            )));
        }
        exec.map_range(adapters.len(), |i| {
            self.invoke_intrinsic(base_cache, &extra_tokens[i], &adapters[i], settings)
        })
        .into_iter()
        .collect()
    }

    /// The base model continues a conversation an adapter has seen,
    /// reusing the adapter's base-produced rows and re-prefilling the rest.
    pub fn resume_base(
        &self,
        adapter_result: &GenerationResult,
        continuation_tokens: &[TokenId],
        settings: DecodeSettings,
    ) -> Result<GenerationResult> {
        let mut tokens = adapter_result.all_tokens();
        tokens.extend_from_slice(continuation_tokens);
        let request = GenerationRequest::new(tokens, settings).reusing(&adapter_result.cache);
        self.generate(&request)
    }

    /// Appends base-model rows for `tokens` to a fork of a sealed cache.
    pub fn extend_base(
        &self,
        cache: &CacheStore,
        tokens: &[TokenId],
        ledger: &mut CostLedger,
    ) -> Result<CacheStore> {
        let mut fork = cache.fork_shared(cache.sealed_length())?;
        if !tokens.is_empty() {
            forward_segment(
                tokens,
                fork.len(),
                &self.weights,
                &self.config,
                &ProjectionPolicy::base(),
                &mut fork,
                ledger,
            )?;
        }
        fork.seal()?;
        Ok(fork)
    }
}
