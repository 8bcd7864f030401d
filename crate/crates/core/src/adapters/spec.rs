use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::LowRankDelta;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterId(pub u32);

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "adapter#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    /// Deltas apply at every position.
    Lora,
    /// Deltas apply from the activation point onward.
    Alora,
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterMode::Lora => "lora",
            AdapterMode::Alora => "alora",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        }
    }
}

/// Deltas for one layer, indexed by [`Projection::index`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerDeltas {
    pub deltas: [Option<LowRankDelta>; 3],
}

impl LayerDeltas {
    pub fn get(&self, p: Projection) -> Option<&LowRankDelta> {
        self.deltas[p.index()].as_ref()
    }

    pub fn get_mut(&mut self, p: Projection) -> Option<&mut LowRankDelta> {
        self.deltas[p.index()].as_mut()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSpec {
    pub id: AdapterId,
    pub mode: AdapterMode,
    pub rank: usize,
    pub alpha: f32,
    pub targets: Vec<Projection>,
    pub layers: Vec<LayerDeltas>,
    /// Required for [`AdapterMode::Alora`], empty for LoRA.
    pub invocation_sequence: Vec<TokenId>,
    pub max_new_tokens: usize,
}

/// Shape-level description used to build adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterShape {
    pub id: AdapterId,
    pub mode: AdapterMode,
    pub rank: usize,
    pub alpha: f32,
    pub targets: Vec<Projection>,
    pub invocation_sequence: Vec<TokenId>,
    pub max_new_tokens: usize,
}

impl AdapterShape {
    pub fn new(id: u32, mode: AdapterMode, rank: usize) -> Self {
        Self {
            id: AdapterId(id),
            mode,
            rank,
            alpha: 32.0,
            targets: Projection::ALL.to_vec(),
            invocation_sequence: Vec::new(),
            max_new_tokens: 16,
        }
    }

    pub fn with_invocation(mut self, seq: Vec<TokenId>) -> Self {
        self.invocation_sequence = seq;
        self
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_targets(mut self, targets: Vec<Projection>) -> Self {
        self.targets = targets;
        self
    }
}

impl AdapterSpec {
    fn build(
        config: &ModelConfig,
        shape: AdapterShape,
        mut make: impl FnMut() -> LowRankDelta,
    ) -> Result<Self> {
        let mut targets = shape.targets.clone();
        targets.sort();
        targets.dedup();
        let layers = (0..config.n_layers)
            .map(|_| {
                let mut ld = LayerDeltas::default();
                for &p in &targets {
                    ld.deltas[p.index()] = Some(make());
                }
                ld
            })
            .collect();
        let spec = Self {
            id: shape.id,
            mode: shape.mode,
            rank: shape.rank,
            alpha: shape.alpha,
            targets,
            layers,
            invocation_sequence: shape.invocation_sequence,
            max_new_tokens: shape.max_new_tokens,
        };
        spec.validate(config)?;
        Ok(spec)
    }

    /// Gaussian factors with the given std.
    pub fn random(config: &ModelConfig, shape: AdapterShape, std: f32, seed: u64) -> Result<Self> {
        check_rank(config, shape.rank)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r, alpha) = (config.d_model, shape.rank, shape.alpha);
        Self::build(config, shape, || {
            LowRankDelta::random(d, r, alpha, std, &mut rng)
        })
    }

    /// Standard LoRA initialisation: Gaussian `A`, zero `B`.
    pub fn for_training(config: &ModelConfig, shape: AdapterShape, seed: u64) -> Result<Self> {
        check_rank(config, shape.rank)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r, alpha) = (config.d_model, shape.rank, shape.alpha);
        Self::build(config, shape, || {
            LowRankDelta::init_for_training(d, r, alpha, &mut rng)
        })
    }

    /// Same factors, with every `B` zeroed: behaves exactly like the base model.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            for d in layer.deltas.iter_mut().flatten() {
                d.b.as_mut_slice().fill(0.0);
            }
        }
        out
    }

    /// A copy running in another mode (and optionally under another id).
    pub fn with_mode(&self, mode: AdapterMode, id: AdapterId) -> Self {
        let mut out = self.clone();
        out.mode = mode;
        out.id = id;
        out
    }

    pub fn delta(&self, layer: usize, p: Projection) -> Option<&LowRankDelta> {
        self.layers.get(layer).and_then(|l| l.get(p))
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        check_rank(config, self.rank)?;
        if self.mode == AdapterMode::Alora && self.invocation_sequence.is_empty() {
            return Err(Error::config(format!(
                "{} is an activated adapter without an invocation sequence",
                self.id
            )));
        }
        if let Some(&t) = self
            .invocation_sequence
            .iter()
            .find(|&&t| t as usize >= config.vocab_size)
        {
            return Err(Error::config(format!(
                "invocation token {t} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        if self.layers.len() != config.n_layers {
            return Err(Error::config(format!(
                "{} carries {} layers, model has {}",
                self.id,
                self.layers.len(),
                config.n_layers
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for p in Projection::ALL {
                match (layer.get(p), self.targets.contains(&p)) {
                    (Some(d), true) => {
                        d.validate(config.d_model)?;
                        if d.rank() != self.rank {
                            return Err(Error::config(format!(
                                "layer {i} {} delta has rank {}, adapter rank is {}",
                                p.name(),
                                d.rank(),
                                self.rank
                            )));
                        }
                    }
                    (None, false) => {}
                    (Some(_), false) => {
                        return Err(Error::config(format!(
                            "layer {i} has a {} delta but {} is not a target",
                            p.name(),
                            p.name()
                        )))
                    }
                    (None, true) => {
                        return Err(Error::config(format!(
                            "layer {i} is missing its {} delta",
                            p.name()
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.deltas.iter().flatten())
            .map(|d| d.a.as_slice().len() + d.b.as_slice().len())
            .sum()
    }
}

fn check_rank(config: &ModelConfig, rank: usize) -> Result<()> {
    if rank == 0 || rank > config.d_model {
        return Err(Error::config(format!(
            "adapter rank {rank} must be in 1..={}",
            config.d_model
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alora_requires_invocation() {
        let cfg = ModelConfig::tiny();
        let shape = AdapterShape::new(1, AdapterMode::Alora, 4);
        assert!(AdapterSpec::random(&cfg, shape.clone(), 0.1, 0).is_err());
        let ok = AdapterSpec::random(&cfg, shape.with_invocation(vec![3, 4]), 0.1, 0).unwrap();
        assert_eq!(ok.parameter_count(), 2 * 3 * 2 * 16 * 4);
    }

    #[test]
    fn only_targets_carry_deltas() {
        let cfg = ModelConfig::tiny();
        let shape = AdapterShape::new(1, AdapterMode::Lora, 2).with_targets(vec![Projection::V]);
        let spec = AdapterSpec::random(&cfg, shape, 0.1, 0).unwrap();
        assert!(spec.delta(0, Projection::Q).is_none());
        assert!(spec.delta(1, Projection::V).is_some());
        let mut bad = spec.clone();
        bad.layers[0].deltas[0] = bad.layers[0].deltas[2].clone();
        assert!(bad.validate(&cfg).is_err());
    }

    #[test]
    fn rank_bounded_by_width() {
        let cfg = ModelConfig::default();
        assert!(
            AdapterSpec::random(&cfg, AdapterShape::new(0, AdapterMode::Lora, 32), 0.1, 0).is_ok()
        );
        assert!(
            AdapterSpec::random(&cfg, AdapterShape::new(0, AdapterMode::Lora, 128), 0.1, 0)
                .is_err()
        );
    }

    #[test]
    fn training_init_has_zero_b() {
        let cfg = ModelConfig::tiny();
        let shape = AdapterShape::new(1, AdapterMode::Alora, 4).with_invocation(vec![1]);
        let spec = AdapterSpec::for_training(&cfg, shape, 5).unwrap();
        for d in spec.layers.iter().flat_map(|l| l.deltas.iter().flatten()) {
            assert!(d.b.is_zero());
            assert!(!d.a.is_zero());
        }
    }
}
