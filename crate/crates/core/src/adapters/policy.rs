use crate::adapters::{AdapterMode, AdapterSpec};
use crate::error::{Error, Result};
use crate::kv_cache::Provenance;

/// First absolute position projected with adapted weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActivationPoint(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Base,
    Adapted,
}

/// Per-position choice between base and adapted projection weights.
///
/// Base: every position uses base weights. LoRA: every position is adapted.
/// aLoRA: positions before the activation point use base weights, the rest
/// are adapted.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionPolicy<'a> {
    adapter: Option<&'a AdapterSpec>,
    activation: usize,
    flipped: Option<usize>,
}

impl<'a> ProjectionPolicy<'a> {
    pub fn base() -> Self {
        Self {
            adapter: None,
            activation: usize::MAX,
            flipped: None,
        }
    }

    pub fn adapter(&self) -> Option<&'a AdapterSpec> {
        self.adapter
    }

    /// The first adapted position, or `None` for the base policy.
    pub fn activation(&self) -> Option<ActivationPoint> {
        self.adapter.map(|_| ActivationPoint(self.activation))
    }

    pub fn verdict(&self, position: usize) -> Verdict {
        if self.adapter.is_some() && (position >= self.activation || self.flipped == Some(position))
        {
            Verdict::Adapted
        } else {
            Verdict::Base
        }
    }

    /// Producer tag for cache rows written at `position`.
    pub fn provenance(&self, position: usize) -> Provenance {
        match self.adapter {
            Some(a) if position >= self.activation => Provenance::Adapter(a.id),
            _ => Provenance::Base,
        }
    }

    /// Consumer identity used when asking a cache what it can reuse.
    pub fn consumer(&self) -> Provenance {
        match self.adapter {
            Some(a) => Provenance::Adapter(a.id),
            None => Provenance::Base,
        }
    }

    /// Mutation hook for sensitivity checks: projects `position` with adapted
    /// weights while still labelling it with the declared provenance.
    #[doc(hidden)]
    pub fn with_flipped_verdict(mut self, position: usize) -> Self {
        self.flipped = Some(position);
        self
    }
}

/// Builds the projection policy for `spec`. Activated adapters need an
/// activation point; plain LoRA adapters must not be given one.
pub fn build_policy(
    spec: &AdapterSpec,
    activation: Option<ActivationPoint>,
) -> Result<ProjectionPolicy<'_>> {
    let activation = match (spec.mode, activation) {
        (AdapterMode::Alora, Some(ActivationPoint(t))) => t,
        (AdapterMode::Lora, None) => 0,
        (AdapterMode::Alora, None) => {
            return Err(Error::contract(format!(
                "{} is activated and needs an activation point",
                spec.id
            )))
        }
        (AdapterMode::Lora, Some(_)) => {
            return Err(Error::contract(format!(
                "{} is a plain LoRA adapter; it takes no activation point",
                spec.id
            )))
        }
    };
    Ok(ProjectionPolicy {
        adapter: Some(spec),
        activation,
        flipped: None,
    })
}
