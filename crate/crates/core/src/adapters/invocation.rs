use crate::adapters::{ActivationPoint, AdapterMode, AdapterSpec};
use crate::error::{Error, Result};
use crate::TokenId;

/// Start index of the last occurrence of `needle` in `tokens`.
pub fn last_occurrence(tokens: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() || needle.len() > tokens.len() {
        return None;
    }
    tokens.windows(needle.len()).rposition(|w| w == needle)
}

/// Locates the live invocation of an activated adapter. Adapted weights
/// switch on one token after the start of the last occurrence of the
/// invocation sequence, so the first invocation token is still projected with
/// base weights.
pub fn find_invocation(tokens: &[TokenId], spec: &AdapterSpec) -> Result<ActivationPoint> {
    if spec.mode != AdapterMode::Alora {
        return Err(Error::contract(format!(
            "{} is not an activated adapter",
            spec.id
        )));
    }
    last_occurrence(tokens, &spec.invocation_sequence)
        .map(|start| ActivationPoint(start + 1))
        .ok_or_else(|| Error::NotInvoked {
            sequence: spec.invocation_sequence.clone(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterShape, AdapterSpec};
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn spec(inv: Vec<TokenId>) -> AdapterSpec {
        AdapterSpec::random(
            &ModelConfig::tiny(),
            AdapterShape::new(1, AdapterMode::Alora, 2).with_invocation(inv),
            0.1,
            0,
        )
        .unwrap()
    }

    #[test]
    fn activates_one_after_start() {
        let t = find_invocation(&[5, 9, 7, 7, 2], &spec(vec![7, 7])).unwrap();
        assert_eq!(t, ActivationPoint(3));
    }

    #[test]
    fn uses_last_occurrence() {
        let t = find_invocation(&[7, 7, 1, 7, 7], &spec(vec![7, 7])).unwrap();
        assert_eq!(t, ActivationPoint(4));
    }

    #[test]
    fn absent_sequence_is_not_invoked() {
        assert!(matches!(
            find_invocation(&[1, 2, 3], &spec(vec![9])),
            Err(Error::NotInvoked { .. })
        ));
    }

    #[test]
    fn lora_mode_is_rejected() {
        let s = spec(vec![1]).with_mode(AdapterMode::Lora, crate::adapters::AdapterId(1));
        assert!(matches!(find_invocation(&[1], &s), Err(Error::Contract(_))));
    }

    fn brute_force(tokens: &[TokenId], needle: &[TokenId]) -> Option<usize> {
        let mut found = None;
        for start in 0..tokens.len() {
            if start + needle.len() <= tokens.len()
                && (0..needle.len()).all(|i| tokens[start + i] == needle[i])
            {
                found = Some(start);
            }
        }
        found
    }

    proptest! {
        #[test]
        fn matches_exhaustive_scan(
            tokens in proptest::collection::vec(0u32..4, 0..40),
            needle in proptest::collection::vec(0u32..4, 1..4),
        ) {
            prop_assert_eq!(last_occurrence(&tokens, &needle), brute_force(&tokens, &needle));
        }
    }
}
