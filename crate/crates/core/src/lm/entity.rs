use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BeamResult, LanguageModel};
use crate::dist::EntityDistribution;
use crate::kg::EntityId;

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Parses a decoded sequence into an entity index. The stop token and
/// surrounding whitespace are stripped; anything that is not a decimal
/// integer below `entity_count` is rejected.
pub fn parse_entity(text: &str, stop: &str, entity_count: u32) -> Option<EntityId> {
    let body = text.trim();
    let body = body.strip_suffix(stop).unwrap_or(body).trim();
    if body.is_empty() || !body.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    body.parse::<u64>()
        .ok()
        .filter(|&v| v < entity_count as u64)
        .map(|v| v as EntityId)
}

/// Maps decoded sequences to entities, discarding invalid outputs and merging
/// duplicates by log-sum-exp. Sorted by descending log-probability.
pub fn map_sequences_to_entities(
    lm: &dyn LanguageModel,
    result: &BeamResult,
    entity_count: u32,
) -> Vec<(EntityId, f64)> {
    let stop = lm.token_text(lm.stop_token()).to_string();
    let mut merged: BTreeMap<EntityId, f64> = BTreeMap::new();
    for seq in &result.sequences {
        if let Some(e) = parse_entity(&lm.detokenize(&seq.tokens), &stop, entity_count) {
            let slot = merged.entry(e).or_insert(f64::NEG_INFINITY);
            *slot = log_add(*slot, seq.logprob);
        }
    }
    let mut out: Vec<(EntityId, f64)> = merged.into_iter().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxMode {
    /// Softmax over sequence log-probabilities (renormalized sequence mass).
    #[default]
    LogProb,
    /// Softmax over the raw sequence probabilities.
    Probability,
}

/// Next-entity distribution over the mapped candidates; empty input gives the
/// zero distribution.
pub fn build_entity_distribution(pairs: &[(EntityId, f64)], mode: SoftmaxMode) -> EntityDistribution {
    match mode {
        SoftmaxMode::LogProb => EntityDistribution::softmax(pairs.iter().copied()),
        SoftmaxMode::Probability => EntityDistribution::softmax(pairs.iter().map(|&(e, lp)| (e, lp.exp()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{Sequence, TableLm, TokenId};

    fn digits_lm() -> TableLm {
        let vocab = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "]", "a", "b", "c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        TableLm::new(vocab, 10, |_| vec![0.0; 14])
    }

    fn seq(tokens: &[TokenId], logprob: f64) -> Sequence {
        Sequence {
            tokens: tokens.to_vec(),
            logprob,
        }
    }

    #[test]
    fn maps_digit_tokens() {
        let lm = digits_lm();
        let r = BeamResult {
            sequences: vec![seq(&[1, 0, 2, 4, 10], -0.5)],
        };
        assert_eq!(map_sequences_to_entities(&lm, &r, 7128), vec![(1024, -0.5)]);
        // out of range
        assert!(map_sequences_to_entities(&lm, &r, 1000).is_empty());
    }

    #[test]
    fn discards_invalid_and_merges_duplicates() {
        let lm = digits_lm();
        let (p1, p2) = (0.3f64, 0.2f64);
        let r = BeamResult {
            sequences: vec![
                seq(&[11, 12, 13, 10], -0.1),
                seq(&[4, 2, 10], p1.ln()),
                seq(&[4, 2, 10], p2.ln()),
            ],
        };
        let got = map_sequences_to_entities(&lm, &r, 100);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, 42);
        assert!((got[0].1 - (p1 + p2).ln()).abs() < 1e-12);
    }

    #[test]
    fn parse_entity_edges() {
        assert_eq!(parse_entity(" 17 ]", "]", 20), Some(17));
        assert_eq!(parse_entity("17", "]", 20), Some(17));
        assert_eq!(parse_entity("]", "]", 20), None);
        assert_eq!(parse_entity("-1]", "]", 20), None);
        assert_eq!(parse_entity("1x]", "]", 20), None);
    }

    #[test]
    fn distribution_construction() {
        assert_eq!(
            build_entity_distribution(&[(5, -3.0)], SoftmaxMode::LogProb),
            EntityDistribution::point(5)
        );
        let d = build_entity_distribution(&[(1, 0.2f64.ln()), (2, 0.1f64.ln())], SoftmaxMode::LogProb);
        assert!((d.get(1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.get(2) - 1.0 / 3.0).abs() < 1e-12);
        assert!(build_entity_distribution(&[], SoftmaxMode::LogProb).is_zero());
        let lit = build_entity_distribution(&[(1, 0.2f64.ln()), (2, 0.1f64.ln())], SoftmaxMode::Probability);
        let z = 0.2f64.exp() + 0.1f64.exp();
        assert!((lit.get(1) - 0.2f64.exp() / z).abs() < 1e-12);
    }
}
