use std::collections::HashSet;

use super::beam::checked_logprobs;
use super::{BeamResult, LanguageModel, Sequence};

/// Iterative K-times generation used by the "no beam" ablation: `k` greedy
/// draws, where a draw may not terminate on a body an earlier draw produced.
/// Each draw's score is the model log-probability of its tokens.
pub fn iterative_generate(
    lm: &dyn LanguageModel,
    context: &str,
    k: usize,
    max_tokens: usize,
) -> Result<BeamResult, String> {
    let stop = lm.stop_token();
    let mut drawn: HashSet<String> = HashSet::new();
    let mut sequences = Vec::with_capacity(k);
    for _ in 0..k {
        let mut seq = Sequence {
            tokens: Vec::new(),
            logprob: 0.0,
        };
        while seq.tokens.len() < max_tokens {
            let lps = checked_logprobs(lm, context, &seq.tokens)?;
            let body = lm.detokenize(&seq.tokens);
            let stop_banned = drawn.contains(&body);
            let pick = lps
                .iter()
                .enumerate()
                .filter(|&(t, lp)| *lp > f64::NEG_INFINITY && !(t as u32 == stop && stop_banned))
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(t, _)| t as u32);
            let Some(tok) = pick else { break };
            seq.logprob += lps[tok as usize];
            seq.tokens.push(tok);
            if tok == stop {
                break;
            }
        }
        let body = lm.detokenize(
            seq.tokens
                .strip_suffix(&[stop])
                .unwrap_or(&seq.tokens),
        );
        if seq.tokens.is_empty() || !drawn.insert(body) {
            // nothing new can be produced
            break;
        }
        sequences.push(seq);
    }
    Ok(BeamResult { sequences })
}
