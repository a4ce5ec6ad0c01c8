use std::cmp::Ordering;

use super::{LanguageModel, TokenId};
use crate::prompt::PromptDoc;

/// A generated token sequence and its cumulative log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
}

/// Finalized sequences, best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BeamResult {
    pub sequences: Vec<Sequence>,
}

/// Descending log-probability, ties broken by ascending token ids.
pub(crate) fn rank(a: &Sequence, b: &Sequence) -> Ordering {
    b.logprob.total_cmp(&a.logprob).then_with(|| a.tokens.cmp(&b.tokens))
}

pub(crate) fn checked_logprobs(
    lm: &dyn LanguageModel,
    context: &str,
    generated: &[TokenId],
) -> Result<Vec<f64>, String> {
    let lps = lm.next_token_logprobs(context, generated)?;
    if lps.len() != lm.vocab_size() {
        return Err(format!(
            "backend returned {} log-probabilities for a vocabulary of {}",
            lps.len(),
            lm.vocab_size()
        ));
    }
    if lps.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err("backend returned a non-finite log-probability".into());
    }
    Ok(lps)
}

/// Beam search with beam width `k`, returning the top-`k` finalized sequences.
pub fn beam_generate(
    lm: &dyn LanguageModel,
    prompt: &PromptDoc,
    k: usize,
    max_tokens: usize,
) -> Result<BeamResult, String> {
    beam_generate_with_width(lm, &prompt.text, k, max_tokens, k)
}

/// Beam search keeping `width` live prefixes per step. A sequence is
/// finalized when it emits the stop token or reaches `max_tokens`; its score
/// is the unnormalized sum of token log-probabilities. With `width` at least
/// `vocab^(max_tokens - 1)` no prefix is ever pruned and the result equals
/// exhaustive enumeration.
pub fn beam_generate_with_width(
    lm: &dyn LanguageModel,
    context: &str,
    k: usize,
    max_tokens: usize,
    width: usize,
) -> Result<BeamResult, String> {
    if k == 0 || max_tokens == 0 || width == 0 {
        return Err("k, max_tokens and beam width must be at least 1".into());
    }
    let stop = lm.stop_token();
    let mut active = vec![Sequence {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut finished: Vec<Sequence> = Vec::new();

    for step in 1..=max_tokens {
        let mut candidates = Vec::with_capacity(active.len() * lm.vocab_size());
        for beam in &active {
            let lps = checked_logprobs(lm, context, &beam.tokens)?;
            for (tok, lp) in lps.into_iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(tok as TokenId);
                candidates.push(Sequence {
                    tokens,
                    logprob: beam.logprob + lp,
                });
            }
        }
        candidates.sort_by(rank);
        let mut next = Vec::with_capacity(width);
        for cand in candidates {
            if cand.tokens.last() == Some(&stop) || step == max_tokens {
                finished.push(cand);
            } else if next.len() < width {
                next.push(cand);
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
        if finished.len() >= k {
            finished.sort_by(rank);
            finished.truncate(k);
            // extensions can only lose probability
            if active[0].logprob < finished[k - 1].logprob {
                break;
            }
        }
    }
    finished.sort_by(rank);
    finished.truncate(k);
    Ok(BeamResult { sequences: finished })
}
