use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::TokenId;
use crate::prompt::parse_prompt;

/// A frozen, deterministic next-token model.
///
/// Each decimal digit is its own token and `stop_token` is `]`.
pub trait LanguageModel: Send + Sync {
    fn name(&self) -> String;

    fn vocab_size(&self) -> usize;

    fn stop_token(&self) -> TokenId;

    fn token_text(&self, token: TokenId) -> &str;

    /// Log-probabilities over the whole vocabulary for the next token after
    /// `context` followed by the `generated` tokens.
    fn next_token_logprobs(&self, context: &str, generated: &[TokenId]) -> Result<Vec<f64>, String>;

    fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.token_text(t)).collect()
    }
}

type TableFn = dyn Fn(&[TokenId]) -> Vec<f64> + Send + Sync;

/// Backend defined by an explicit function of the generated prefix; the
/// prompt is ignored. Used for decoding tests.
pub struct TableLm {
    vocab: Vec<String>,
    stop: TokenId,
    table: Box<TableFn>,
}

impl TableLm {
    pub fn new(
        vocab: Vec<String>,
        stop: TokenId,
        table: impl Fn(&[TokenId]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            vocab,
            stop,
            table: Box::new(table),
        }
    }
}

impl LanguageModel for TableLm {
    fn name(&self) -> String {
        "table".into()
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn stop_token(&self) -> TokenId {
        self.stop
    }

    fn token_text(&self, token: TokenId) -> &str {
        &self.vocab[token as usize]
    }

    fn next_token_logprobs(&self, _context: &str, generated: &[TokenId]) -> Result<Vec<f64>, String> {
        Ok((self.table)(generated))
    }
}

/// How a [`ScriptedLm`] chooses its target entities from the prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptedBehavior {
    /// Copies objects of in-prompt facts sharing the query's subject and
    /// relation, weighted by `exp(-decay * age)`.
    CopyRecent { decay: f64 },
    /// Spreads mass over `spread` pseudo-random entities that never appear
    /// in the prompt, so it is wrong whenever the answer is in the history.
    Wrong { spread: usize },
}

/// On-disk description of a scripted backend (`--model scripted:<path>`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSpec {
    pub entity_count: u32,
    pub behavior: ScriptedBehavior,
    /// Probability mixed uniformly over the vocabulary at every step.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.01
}

const SCRIPTED_VOCAB: [&str; 12] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "]", "x"];
const STOP: TokenId = 10;

/// Deterministic stand-in for a language model: reads the rendered prompt,
/// forms a target distribution over entity index strings and spells it out
/// digit by digit.
pub struct ScriptedLm {
    spec: ScriptedSpec,
}

impl ScriptedLm {
    pub fn new(spec: ScriptedSpec) -> Result<Self, String> {
        if !(0.0..1.0).contains(&spec.noise) || spec.noise <= 0.0 {
            return Err(format!("noise must lie in (0, 1), got {}", spec.noise));
        }
        if spec.entity_count == 0 {
            return Err("entity_count must be positive".into());
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ScriptedSpec {
        &self.spec
    }

    /// Target strings (entity index followed by `]`) with weights.
    fn targets(&self, context: &str) -> Vec<(String, f64)> {
        let Some((facts, (tq, sq, rq))) = parse_prompt(context) else {
            return Vec::new();
        };
        let mut weights: BTreeMap<u32, f64> = BTreeMap::new();
        match &self.spec.behavior {
            ScriptedBehavior::CopyRecent { decay } => {
                for (t, s, r, o) in &facts {
                    if *s == sq && *r == rq {
                        *weights.entry(*o).or_default() += (-decay * tq.saturating_sub(*t) as f64).exp();
                    }
                }
            }
            ScriptedBehavior::Wrong { spread } => {
                let seen: HashSet<u32> = facts.iter().flat_map(|(_, s, _, o)| [*s, *o]).chain([sq]).collect();
                let mut h = fnv(context.as_bytes()) ^ self.spec.seed;
                let mut w = 1.0;
                let mut tries = 0;
                while weights.len() < *spread && tries < spread * 50 {
                    h = mix(h);
                    tries += 1;
                    let e = (h % self.spec.entity_count as u64) as u32;
                    if seen.contains(&e) || weights.contains_key(&e) {
                        continue;
                    }
                    weights.insert(e, w);
                    w *= 0.85;
                }
            }
        }
        weights.into_iter().map(|(e, w)| (format!("{e}]"), w)).collect()
    }
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl LanguageModel for ScriptedLm {
    fn name(&self) -> String {
        let kind = match self.spec.behavior {
            ScriptedBehavior::CopyRecent { .. } => "copy_recent",
            ScriptedBehavior::Wrong { .. } => "wrong",
        };
        format!("scripted-{kind}")
    }

    fn vocab_size(&self) -> usize {
        SCRIPTED_VOCAB.len()
    }

    fn stop_token(&self) -> TokenId {
        STOP
    }

    fn token_text(&self, token: TokenId) -> &str {
        SCRIPTED_VOCAB[token as usize]
    }

    fn next_token_logprobs(&self, context: &str, generated: &[TokenId]) -> Result<Vec<f64>, String> {
        let prefix = self.detokenize(generated);
        let v = SCRIPTED_VOCAB.len();
        let mut next = vec![0.0; v];
        let mut total = 0.0;
        for (target, w) in self.targets(context) {
            if let Some(rest) = target.strip_prefix(prefix.as_str()) {
                if let Some(c) = rest.chars().next() {
                    let tok = SCRIPTED_VOCAB
                        .iter()
                        .position(|s| s.starts_with(c))
                        .unwrap_or(v - 1);
                    next[tok] += w;
                    total += w;
                }
            }
        }
        if total == 0.0 {
            // nothing to say: babble non-entity text
            next[v - 1] = 1.0;
            total = 1.0;
        }
        let eps = self.spec.noise;
        Ok(next
            .into_iter()
            .map(|m| ((1.0 - eps) * m / total + eps / v as f64).ln())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logsumexp(v: &[f64]) -> f64 {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn scripted_copy_spells_recent_object() {
        let lm = ScriptedLm::new(ScriptedSpec {
            entity_count: 2000,
            behavior: ScriptedBehavior::CopyRecent { decay: 0.5 },
            noise: 0.01,
            seed: 0,
        })
        .unwrap();
        let ctx = "3:[5,Consult,1024]\n4:[5,Consult,17]\n9:[5,Consult,";
        let first = lm.next_token_logprobs(ctx, &[]).unwrap();
        assert!(logsumexp(&first).abs() < 1e-12);
        // "17]" is more recent than "1024]"; both start with "1"
        let best = first.iter().cloned().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert_eq!(best, 1);
        let after_one = lm.next_token_logprobs(ctx, &[1]).unwrap();
        assert!(after_one[7] > after_one[0]);
        // deterministic
        assert_eq!(after_one, lm.next_token_logprobs(ctx, &[1]).unwrap());
    }

    #[test]
    fn scripted_wrong_avoids_prompt_entities() {
        let lm = ScriptedLm::new(ScriptedSpec {
            entity_count: 30,
            behavior: ScriptedBehavior::Wrong { spread: 5 },
            noise: 0.01,
            seed: 3,
        })
        .unwrap();
        let ctx = "3:[5,Consult,12]\n4:[5,Consult,17]\n9:[5,Consult,";
        let targets = lm.targets(ctx);
        assert_eq!(targets.len(), 5);
        for (s, _) in targets {
            let e: u32 = s.trim_end_matches(']').parse().unwrap();
            assert!(![5, 12, 17].contains(&e) && e < 30);
        }
    }
}
