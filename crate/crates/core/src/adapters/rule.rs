use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::fusion::TapeDistribution;
use crate::kg::{EntityId, HistoryView, Query, RelationId};
use crate::rules::{ground_rules, GroundingConfig, RuleStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
    /// Mined confidence times the decay instead of learned similarity plus
    /// decay. Has no trainable effect; used to compare against static scoring.
    StaticConfidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleAdapterConfig {
    pub dim: usize,
    /// Fixed time-decay rate.
    pub lambda: f64,
    pub similarity: Similarity,
    pub grounding: GroundingConfig,
}

impl Default for RuleAdapterConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            lambda: 0.1,
            similarity: Similarity::Cosine,
            grounding: GroundingConfig::default(),
        }
    }
}

/// Single-layer LSTM weights. Gate order in the stacked matrices: input,
/// forget, cell, output.
#[derive(Clone, Copy, Debug)]
struct Lstm {
    w: ParamId,
    u: ParamId,
    b: ParamId,
    dim: usize,
}

impl Lstm {
    fn encode(&self, tape: &mut Tape<'_>, emb: ParamId, seq: &[RelationId]) -> Var {
        let d = self.dim;
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        for &r in seq {
            let x = tape.row(emb, r as usize);
            let mut z = tape.matvec(self.w, x);
            if let Some(h) = h {
                let uh = tape.matvec(self.u, h);
                z = tape.add(z, uh);
            }
            let b = tape.param(self.b);
            let z = tape.add(z, b);
            let zi = tape.slice(z, 0, d);
            let zf = tape.slice(z, d, d);
            let zg = tape.slice(z, 2 * d, d);
            let zo = tape.slice(z, 3 * d, d);
            let i = tape.sigmoid(zi);
            let g = tape.tanh(zg);
            let o = tape.sigmoid(zo);
            let ig = tape.mul(i, g);
            let new_c = match c {
                Some(c) => {
                    let f = tape.sigmoid(zf);
                    let fc = tape.mul(f, c);
                    tape.add(fc, ig)
                }
                None => ig,
            };
            let tc = tape.tanh(new_c);
            h = Some(tape.mul(o, tc));
            c = Some(new_c);
        }
        h.expect("non-empty relation sequence")
    }
}

/// Learned re-scoring of mined rule groundings.
///
/// `conf(L) = sim(Emb(r_q), Emb(L)) + exp(-lambda (t_q - t_L))` where `Emb`
/// runs an LSTM over relation embeddings; entity scores sum `conf` over the
/// groundings ending at the entity and a softmax normalizes them.
#[derive(Clone, Debug)]
pub struct RuleAdapter {
    config: RuleAdapterConfig,
    rel_emb: ParamId,
    lstm: Lstm,
    store: Arc<RuleStore>,
}

impl RuleAdapter {
    pub(crate) fn new(
        config: RuleAdapterConfig,
        params: &mut ParamSet,
        rel_emb: ParamId,
        store: Arc<RuleStore>,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let d = config.dim;
        let bound = (6.0 / (5 * d) as f64).sqrt();
        let w = params.uniform("rule.lstm.w", &[4 * d, d], bound, rng);
        let u = params.uniform("rule.lstm.u", &[4 * d, d], bound, rng);
        let mut bias = vec![0.0; 4 * d];
        bias[d..2 * d].iter_mut().for_each(|x| *x = 1.0);
        let b = params.add("rule.lstm.b", &[4 * d], bias);
        Self {
            config,
            rel_emb,
            lstm: Lstm { w, u, b, dim: d },
            store,
        }
    }

    pub fn config(&self) -> &RuleAdapterConfig {
        &self.config
    }

    pub fn store(&self) -> &RuleStore {
        &self.store
    }

    pub fn forward(&self, tape: &mut Tape<'_>, view: HistoryView<'_>, query: &Query) -> TapeDistribution {
        let groundings = ground_rules(view, query, &self.store, &self.config.grounding);
        if groundings.is_empty() {
            return TapeDistribution::zero();
        }
        // per (entity, rule): grounding count and summed decay
        let mut acc: BTreeMap<(EntityId, usize), (f64, f64)> = BTreeMap::new();
        for g in &groundings {
            let decay = (-self.config.lambda * query.time.saturating_sub(g.last_time) as f64).exp();
            let slot = acc.entry((g.terminal_entity, g.rule)).or_default();
            slot.0 += 1.0;
            slot.1 += decay;
        }
        let mut sims: HashMap<usize, Var> = HashMap::new();
        let mut head: Option<Var> = None;
        let mut per_entity: BTreeMap<EntityId, Vec<Var>> = BTreeMap::new();
        for (&(e, rule), &(count, decay)) in &acc {
            let term = match self.config.similarity {
                Similarity::StaticConfidence => {
                    tape.constant(vec![self.store.rule(rule).confidence * decay])
                }
                Similarity::Cosine | Similarity::Dot => {
                    let sim = match sims.get(&rule) {
                        Some(&s) => s,
                        None => {
                            let h = *head.get_or_insert_with(|| self.lstm.encode(tape, self.rel_emb, &[query.relation]));
                            let body = self.lstm.encode(tape, self.rel_emb, &self.store.rule(rule).body);
                            let s = if self.config.similarity == Similarity::Cosine {
                                tape.cosine(h, body)
                            } else {
                                tape.dot(h, body)
                            };
                            sims.insert(rule, s);
                            s
                        }
                    };
                    let scaled = tape.scale(sim, count);
                    tape.add_const(scaled, decay)
                }
            };
            per_entity.entry(e).or_default().push(term);
        }
        let mut candidates = Vec::with_capacity(per_entity.len());
        let mut scores = Vec::with_capacity(per_entity.len());
        for (e, terms) in per_entity {
            candidates.push(e);
            scores.push(tape.sum_n(&terms));
        }
        let scores = tape.concat(&scores);
        TapeDistribution {
            candidates,
            probs: Some(tape.softmax(scores)),
        }
    }

    /// Rule embedding of a relation sequence (value only).
    pub fn embed(&self, params: &ParamSet, seq: &[RelationId]) -> Vec<f64> {
        let mut tape = Tape::new(params);
        let h = self.lstm.encode(&mut tape, self.rel_emb, seq);
        tape.value(h).to_vec()
    }
}
