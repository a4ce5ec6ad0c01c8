//! Selection of the historical facts placed in the language-model prompt.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::kg::{HistoryView, Quadruple, Query, RelationId};
use crate::rules::RuleStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    EntityKey,
    RuleBased,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "entity_key" => Ok(Strategy::EntityKey),
            "rule_based" => Ok(Strategy::RuleBased),
            other => Err(format!("unknown retrieval strategy {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub strategy: Strategy,
    /// Maximum facts placed in a prompt.
    pub history_budget: usize,
    pub min_rule_confidence: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::EntityKey,
            history_budget: 50,
            min_rule_confidence: 0.0,
        }
    }
}

fn finish(mut picked: Vec<Quadruple>, query: &Query) -> Vec<Quadruple> {
    debug_assert!(picked.iter().all(|q| q.time < query.time), "retrieval leaked future facts");
    picked.sort_by_key(|q| (q.time, q.relation, q.object));
    picked
}

/// Up to `budget` facts about the query subject: exact `(s, r)` matches first,
/// then other subject facts, most recent first within each tier. Returned in
/// ascending time order.
pub fn retrieve_entity_key(view: HistoryView<'_>, query: &Query, budget: usize) -> Vec<Quadruple> {
    let view = view.restrict(query.time);
    let mut picked: Vec<Quadruple> = view
        .by_subject_relation(query.subject, query.relation)
        .iter()
        .take(budget)
        .map(|&i| *view.fact(i))
        .collect();
    if picked.len() < budget {
        let rest = view
            .by_subject(query.subject)
            .iter()
            .map(|&i| *view.fact(i))
            .filter(|q| q.relation != query.relation)
            .take(budget - picked.len());
        picked.extend(rest);
    }
    finish(picked, query)
}

/// Subject facts whose relation is the first body relation of a rule for the
/// query relation (confidence at least `min_rule_confidence`), most recent
/// first. Falls back to [`retrieve_entity_key`] when no rule applies.
pub fn retrieve_rule_based(
    view: HistoryView<'_>,
    query: &Query,
    store: &RuleStore,
    budget: usize,
    min_rule_confidence: f64,
) -> Vec<Quadruple> {
    let relations: HashSet<RelationId> = store
        .for_head(query.relation)
        .iter()
        .map(|&i| store.rule(i))
        .filter(|r| r.confidence >= min_rule_confidence)
        .map(|r| r.body[0])
        .collect();
    if relations.is_empty() {
        return retrieve_entity_key(view, query, budget);
    }
    let view = view.restrict(query.time);
    let picked: Vec<Quadruple> = view
        .by_subject(query.subject)
        .iter()
        .map(|&i| *view.fact(i))
        .filter(|q| relations.contains(&q.relation))
        .take(budget)
        .collect();
    finish(picked, query)
}

pub fn retrieve(
    view: HistoryView<'_>,
    query: &Query,
    config: &RetrievalConfig,
    store: Option<&RuleStore>,
) -> Vec<Quadruple> {
    match (config.strategy, store) {
        (Strategy::RuleBased, Some(store)) => {
            retrieve_rule_based(view, query, store, config.history_budget, config.min_rule_confidence)
        }
        _ => retrieve_entity_key(view, query, config.history_budget),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::TemporalKg;
    use crate::rules::TemporalRule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kg() -> TemporalKg {
        let mut facts = vec![
            Quadruple::new(1, 0, 10, 1),
            Quadruple::new(1, 0, 11, 2),
            Quadruple::new(1, 0, 12, 3),
        ];
        for t in 0..5 {
            facts.push(Quadruple::new(1, 2, 20 + t, t));
        }
        facts.push(Quadruple::new(1, 1, 30, 6));
        facts.push(Quadruple::new(1, 0, 13, 9));
        TemporalKg::new(40, 3, facts).unwrap()
    }

    #[test]
    fn cold_start_is_empty() {
        let kg = kg();
        let q = Query::open(5, 0, 9);
        assert!(retrieve_entity_key(kg.history_before(9), &q, 10).is_empty());
    }

    #[test]
    fn exact_tier_first_then_recent_subject_facts() {
        let kg = kg();
        let q = Query::open(1, 0, 8);
        let got = retrieve_entity_key(kg.history_before(8), &q, 4);
        assert_eq!(got.len(), 4);
        // three (1, 0) facts plus the most recent subject-only fact (t = 6)
        assert_eq!(
            got,
            vec![
                Quadruple::new(1, 0, 10, 1),
                Quadruple::new(1, 0, 11, 2),
                Quadruple::new(1, 0, 12, 3),
                Quadruple::new(1, 1, 30, 6),
            ]
        );
    }

    #[test]
    fn rule_based_prefers_body_relations() {
        let kg = kg();
        let store = RuleStore::new(vec![TemporalRule {
            head: 0,
            body: vec![1],
            confidence: 0.7,
            support: 3,
        }]);
        let q = Query::open(1, 0, 8);
        let got = retrieve_rule_based(kg.history_before(8), &q, &store, 3, 0.1);
        assert_eq!(got, vec![Quadruple::new(1, 1, 30, 6)]);
        // no rule for relation 2: identical to the entity-key result
        let q2 = Query::open(1, 2, 8);
        assert_eq!(
            retrieve_rule_based(kg.history_before(8), &q2, &store, 3, 0.1),
            retrieve_entity_key(kg.history_before(8), &q2, 3)
        );
        // confidence threshold filters the rule out
        assert_eq!(
            retrieve_rule_based(kg.history_before(8), &q, &store, 3, 0.9),
            retrieve_entity_key(kg.history_before(8), &q, 3)
        );
    }

    #[test]
    fn budget_order_and_leakage_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let facts = (0..80)
                .map(|_| {
                    Quadruple::new(
                        rng.gen_range(0..6),
                        rng.gen_range(0..4),
                        rng.gen_range(0..6),
                        rng.gen_range(0..10),
                    )
                })
                .collect();
            let kg = TemporalKg::new(6, 4, facts).unwrap();
            let store = RuleStore::new(vec![TemporalRule {
                head: rng.gen_range(0..4),
                body: vec![rng.gen_range(0..4)],
                confidence: 0.5,
                support: 1,
            }]);
            let t = rng.gen_range(0..11);
            let q = Query::open(rng.gen_range(0..6), rng.gen_range(0..4), t);
            let budget = rng.gen_range(1..8);
            for got in [
                retrieve_entity_key(kg.full_view(), &q, budget),
                retrieve_rule_based(kg.full_view(), &q, &store, budget, 0.0),
            ] {
                assert!(got.len() <= budget);
                assert!(got.iter().all(|f| f.time < t && f.subject == q.subject));
                assert!(got.windows(2).all(|w| w[0].time <= w[1].time));
            }
        }
    }
}
