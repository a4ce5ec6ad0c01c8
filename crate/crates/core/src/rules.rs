//! Cyclic temporal rules mined from backward temporal random walks.
//!
//! A rule `(e1, head, e_{l+1}) <- (e1, r1, e2, t1) ^ ... ^ (el, rl, e_{l+1}, tl)`
//! is stored as its head relation and ordered body relations. Mining samples
//! walks that start on a head edge and return to its subject strictly back in
//! time; the reversed walk, with every relation inverted, is the rule body.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::EntityDistribution;
use crate::error::{Error, Result};
use crate::kg::{EntityId, HistoryView, Query, RelationId, Time};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalRule {
    pub head: RelationId,
    pub body: Vec<RelationId>,
    /// Laplace-smoothed `(support + 1) / (body_support + 2)`.
    pub confidence: f64,
    /// Sampled body groundings whose head also holds afterwards.
    pub support: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RuleStore {
    rules: Vec<TemporalRule>,
    by_head: HashMap<RelationId, Vec<usize>>,
}

impl RuleStore {
    pub fn new(mut rules: Vec<TemporalRule>) -> Self {
        rules.sort_by(|a, b| (a.head, &a.body).cmp(&(b.head, &b.body)));
        // keep max support per (head, body)
        let mut merged: Vec<TemporalRule> = Vec::with_capacity(rules.len());
        for rule in rules {
            match merged.last_mut() {
                Some(last) if last.head == rule.head && last.body == rule.body => {
                    if rule.support > last.support {
                        *last = rule;
                    }
                }
                _ => merged.push(rule),
            }
        }
        let mut by_head: HashMap<RelationId, Vec<usize>> = HashMap::new();
        for (i, r) in merged.iter().enumerate() {
            by_head.entry(r.head).or_default().push(i);
        }
        Self {
            rules: merged,
            by_head,
        }
    }

    pub fn rules(&self) -> &[TemporalRule] {
        &self.rules
    }

    pub fn rule(&self, idx: usize) -> &TemporalRule {
        &self.rules[idx]
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Indices of rules with the given head.
    pub fn for_head(&self, head: RelationId) -> &[usize] {
        self.by_head.get(&head).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for rule in &self.rules {
            out.push_str(&serde_json::to_string(rule)?);
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ndjson(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rules = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rule: TemporalRule = serde_json::from_str(&line).map_err(|e| Error::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            rules.push(rule);
        }
        Ok(Self::new(rules))
    }

    pub fn stats(&self) -> RuleStats {
        let mut per_head: BTreeMap<RelationId, usize> = BTreeMap::new();
        let mut histogram = [0usize; 10];
        for r in &self.rules {
            *per_head.entry(r.head).or_default() += 1;
            let bucket = ((r.confidence * 10.0) as usize).min(9);
            histogram[bucket] += 1;
        }
        RuleStats {
            total: self.rules.len(),
            per_head,
            confidence_histogram: histogram,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RuleStats {
    pub total: usize,
    pub per_head: BTreeMap<RelationId, usize>,
    /// Ten equal-width confidence buckets over [0, 1].
    pub confidence_histogram: [usize; 10],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Walks sampled per head relation and body length.
    pub walks_per_relation: usize,
    pub max_body_len: usize,
    /// Recency bias of the walk transition weights, `exp(-decay * dt)`.
    pub decay: f64,
    /// Body groundings sampled per rule to estimate its confidence.
    pub confidence_samples: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            walks_per_relation: 200,
            max_body_len: 3,
            decay: 0.1,
            confidence_samples: 500,
            seed: 0,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ p))
}

/// Mines cyclic rules from `view`. The graph must carry inverse relations so
/// walks can traverse edges backwards.
pub fn mine_rules(view: HistoryView<'_>, config: &MiningConfig) -> Result<RuleStore> {
    let kg = view.kg();
    if !kg.is_augmented() {
        return Err(Error::Config(
            "rule mining requires an inverse-augmented graph".into(),
        ));
    }
    if config.max_body_len == 0 {
        return Err(Error::Config("max_body_len must be at least 1".into()));
    }
    if view.is_empty() {
        log::warn!("rule mining on an empty graph; no rules produced");
        return Ok(RuleStore::default());
    }
    let mut by_relation: BTreeMap<RelationId, Vec<u32>> = BTreeMap::new();
    for (i, q) in view.facts().iter().enumerate() {
        by_relation.entry(q.relation).or_default().push(i as u32);
    }

    let heads: Vec<RelationId> = by_relation.keys().copied().collect();
    let rules: Vec<TemporalRule> = heads
        .par_iter()
        .flat_map_iter(|&head| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[head as u64]));
            let starts = &by_relation[&head];
            let mut bodies: BTreeSet<Vec<RelationId>> = BTreeSet::new();
            for len in 1..=config.max_body_len {
                for _ in 0..config.walks_per_relation {
                    let start = view.facts()[starts[rng.gen_range(0..starts.len())] as usize];
                    if let Some(body) = sample_walk(view, &start, len, config.decay, &mut rng) {
                        bodies.insert(body);
                    }
                }
            }
            bodies
                .into_iter()
                .filter_map(|body| {
                    let mut seed_parts = vec![head as u64, 0xB0D1];
                    seed_parts.extend(body.iter().map(|&r| r as u64));
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &seed_parts));
                    let (support, body_support) = estimate_confidence(
                        view,
                        &by_relation,
                        head,
                        &body,
                        config.confidence_samples,
                        &mut rng,
                    );
                    (support > 0).then(|| TemporalRule {
                        head,
                        confidence: (support as f64 + 1.0) / (body_support as f64 + 2.0),
                        body,
                        support,
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(RuleStore::new(rules))
}

/// Backward walk from the head edge's object to its subject; returns the
/// rule body in forward order or `None` if the walk dead-ends.
fn sample_walk(
    view: HistoryView<'_>,
    start: &crate::kg::Quadruple,
    len: usize,
    decay: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<RelationId>> {
    let kg = view.kg();
    let mut cur = start.object;
    let mut bound = start.time;
    let mut walk: Vec<RelationId> = Vec::with_capacity(len);
    let mut weights: Vec<f64> = Vec::new();
    let mut cands: Vec<u32> = Vec::new();
    for step in 0..len {
        let last = step + 1 == len;
        cands.clear();
        weights.clear();
        for &idx in view.subject_in(cur, 0, bound) {
            let e = view.fact(idx);
            if last && e.object != start.subject {
                continue;
            }
            cands.push(idx);
            weights.push((-decay * (bound - e.time) as f64).exp());
        }
        if cands.is_empty() {
            return None;
        }
        let pick = if cands.len() == 1 {
            0
        } else {
            match WeightedIndex::new(&weights) {
                Ok(w) => w.sample(rng),
                Err(_) => rng.gen_range(0..cands.len()),
            }
        };
        let e = view.fact(cands[pick]);
        walk.push(e.relation);
        cur = e.object;
        bound = e.time;
    }
    Some(walk.iter().rev().map(|&r| kg.inverse_relation(r)).collect())
}

/// Samples body groundings; returns (rule support, body support) over the
/// distinct groundings drawn.
fn estimate_confidence(
    view: HistoryView<'_>,
    by_relation: &BTreeMap<RelationId, Vec<u32>>,
    head: RelationId,
    body: &[RelationId],
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> (u32, u32) {
    let Some(starts) = by_relation.get(&body[0]) else {
        return (0, 0);
    };
    let before = view.before();
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut support = 0u32;
    for _ in 0..samples {
        let first = view.facts()[starts[rng.gen_range(0..starts.len())] as usize];
        let mut key = vec![first.subject, first.object, first.time];
        let (mut cur, mut last_t) = (first.object, first.time);
        let mut ok = true;
        for &rel in &body[1..] {
            let next = view.sr_in(cur, rel, last_t, before);
            if next.is_empty() {
                ok = false;
                break;
            }
            let e = view.fact(next[rng.gen_range(0..next.len())]);
            key.extend([e.object, e.time]);
            cur = e.object;
            last_t = e.time;
        }
        if !ok || !seen.insert(key) {
            continue;
        }
        let holds = view
            .sr_in(first.subject, head, last_t + 1, before)
            .iter()
            .any(|&i| view.fact(i).object == cur);
        if holds {
            support += 1;
        }
    }
    (support, seen.len() as u32)
}

/// One instantiation of a rule body starting at the query subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleGrounding {
    /// Index into the rule store.
    pub rule: usize,
    pub terminal_entity: EntityId,
    pub body_times: Vec<Time>,
    pub last_time: Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    /// Only facts in `[t_q - window, t_q)` are used; `None` is the full history.
    pub window: Option<Time>,
    pub max_per_rule: usize,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            window: None,
            max_per_rule: 1000,
        }
    }
}

/// Enumerates body groundings of every rule whose head is the query relation.
/// Edges are explored most-recent-first and at most `max_per_rule` groundings
/// are kept per rule.
pub fn ground_rules(
    view: HistoryView<'_>,
    query: &Query,
    store: &RuleStore,
    config: &GroundingConfig,
) -> Vec<RuleGrounding> {
    let hi = query.time.min(view.before());
    let lo = config.window.map_or(0, |w| query.time.saturating_sub(w));
    let mut out = Vec::new();
    if hi == 0 || lo >= hi {
        return out;
    }
    for &rule_idx in store.for_head(query.relation) {
        let body = &store.rule(rule_idx).body;
        let mut times = Vec::with_capacity(body.len());
        let mut count = 0usize;
        dfs(
            view,
            body,
            query.subject,
            lo,
            hi,
            &mut times,
            &mut |terminal, times: &[Time]| {
                out.push(RuleGrounding {
                    rule: rule_idx,
                    terminal_entity: terminal,
                    body_times: times.to_vec(),
                    last_time: *times.last().unwrap_or(&0),
                });
                count += 1;
                count < config.max_per_rule
            },
        );
    }
    out
}

/// Returns false once the visitor asks to stop.
fn dfs(
    view: HistoryView<'_>,
    body: &[RelationId],
    cur: EntityId,
    lo: Time,
    hi: Time,
    times: &mut Vec<Time>,
    visit: &mut dyn FnMut(EntityId, &[Time]) -> bool,
) -> bool {
    let Some((&rel, rest)) = body.split_first() else {
        return visit(cur, times);
    };
    for &idx in view.sr_in(cur, rel, lo, hi) {
        let e = view.fact(idx);
        times.push(e.time);
        let go_on = dfs(view, rest, e.object, e.time, hi, times, visit);
        times.pop();
        if !go_on {
            return false;
        }
    }
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Max,
}

/// `score(e) = agg over groundings ending at e of conf * exp(-lambda (t_q - t_l))`,
/// normalized over scored entities.
pub fn static_score(
    groundings: &[RuleGrounding],
    store: &RuleStore,
    lambda: f64,
    query_time: Time,
    aggregation: Aggregation,
) -> EntityDistribution {
    let mut scores: BTreeMap<EntityId, f64> = BTreeMap::new();
    for g in groundings {
        let conf = store.rule(g.rule).confidence;
        let s = conf * (-lambda * query_time.saturating_sub(g.last_time) as f64).exp();
        let slot = scores.entry(g.terminal_entity).or_insert(0.0);
        match aggregation {
            Aggregation::Sum => *slot += s,
            Aggregation::Max => *slot = slot.max(s),
        }
    }
    EntityDistribution::from_weights(scores)
}
