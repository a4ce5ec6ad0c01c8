//! Time-aware filtered ranking, Hits@K reports and ablation predictors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterModel;
use crate::dist::EntityDistribution;
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig};
use crate::kg::{Direction, EntityId, Query, TemporalKg};
use crate::lm::{DistributionCache, SoftmaxMode};
use crate::rules::{ground_rules, static_score, Aggregation, GroundingConfig, RuleStore};

/// Mid-tie filtered rank over the whole entity vocabulary: filtered entities
/// are removed, zero-mass entities all score 0, and ties count half.
pub fn filtered_rank(fused: &EntityDistribution, answer: EntityId, filter: &HashSet<EntityId>, entity_count: u32) -> usize {
    let target = fused.get(answer);
    let mut higher = 0usize;
    let mut ties = 0usize;
    let mut positive = 0usize;
    for &(e, p) in fused.entries() {
        if e == answer || filter.contains(&e) || e >= entity_count {
            continue;
        }
        if p > 0.0 {
            positive += 1;
        }
        if p > target {
            higher += 1;
        } else if p == target {
            ties += 1;
        }
    }
    if target == 0.0 {
        let filtered = filter.iter().filter(|&&e| e != answer && e < entity_count).count();
        ties = entity_count as usize - 1 - filtered - positive;
    }
    1 + higher + ties / 2
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hits {
    pub count: usize,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Hits {
    fn from_ranks(ranks: impl Iterator<Item = usize>) -> Self {
        let (mut n, mut h1, mut h3, mut h10) = (0usize, 0usize, 0usize, 0usize);
        for r in ranks {
            n += 1;
            h1 += (r <= 1) as usize;
            h3 += (r <= 3) as usize;
            h10 += (r <= 10) as usize;
        }
        let frac = |h: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
        Self {
            count: n,
            hits1: frac(h1),
            hits3: frac(h3),
            hits10: frac(h10),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Hits,
    pub forward: Hits,
    pub inverse: Hits,
}

impl MetricsReport {
    pub fn from_records(records: &[RankRecord]) -> Self {
        let of = |d: Option<Direction>| Hits::from_ranks(records.iter().filter(|r| d.is_none_or(|d| r.direction == d)).map(|r| r.rank));
        Self {
            overall: of(None),
            forward: of(Some(Direction::Forward)),
            inverse: of(Some(Direction::Inverse)),
        }
    }

    /// Aligned plain-text table.
    pub fn to_table(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8} {:>8}", "direction", "queries", "hits@1", "hits@3", "hits@10");
        for (name, h) in [("overall", &self.overall), ("forward", &self.forward), ("inverse", &self.inverse)] {
            let _ = writeln!(s, "{:<10} {:>8} {:>8.4} {:>8.4} {:>8.4}", name, h.count, h.hits1, h.hits3, h.hits10);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub qid: usize,
    pub rank: usize,
    pub direction: Direction,
    pub llm_candidates: usize,
    pub adapter_candidates: usize,
    pub union_candidates: usize,
}

/// One prediction with the component candidate-set sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub fused: EntityDistribution,
    pub llm_candidates: usize,
    pub adapter_candidates: usize,
}

impl Prediction {
    pub fn only(fused: EntityDistribution) -> Self {
        Self {
            llm_candidates: 0,
            adapter_candidates: 0,
            fused,
        }
    }
}

/// Single-step evaluation: every query sees the ground-truth history before
/// its own time. Queries must carry answers. Records follow query order.
pub fn evaluate<F>(kg: &TemporalKg, queries: &[Query], system: F) -> Result<(MetricsReport, Vec<RankRecord>)>
where
    F: Fn(&Query) -> Result<Prediction> + Sync,
{
    let records = queries
        .par_iter()
        .map(|q| {
            let answer = q
                .answer
                .ok_or_else(|| Error::Validation(format!("query {} has no answer", q.id)))?;
            let pred = system(q)?;
            let filter = kg.same_time_filter_set(q);
            Ok(RankRecord {
                qid: q.id,
                rank: filtered_rank(&pred.fused, answer, &filter, kg.entity_count()),
                direction: q.direction,
                llm_candidates: pred.llm_candidates,
                adapter_candidates: pred.adapter_candidates,
                union_candidates: pred.fused.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricsReport::from_records(&records), records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// LM cache fused with the adapter.
    Full,
    /// Same fusion, fed from an iteratively generated cache.
    NoBsl,
    /// Cached LM distribution alone.
    NoAdapter,
    AdapterOnly,
    /// Static rule scoring.
    TlogicStatic,
}

impl EvalMode {
    pub const ALL: [EvalMode; 5] = [
        EvalMode::Full,
        EvalMode::NoBsl,
        EvalMode::NoAdapter,
        EvalMode::AdapterOnly,
        EvalMode::TlogicStatic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Full => "full",
            EvalMode::NoBsl => "no_bsl",
            EvalMode::NoAdapter => "no_adapter",
            EvalMode::AdapterOnly => "adapter_only",
            EvalMode::TlogicStatic => "tlogic_static",
        }
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown eval mode {s:?} (expected full, no_bsl, no_adapter, adapter_only or tlogic_static)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticScoring {
    pub lambda: f64,
    pub aggregation: Aggregation,
    pub grounding: GroundingConfig,
}

impl Default for StaticScoring {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            aggregation: Aggregation::Sum,
            grounding: GroundingConfig::default(),
        }
    }
}

/// Artifacts an evaluation mode draws on. `cache` is the beam cache for
/// `full` / `no_adapter` and the iterative cache for `no_bsl`.
pub struct Predictor<'a> {
    pub mode: EvalMode,
    pub kg: &'a TemporalKg,
    pub cache: Option<&'a DistributionCache>,
    pub model: Option<&'a AdapterModel>,
    pub rules: Option<&'a RuleStore>,
    pub fusion: FusionConfig,
    pub softmax: SoftmaxMode,
    pub static_scoring: StaticScoring,
}

impl<'a> Predictor<'a> {
    /// Names of artifacts the mode needs but was not given.
    pub fn missing_artifacts(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let needs_cache = matches!(self.mode, EvalMode::Full | EvalMode::NoBsl | EvalMode::NoAdapter);
        let needs_model = matches!(self.mode, EvalMode::Full | EvalMode::NoBsl | EvalMode::AdapterOnly);
        if needs_cache && self.cache.is_none() {
            out.push(if self.mode == EvalMode::NoBsl { "iterative LM cache" } else { "LM cache" });
        }
        if needs_model && self.model.is_none() {
            out.push("adapter checkpoint");
        }
        if self.mode == EvalMode::TlogicStatic && self.rules.is_none() {
            out.push("rule store");
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        let missing = self.missing_artifacts();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingArtifact(format!("{} mode needs: {}", self.mode.as_str(), missing.join(", "))))
        }
    }

    pub fn predict(&self, query: &Query) -> Result<Prediction> {
        let view = self.kg.history_before(query.time);
        let llm = || -> Result<EntityDistribution> {
            let cache = self.cache.expect("checked");
            cache.distribution(query.id, self.softmax)
        };
        Ok(match self.mode {
            EvalMode::NoAdapter => {
                let p = llm()?;
                Prediction {
                    llm_candidates: p.len(),
                    adapter_candidates: 0,
                    fused: p,
                }
            }
            EvalMode::AdapterOnly => {
                let a = self.model.expect("checked").distribution(view, query);
                Prediction {
                    llm_candidates: 0,
                    adapter_candidates: a.len(),
                    fused: a,
                }
            }
            EvalMode::Full | EvalMode::NoBsl => {
                let model = self.model.expect("checked");
                let p = llm()?;
                let a = model.distribution(view, query);
                let w = model.gate_weight(query);
                Prediction {
                    llm_candidates: p.len(),
                    adapter_candidates: a.len(),
                    fused: fuse(&p, &a, w, &self.fusion),
                }
            }
            EvalMode::TlogicStatic => {
                let store = self.rules.expect("checked");
                let s = self.static_scoring;
                let g = ground_rules(view, query, store, &s.grounding);
                let d = static_score(&g, store, s.lambda, query.time, s.aggregation);
                Prediction {
                    llm_candidates: 0,
                    adapter_candidates: d.len(),
                    fused: d,
                }
            }
        })
    }

    pub fn evaluate(&self, queries: &[Query]) -> Result<(MetricsReport, Vec<RankRecord>)> {
        self.check()?;
        evaluate(self.kg, queries, |q| self.predict(q))
    }
}
