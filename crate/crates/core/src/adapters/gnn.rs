use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::fusion::TapeDistribution;
use crate::kg::{EntityId, HistoryView, Query, RelationId, Time};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnAdapterConfig {
    pub dim: usize,
    /// Expansion hops.
    pub hops: usize,
    /// Nodes kept per hop.
    pub prune_budget: usize,
    /// Most recent earlier neighbors sampled per node.
    pub neighbor_cap: usize,
}

impl Default for GnnAdapterConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            hops: 2,
            prune_budget: 50,
            neighbor_cap: 30,
        }
    }
}

/// Temporal node in the query subgraph.
pub type Node = (EntityId, Time);

/// Expand-and-prune attention flow over the query's history.
///
/// Starting from `(s_q, t_q)` with attention 1, every hop distributes each
/// frontier node's attention over its most recent strictly-earlier outgoing
/// edges by a softmax of
/// `w2 . tanh(Wq emb(r_q) + Wr emb(r') + Wt te(t - t') + b1) + b2`,
/// with `te(dt) = cos(omega dt + phi)`. Reached nodes accumulate attention;
/// the top `prune_budget` of them form the next frontier. An entity's score
/// is its total attention and a softmax over reached entities gives the
/// distribution.
#[derive(Clone, Debug)]
pub struct GnnAdapter {
    config: GnnAdapterConfig,
    rel_emb: ParamId,
    omega: ParamId,
    phase: ParamId,
    w_q: ParamId,
    w_r: ParamId,
    w_t: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Per-hop trace, exposed for tests and diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Expansion {
    /// Accumulated attention over every reached node.
    pub attention: BTreeMap<Node, f64>,
    /// Frontier after pruning, per hop.
    pub frontiers: Vec<Vec<Node>>,
}

impl GnnAdapter {
    pub(crate) fn new(config: GnnAdapterConfig, params: &mut ParamSet, rel_emb: ParamId, rng: &mut impl rand::Rng) -> Self {
        let d = config.dim;
        let omega: Vec<f64> = (0..d)
            .map(|k| 10f64.powf(-4.0 * k as f64 / d.max(1) as f64))
            .collect();
        let bound = (6.0 / (2 * d) as f64).sqrt();
        Self {
            config,
            rel_emb,
            omega: params.add("gnn.omega", &[d], omega),
            phase: params.zeros("gnn.phase", &[d]),
            w_q: params.uniform("gnn.w_q", &[d, d], bound, rng),
            w_r: params.uniform("gnn.w_r", &[d, d], bound, rng),
            w_t: params.uniform("gnn.w_t", &[d, d], bound, rng),
            b1: params.zeros("gnn.b1", &[d]),
            w2: params.uniform("gnn.w2", &[d], (3.0 / d as f64).sqrt(), rng),
            b2: params.zeros("gnn.b2", &[1]),
        }
    }

    pub fn config(&self) -> &GnnAdapterConfig {
        &self.config
    }

    /// Attention-weight parameter of the edge scorer's output layer.
    pub fn output_weight(&self) -> ParamId {
        self.w2
    }

    fn run(&self, tape: &mut Tape<'_>, view: HistoryView<'_>, query: &Query) -> (BTreeMap<Node, Vec<Var>>, Vec<Vec<Node>>) {
        let view = view.restrict(query.time);
        let q = tape.row(self.rel_emb, query.relation as usize);
        let q = tape.matvec(self.w_q, q);
        let b1 = tape.param(self.b1);
        let q = tape.add(q, b1);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let omega = tape.param(self.omega);
        let phase = tape.param(self.phase);
        let mut rel_terms: HashMap<RelationId, Var> = HashMap::new();
        let mut time_terms: HashMap<Time, Var> = HashMap::new();

        let mut reached: BTreeMap<Node, Vec<Var>> = BTreeMap::new();
        let mut frontier: Vec<(Node, Var)> = vec![((query.subject, query.time), tape.constant(vec![1.0]))];
        let mut frontiers = Vec::new();
        for _ in 0..self.config.hops {
            let mut hop: BTreeMap<Node, Vec<Var>> = BTreeMap::new();
            for &((e, t), a) in &frontier {
                let edges = view.subject_in(e, 0, t);
                let edges = &edges[..edges.len().min(self.config.neighbor_cap)];
                if edges.is_empty() {
                    continue;
                }
                let mut logits = Vec::with_capacity(edges.len());
                for &idx in edges {
                    let f = view.fact(idx);
                    let r = *rel_terms.entry(f.relation).or_insert_with(|| {
                        let x = tape.row(self.rel_emb, f.relation as usize);
                        tape.matvec(self.w_r, x)
                    });
                    let dt = t - f.time;
                    let te = *time_terms.entry(dt).or_insert_with(|| {
                        let x = tape.scale(omega, dt as f64);
                        let x = tape.add(x, phase);
                        let x = tape.cos(x);
                        tape.matvec(self.w_t, x)
                    });
                    let h = tape.sum_n(&[q, r, te]);
                    let h = tape.tanh(h);
                    let s = tape.dot(w2, h);
                    logits.push(tape.add(s, b2));
                }
                let logits = tape.concat(&logits);
                let probs = tape.softmax(logits);
                for (j, &idx) in edges.iter().enumerate() {
                    let f = view.fact(idx);
                    let p = tape.index(probs, j);
                    hop.entry((f.object, f.time)).or_default().push(tape.mul(p, a));
                }
            }
            if hop.is_empty() {
                break;
            }
            let mut next: Vec<(Node, Var)> = hop
                .iter()
                .map(|(&n, parts)| (n, if parts.len() == 1 { parts[0] } else { tape.sum_n(parts) }))
                .collect();
            for (n, parts) in hop {
                reached.entry(n).or_default().extend(parts);
            }
            // keep the highest-attention nodes; ties break on node order
            next.sort_by(|x, y| tape.scalar(y.1).total_cmp(&tape.scalar(x.1)).then(x.0.cmp(&y.0)));
            next.truncate(self.config.prune_budget);
            next.sort_by_key(|x| x.0);
            frontiers.push(next.iter().map(|x| x.0).collect());
            frontier = next;
        }
        (reached, frontiers)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, view: HistoryView<'_>, query: &Query) -> TapeDistribution {
        let (reached, _) = self.run(tape, view, query);
        let mut per_entity: BTreeMap<EntityId, Vec<Var>> = BTreeMap::new();
        for ((e, _), parts) in reached {
            per_entity.entry(e).or_default().extend(parts);
        }
        if per_entity.is_empty() {
            return TapeDistribution::zero();
        }
        let mut candidates = Vec::with_capacity(per_entity.len());
        let mut scores = Vec::with_capacity(per_entity.len());
        for (e, parts) in per_entity {
            candidates.push(e);
            scores.push(tape.sum_n(&parts));
        }
        let scores = tape.concat(&scores);
        TapeDistribution {
            candidates,
            probs: Some(tape.softmax(scores)),
        }
    }

    /// Value-only trace of the expansion.
    pub fn expand(&self, params: &ParamSet, view: HistoryView<'_>, query: &Query) -> Expansion {
        let mut tape = Tape::new(params);
        let (reached, frontiers) = self.run(&mut tape, view, query);
        Expansion {
            attention: reached
                .into_iter()
                .map(|(n, parts)| (n, parts.iter().map(|&v| tape.scalar(v)).sum()))
                .collect(),
            frontiers,
        }
    }
}
